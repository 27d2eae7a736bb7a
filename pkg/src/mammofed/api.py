"""Per-node HTTP endpoint for clients (workbench, CLI, scripts).

Plain HTTP/1.1 with fixed routes on a listener separate from the inter-site
frame port, so browsers can talk to a node but can never inject inter-site
frames. Every route requires the bearer token. Result sets negotiate
between the native XML and a JSON rendering carrying exactly the same
rows field-for-field.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import asdict
from datetime import date
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Optional
from urllib.parse import parse_qs, urlparse

from . import records
from .node import Node, QueryOutcome, ReferenceBindingError
from .query import QueryError, decode as decode_query
from .suites import AllocationError
from .translator import ImageMatchCriteria, SimilarityCriteria, TranslationError

logger = logging.getLogger(__name__)


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def merged_to_json(outcome: QueryOutcome) -> dict:
    merged = outcome.merged
    return {
        "query": merged.query_id,
        "cache": outcome.cache,
        "missing": [{"site": s, "reason": r} for s, r in merged.missing],
        "records": [
            {"entity": row.entity, "id": row.id, "site": row.site,
             "fields": {path: value for path, value in row.fields}}
            for row in merged.rows
        ],
    }


def record_to_json(record: Any) -> dict:
    out = {}
    for key, value in asdict(record).items():
        if isinstance(value, date):
            value = value.isoformat()
        elif isinstance(value, tuple):
            value = list(value)
        out[key] = value
    return out


def criteria_from_json(obj: dict) -> SimilarityCriteria:
    image_match = None
    like = obj.get("like_image")
    if like is not None:
        views = like.get("views") or list(records.VIEWS)
        image_match = ImageMatchCriteria(like["image_id"], float(like["threshold"]),
                                         tuple(views))
    return SimilarityCriteria(
        age_band=int(obj.get("age_band", 3)),
        match_children_band=bool(obj.get("match_children_band", False)),
        match_pregnancy_ages_band=(int(obj["pregnancy_age_band"])
                                   if obj.get("pregnancy_age_band") is not None else None),
        image_match=image_match,
    )


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "mammofed"

    # set by the factory
    node: Node = None  # type: ignore[assignment]

    def log_message(self, fmt, *args):  # stderr noise -> debug log
        logger.debug("%s " + fmt, self.address_string(), *args)

    # -- plumbing --

    def _authorized(self) -> bool:
        header = self.headers.get("Authorization", "")
        return header == f"Bearer {self.node.token}"

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length", "0") or "0")
        return self.rfile.read(length) if length else b""

    def _read_json(self) -> dict:
        body = self._read_body()
        if not body:
            return {}
        try:
            obj = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ApiError(400, f"bad request body: {exc}") from None
        if not isinstance(obj, dict):
            raise ApiError(400, "request body must be a JSON object")
        return obj

    def _send(self, status: int, content_type: str, body: bytes,
              headers: Optional[dict] = None) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        for key, value in (headers or {}).items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, obj: Any, headers: Optional[dict] = None) -> None:
        self._send(status, "application/json",
                   json.dumps(obj, sort_keys=True).encode("utf-8"), headers)

    def _send_error_json(self, status: int, message: str) -> None:
        self._send_json(status, {"error": message})

    def _send_outcome(self, outcome: QueryOutcome, fmt: str) -> None:
        if fmt == "json":
            self._send_json(200, merged_to_json(outcome))
            return
        headers = {
            "X-Cache": outcome.cache,
            "X-Missing-Sites": ",".join(f"{s}:{r}" for s, r in outcome.merged.missing),
        }
        self._send(200, "application/xml; charset=utf-8",
                   outcome.xml.encode("utf-8"), headers)

    # -- routing --

    def do_OPTIONS(self):
        self._send(204, "text/plain", b"", {
            "Access-Control-Allow-Methods": "GET, POST, OPTIONS",
            "Access-Control-Allow-Headers": "Authorization, Content-Type",
        })

    def do_GET(self):
        self._route("GET")

    def do_POST(self):
        self._route("POST")

    def _route(self, method: str) -> None:
        try:
            if not self._authorized():
                self._send_error_json(401, "unauthorized")
                return
            url = urlparse(self.path)
            params = {k: v[-1] for k, v in parse_qs(url.query).items()}
            handler = self._find_route(method, url.path)
            if handler is None:
                self._send_error_json(404, f"no route {method} {url.path}")
                return
            handler(params)
        except ApiError as exc:
            self._send_error_json(exc.status, str(exc))
        except BrokenPipeError:
            pass
        except Exception as exc:
            logger.exception("unhandled API error")
            self._send_error_json(500, f"internal error: {exc}")

    def _find_route(self, method: str, path: str):
        if method == "POST":
            return {
                "/query": self._post_query,
                "/similar": self._post_similar,
                "/ingest": self._post_ingest,
                "/allocate": self._post_allocate,
            }.get(path)
        if path.startswith("/patients/"):
            return lambda params: self._get_record("patients", path.split("/", 2)[2])
        return {
            "/sites": self._get_sites,
            "/cache/stats": self._get_cache_stats,
            "/studies": lambda p: self._get_children("studies", "patient", "patient_id", p),
            "/images": lambda p: self._get_children("images", "study", "study_id", p),
            "/annotations": lambda p: self._get_children("annotations", "image", "image_id", p),
        }.get(path)

    # -- endpoints --

    def _post_query(self, params: dict) -> None:
        body = self._read_json()
        fmt = body.get("format", params.get("format", "xml"))
        try:
            if "dsl" in body:
                outcome = self.node.run_dsl(body["dsl"], force_local=bool(body.get("local")))
            elif "formal_query" in body:
                wire = body["formal_query"]
                if not isinstance(wire, str):
                    wire = json.dumps(wire)
                outcome = self.node.run_query(decode_query(wire))
            else:
                raise ApiError(400, "body needs dsl or formal_query")
        except (TranslationError, QueryError, ReferenceBindingError) as exc:
            raise ApiError(400, str(exc)) from None
        self._check_total_failure(outcome)
        self._send_outcome(outcome, fmt)

    def _post_similar(self, params: dict) -> None:
        body = self._read_json()
        fmt = body.get("format", params.get("format", "xml"))
        if "patient_id" not in body:
            raise ApiError(400, "body needs patient_id")
        try:
            crit = criteria_from_json(body.get("criteria", {}))
            outcome = self.node.run_similar(body["patient_id"], crit)
        except (KeyError, ValueError) as exc:
            raise ApiError(400, f"bad criteria: {exc}") from None
        self._check_total_failure(outcome)
        self._send_outcome(outcome, fmt)

    def _check_total_failure(self, outcome: QueryOutcome) -> None:
        # Local error plus every peer missing leaves nothing to report.
        if not outcome.merged.contributions and outcome.merged.missing:
            raise ApiError(502, "total federation failure: "
                           + ", ".join(f"{s} {r}" for s, r in outcome.merged.missing))

    def _post_ingest(self, params: dict) -> None:
        body = self._read_body().decode("utf-8")
        report = self.node.ingest_lines(body.splitlines())
        self._send_json(200, {
            "accepted": report.accepted,
            "rejected": [[line, reason] for line, reason in report.rejected],
            "new_version": report.new_version,
        })

    def _post_allocate(self, params: dict) -> None:
        body = self._read_json()
        if "patient_id" not in body:
            raise ApiError(400, "body needs patient_id")
        try:
            pair = self.node.allocate(body["patient_id"])
        except AllocationError as exc:
            raise ApiError(409, str(exc)) from None
        self._send_json(200, {
            "patient_id": body["patient_id"],
            "pair": list(pair),
            "pair_counts": self.node.allocation.counts_snapshot(),
        })

    def _get_sites(self, params: dict) -> None:
        self._send_json(200, self.node.sites_info())

    def _get_cache_stats(self, params: dict) -> None:
        self._send_json(200, self.node.cache_stats())

    def _get_record(self, entity: str, record_id: str) -> None:
        record = self.node.store.get_entity(entity, record_id)
        if record is None:
            raise ApiError(404, f"no {records.ENTITY_SINGULAR[entity]} {record_id!r}")
        self._send_json(200, record_to_json(record))

    def _get_children(self, entity: str, param: str, ref_field: str, params: dict) -> None:
        if param not in params:
            raise ApiError(400, f"query parameter {param!r} required")
        wanted = params[param]
        snap = self.node.store.snapshot()
        rows = [record_to_json(rec) for rid, rec in sorted(snap.tables[entity].items())
                if getattr(rec, ref_field) == wanted]
        self._send_json(200, rows)


class NodeApiServer:
    """Threaded HTTP listener bound to one node."""

    def __init__(self, node: Node, host: str = "127.0.0.1", port: int = 0):
        handler = type("BoundHandler", (_Handler,), {"node": node})
        self._server = ThreadingHTTPServer((host, port), handler)
        self._server.daemon_threads = True
        self.node = node
        self.host = host
        self.port = self._server.server_address[1]
        self._thread: Optional[threading.Thread] = None

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> None:
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.05),
            name=f"api-{self.node.site_id}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

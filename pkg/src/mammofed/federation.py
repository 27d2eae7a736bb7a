"""Inter-site portal: framed wire protocol, query forwarding, result joining.

Frames are a 4-byte big-endian length prefix followed by a UTF-8 JSON body
with a `type` tag (QUERY, RESULT, VERSION_PROBE, VERSION, ERROR) and a
shared-secret `token` in every message; one request gets exactly one
response per connection turn. Forwarded queries always carry hop budget 0,
so a remote site never fans out again.

Peer failures are first-class: each dispatch maps to a result set or a
missing marker with reason timeout, refused, or transport.
"""

from __future__ import annotations

import json
import socket
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Protocol

from .query import FormalQuery, QueryError, decode as decode_query, encode as encode_query
from .result_xml import ResultSet, Row, merged_xml, resultset_from_xml, sort_rows

MSG_QUERY = "QUERY"
MSG_RESULT = "RESULT"
MSG_VERSION_PROBE = "VERSION_PROBE"
MSG_VERSION = "VERSION"
MSG_ERROR = "ERROR"

REASON_TIMEOUT = "timeout"
REASON_REFUSED = "refused"
REASON_TRANSPORT = "transport"

MAX_FRAME_BYTES = 64 * 1024 * 1024


class FrameError(ValueError):
    """Byte stream violates the framing contract."""


class PeerFailure(Exception):
    """A dispatch to a peer failed; `reason` is the missing-marker reason."""

    reason = REASON_TRANSPORT


class PeerRefused(PeerFailure):
    reason = REASON_REFUSED


class PeerTimeout(PeerFailure):
    reason = REASON_TIMEOUT


class PeerTransportError(PeerFailure):
    reason = REASON_TRANSPORT


class FederationIntegrityError(RuntimeError):
    """Two contributions disagree on the same (site, entity, id) row."""


# ---------------------------------------------------------------------------
# Framing


def encode_frame(payload: dict) -> bytes:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise FrameError(f"frame body of {len(body)} bytes exceeds the cap")
    return struct.pack(">I", len(body)) + body


def decode_frame_body(body: bytes) -> dict:
    try:
        payload = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"bad frame body: {exc}") from None
    if not isinstance(payload, dict):
        raise FrameError("frame body must be a JSON object")
    return payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise FrameError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def send_frame(sock: socket.socket, payload: dict) -> None:
    sock.sendall(encode_frame(payload))


def recv_frame(sock: socket.socket) -> dict:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"frame length {length} exceeds the cap")
    return decode_frame_body(_recv_exact(sock, length))


# ---------------------------------------------------------------------------
# Dialers


class Dialer(Protocol):
    def request(self, address: str, payload: dict, timeout_s: float) -> dict:
        """One request, one response. Raises PeerFailure subtypes."""


class TcpDialer:
    """Dials host:port addresses with one frame out, one frame back."""

    def request(self, address: str, payload: dict, timeout_s: float) -> dict:
        host, _, port_text = address.rpartition(":")
        try:
            port = int(port_text)
        except ValueError:
            raise PeerTransportError(f"bad address {address!r}") from None
        try:
            with socket.create_connection((host or "127.0.0.1", port), timeout=timeout_s) as sock:
                sock.settimeout(timeout_s)
                send_frame(sock, payload)
                return recv_frame(sock)
        except ConnectionRefusedError as exc:
            raise PeerRefused(str(exc)) from None
        except socket.timeout as exc:
            raise PeerTimeout(str(exc)) from None
        except (OSError, FrameError) as exc:
            raise PeerTransportError(str(exc)) from None


# ---------------------------------------------------------------------------
# Message builders


def error_message(token: str, query_id: Optional[str], code: str, message: str) -> dict:
    out = {"type": MSG_ERROR, "token": token, "code": code, "message": message}
    if query_id is not None:
        out["query_id"] = query_id
    return out


def handle_incoming(payload: dict, node) -> dict:
    """Serve one inbound frame against a node; never raises.

    QUERY re-enters the local pipeline at hop 0; VERSION_PROBE answers with
    the current data version; anything else is an ERROR response.
    """
    token = getattr(node, "token", "")
    try:
        if not isinstance(payload, dict) or not isinstance(payload.get("type"), str):
            return error_message(token, None, "bad_message", "missing message type")
        query_id = payload.get("query_id")
        if not isinstance(query_id, str):
            query_id = None
        if payload.get("token") != node.token:
            return error_message(token, query_id, "unauthorized", "token mismatch")
        mtype = payload["type"]

        if mtype == MSG_VERSION_PROBE:
            return {"type": MSG_VERSION, "token": token, "site_id": node.site_id,
                    "data_version": node.store.data_version()}

        if mtype == MSG_QUERY:
            if query_id is None:
                return error_message(token, None, "bad_message", "QUERY needs a query_id")
            if payload.get("hop_budget") != 0:
                return error_message(token, query_id, "hop_violation",
                                     "forwarded queries must carry hop budget 0")
            wire = payload.get("formal_query")
            if not isinstance(wire, str):
                return error_message(token, query_id, "bad_message",
                                     "QUERY needs formal_query wire text")
            try:
                q = decode_query(wire)
            except QueryError as exc:
                return error_message(token, query_id, "bad_message", str(exc))
            try:
                rs = node.execute_formal_local(q, query_id=query_id)
            except Exception as exc:
                return error_message(token, query_id, "exec_error", str(exc))
            from .result_xml import to_xml
            return {"type": MSG_RESULT, "token": token, "query_id": query_id,
                    "xml": to_xml(rs), "data_version": rs.source_version}

        return error_message(token, query_id, "bad_message", f"unknown type {mtype!r}")
    except Exception as exc:  # the node must answer whatever happens
        return error_message(token, None, "internal", str(exc))


# ---------------------------------------------------------------------------
# Forwarding and joining


def forward_query(dialer: Dialer, address: str, peer_site: str, q: FormalQuery,
                  query_id: str, token: str, deadline_s: float) -> ResultSet:
    """Send one QUERY frame to a peer and parse its RESULT.

    Raises a PeerFailure whose reason becomes the missing marker.
    """
    if q.scope.hop_budget != 0:
        raise ValueError("forwarded queries must carry hop budget 0")
    payload = {
        "type": MSG_QUERY,
        "token": token,
        "query_id": query_id,
        "hop_budget": 0,
        "formal_query": encode_query(q),
    }
    resp = dialer.request(address, payload, deadline_s)
    if not isinstance(resp, dict):
        raise PeerTransportError("peer sent a non-object response")
    if resp.get("type") == MSG_ERROR:
        raise PeerTransportError(
            f"peer error {resp.get('code', '?')}: {resp.get('message', '')}")
    if resp.get("type") != MSG_RESULT or resp.get("query_id") != query_id:
        raise PeerTransportError("peer response violates the protocol")
    try:
        rs = resultset_from_xml(resp["xml"], expected_query_id=query_id)
    except (KeyError, ValueError) as exc:
        raise PeerTransportError(f"unparseable peer result: {exc}") from None
    if rs.site_id != peer_site:
        raise PeerTransportError(
            f"peer claims site {rs.site_id!r}, expected {peer_site!r}")
    version = resp.get("data_version")
    if not isinstance(version, int) or version != rs.source_version:
        raise PeerTransportError("peer version fields disagree")
    return rs


@dataclass(frozen=True)
class MergedResultSet:
    query_id: str
    origin_site: str
    contributions: tuple[ResultSet, ...]
    missing: tuple[tuple[str, str], ...]
    rows: tuple[Row, ...]
    skipped: int

    def to_xml(self) -> str:
        return merged_xml(self.query_id, self.origin_site, self.skipped,
                          self.missing, self.rows)

    def version_snapshot(self) -> dict[str, int]:
        return {c.site_id: c.source_version for c in self.contributions}


def join_results(local: Optional[ResultSet], remotes: list[ResultSet],
                 missing: list[tuple[str, str]], origin_site: Optional[str] = None,
                 query_id: Optional[str] = None) -> MergedResultSet:
    """Union all contributions, deduplicated by (site, entity, id) and sorted.

    Duplicate keys must agree field-for-field; a disagreement is an
    integrity error, not a silent pick.
    """
    contributions = ([local] if local is not None else []) + list(remotes)
    if not contributions and query_id is None:
        raise ValueError("join needs at least one contribution or an explicit query_id")
    qid = query_id if query_id is not None else contributions[0].query_id
    origin = origin_site if origin_site is not None else (
        local.site_id if local is not None else qid)
    for c in contributions:
        if c.query_id != qid:
            raise ValueError(f"query id mismatch: {c.query_id} != {qid}")
    contributing_sites = {c.site_id for c in contributions}
    missing_sorted = tuple(sorted(set(missing)))
    for site, _ in missing_sorted:
        if site in contributing_sites:
            raise FederationIntegrityError(
                f"site {site} both contributed and is marked missing")
    by_key: dict[tuple[str, str, str], Row] = {}
    for c in contributions:
        for row in c.rows:
            prior = by_key.get(row.key)
            if prior is None:
                by_key[row.key] = row
            elif prior.fields != row.fields:
                raise FederationIntegrityError(
                    f"conflicting duplicate row for {row.key}")
    rows = sort_rows(by_key.values())
    skipped = sum(c.skipped for c in contributions)
    return MergedResultSet(qid, origin, tuple(contributions), missing_sorted, rows, skipped)


def dispatch_remotes(dialer: Dialer, parts: list[tuple[str, str, FormalQuery]],
                     query_id: str, token: str, deadline_s: float,
                     ordered: bool) -> tuple[list[ResultSet], list[tuple[str, str]]]:
    """Dispatch (site, address, query) triples; collect results and failures.

    Ordered mode dispatches sequentially in the given order (deterministic
    transcripts); otherwise peers are dialed concurrently with independent
    deadlines.
    """
    results: list[ResultSet] = []
    failures: list[tuple[str, str]] = []

    def one(site: str, address: str, q: FormalQuery):
        return forward_query(dialer, address, site, q, query_id, token, deadline_s)

    if ordered or len(parts) <= 1:
        for site, address, q in parts:
            try:
                results.append(one(site, address, q))
            except PeerFailure as exc:
                failures.append((site, exc.reason))
        return results, failures

    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        futures = {pool.submit(one, site, address, q): site
                   for site, address, q in parts}
        for future, site in futures.items():
            try:
                results.append(future.result())
            except PeerFailure as exc:
                failures.append((site, exc.reason))
    return results, failures

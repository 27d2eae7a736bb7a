"""Operator and test-harness entry point.

Subcommands drive a running node over its HTTP API (`query`, `ingest`,
`similar`, `suite`, `cache`), start a whole network (`serve`), or replay a
scripted simulation in-process (`sim run`). Machine-readable output goes to
stdout only; diagnostics go to stderr. Exit codes: 0 success, 1 user error,
2 transport error.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading
import urllib.error
import urllib.request
from pathlib import Path

from . import simulator, suites
from .api import NodeApiServer

EXIT_OK = 0
EXIT_USER = 1
EXIT_TRANSPORT = 2

DEFAULT_CONFIG = "mammofed.json"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USER):
        super().__init__(message)
        self.code = code


def _load_config(path: str | None) -> simulator.SimConfig:
    cfg_path = path or os.environ.get("MAMMOFED_CONFIG", DEFAULT_CONFIG)
    if not Path(cfg_path).exists():
        raise CliError(f"config file {cfg_path!r} not found (use --config)")
    try:
        return simulator.SimConfig.from_path(cfg_path)
    except (ValueError, OSError) as exc:
        raise CliError(f"bad config {cfg_path!r}: {exc}") from None


def _site_api(cfg: simulator.SimConfig, site_id: str) -> tuple[str, str]:
    """(base url, token) of a site's HTTP endpoint."""
    for site in cfg.sites:
        if site.site_id == site_id:
            if site.api_port is None:
                raise CliError(f"site {site_id!r} has no api_port in the config")
            token = os.environ.get("MAMMOFED_TOKEN") or cfg.token_for(site)
            return f"http://{cfg.host}:{site.api_port}", token
    raise CliError(f"unknown site {site_id!r}")


def _request(method: str, url: str, token: str, body: bytes | None = None,
             content_type: str = "application/json", timeout: float = 10.0) -> tuple[int, bytes]:
    req = urllib.request.Request(url, data=body, method=method)
    req.add_header("Authorization", f"Bearer {token}")
    if body is not None:
        req.add_header("Content-Type", content_type)
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        payload = exc.read()
        message = payload.decode("utf-8", "replace")
        if exc.code >= 500:
            raise CliError(f"server error {exc.code}: {message}", EXIT_TRANSPORT) from None
        raise CliError(f"request failed {exc.code}: {message}") from None
    except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
        raise CliError(f"cannot reach {url}: {exc}", EXIT_TRANSPORT) from None


def _post_json(base: str, token: str, path: str, obj: dict) -> bytes:
    _, body = _request("POST", base + path, token, json.dumps(obj).encode("utf-8"))
    return body


def _fetch_rows(base: str, token: str, dsl: str, local: bool = False) -> list[dict]:
    body = _post_json(base, token, "/query", {"dsl": dsl, "local": local, "format": "json"})
    return json.loads(body.decode("utf-8"))["records"]


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_serve(args) -> int:
    cfg = _load_config(args.config)
    if not cfg.tcp:
        raise CliError("serve needs a port for every site in the config")
    for site in cfg.sites:
        if site.api_port is None:
            raise CliError(f"site {site.site_id!r} has no api_port in the config")
    net = simulator.build_network(cfg)
    apis = []
    for site in cfg.sites:
        server = NodeApiServer(net.node(site.site_id), cfg.host, site.api_port)
        server.start()
        apis.append(server)
        print(f"site {site.site_id}: frames {cfg.host}:{site.port}"
              f" api {server.base_url}", file=sys.stderr)
    stop = threading.Event()

    def shut_down(_sig, _frame):
        stop.set()

    signal.signal(signal.SIGINT, shut_down)
    signal.signal(signal.SIGTERM, shut_down)
    print("network up; interrupt to stop", file=sys.stderr)
    stop.wait()
    for server in apis:
        server.stop()
    net.close()
    return EXIT_OK


def _cmd_ingest(args) -> int:
    cfg = _load_config(args.config)
    base, token = _site_api(cfg, args.site)
    try:
        data = Path(args.file).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {args.file!r}: {exc}") from None
    _, body = _request("POST", base + "/ingest", token, data, "application/x-ndjson")
    sys.stdout.write(body.decode("utf-8") + "\n")
    return EXIT_OK


def _cmd_query(args) -> int:
    cfg = _load_config(args.config)
    base, token = _site_api(cfg, args.site)
    body = _post_json(base, token, "/query",
                      {"dsl": args.dsl, "local": args.local, "format": args.format})
    sys.stdout.write(body.decode("utf-8"))
    if args.format == "json":
        sys.stdout.write("\n")
    return EXIT_OK


def _cmd_similar(args) -> int:
    cfg = _load_config(args.config)
    base, token = _site_api(cfg, args.site)
    criteria: dict = {"age_band": args.age_band,
                      "match_children_band": args.children_band}
    if args.pregnancy_band is not None:
        criteria["pregnancy_age_band"] = args.pregnancy_band
    if args.like is not None:
        if args.threshold is None:
            raise CliError("--like needs --threshold")
        criteria["like_image"] = {"image_id": args.like, "threshold": args.threshold,
                                  "views": args.views.split(",") if args.views else None}
    body = _post_json(base, token, "/similar",
                      {"patient_id": args.patient, "criteria": criteria,
                       "format": args.format})
    sys.stdout.write(body.decode("utf-8"))
    if args.format == "json":
        sys.stdout.write("\n")
    return EXIT_OK


def _cmd_cache_stats(args) -> int:
    cfg = _load_config(args.config)
    base, token = _site_api(cfg, args.site)
    _, body = _request("GET", base + "/cache/stats", token)
    sys.stdout.write(body.decode("utf-8") + "\n")
    return EXIT_OK


def _cmd_suite(args) -> int:
    cfg = _load_config(args.config)
    base, token = _site_api(cfg, args.site)

    if args.name == "contralateral":
        rows = _fetch_rows(base, token, "find studies where diagnosis = cancer")
        views = [suites.StudyView(
            r["fields"].get("study.patient_id", ""),
            r["fields"].get("study.study_date", ""),
            r["fields"].get("study.diagnosis"),
            r["fields"].get("study.diagnosed_laterality"),
            r["fields"].get("study.therapy_outcome"),
        ) for r in rows]
        cohort = suites.contralateral_cohort(views)
        if args.format == "xml":
            site_of = {r["fields"].get("study.patient_id", ""): r["site"] for r in rows}
            sys.stdout.write(_report_xml(
                args.site, [(site_of.get(pid, args.site), "patients", pid,
                             (("patient.patient_id", pid),)) for pid in cohort]))
            sys.stdout.write("\n")
        else:
            sys.stdout.write(suites.cohort_csv(cohort))
        return EXIT_OK

    if args.name == "qc-allocate":
        rows = _fetch_rows(base, token, 'find patients local where patient != ""')
        patient_ids = sorted(r["id"] for r in rows)
        state = suites.AllocationState(seed=args.seed)
        assignments = [{"patient_id": pid, "pair": list(state.allocate(pid))}
                       for pid in patient_ids]
        print(json.dumps({"seed": args.seed, "assignments": assignments,
                          "pair_counts": state.counts_snapshot()}, sort_keys=True))
        return EXIT_OK

    if args.name == "qc-metrics":
        rows = _fetch_rows(base, token, 'find annotations local where annotation id != ""')
        by_image: dict[str, list] = {}
        for r in rows:
            f = r["fields"]
            regions = tuple(tuple(rect) for rect in json.loads(f.get("annotation.regions", "[]")))
            ann = _AnnotationView(
                r["id"], f.get("annotation.image_id", ""), f.get("annotation.author", ""),
                f.get("annotation.kind", ""), regions,
                int(f["annotation.microcalc_count"]) if "annotation.microcalc_count" in f else None,
                float(f["annotation.session_length_min"]) if "annotation.session_length_min" in f else None,
                int(f["annotation.serial_order"]) if "annotation.serial_order" in f else None,
                f.get("annotation.reading"),
                int(f["annotation.author_experience_years"]) if "annotation.author_experience_years" in f else None,
            )
            by_image.setdefault(ann.image_id, []).append(ann)
        report = suites.disagreement_report(by_image)
        if args.format == "xml":
            sys.stdout.write(_report_xml(args.site, [
                (args.site, "images", row.image_id, (
                    ("reader_a", row.reader_a),
                    ("reader_b", row.reader_b),
                    ("mass_area_mm2", repr(row.mass_area_mm2)),
                    ("microcalc_count_diff", str(row.microcalc_count_diff)),
                )) for row in report]))
            sys.stdout.write("\n")
        else:
            sys.stdout.write(suites.report_csv(report))
        return EXIT_OK

    raise CliError(f"unknown suite {args.name!r}")


def _report_xml(site: str, rows) -> str:
    """Render suite report rows in the engine's XML result layout."""
    from .result_xml import Row, merged_xml, sort_rows

    built = sort_rows(Row(row_site, entity, rid, fields)
                      for row_site, entity, rid, fields in rows)
    return merged_xml("Q-" + "0" * 32, site, 0, (), built)


class _AnnotationView:
    def __init__(self, annotation_id, image_id, author, kind, regions, microcalc_count,
                 session_length_min, serial_order, reading, author_experience_years):
        self.annotation_id = annotation_id
        self.image_id = image_id
        self.author = author
        self.kind = kind
        self.regions = regions
        self.microcalc_count = microcalc_count
        self.session_length_min = session_length_min
        self.serial_order = serial_order
        self.reading = reading
        self.author_experience_years = author_experience_years


def _cmd_sim_run(args) -> int:
    cfg = _load_config(args.config)
    try:
        script = simulator.load_script(args.script)
    except (OSError, ValueError) as exc:
        raise CliError(f"bad script {args.script!r}: {exc}") from None
    net = simulator.build_network(cfg)
    try:
        results, transcript = simulator.run_scenario(net, script)
    except simulator.ScenarioError as exc:
        raise CliError(f"scenario failed at {exc}") from None
    finally:
        net.close()
    if args.transcript:
        Path(args.transcript).write_text(net.transcript.to_jsonl(), encoding="utf-8")
    print(json.dumps({"steps": len(script), "results": results}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mammofed",
                                     description="federated mammogram-metadata query engine")
    parser.add_argument("--config", help=f"network config file (default ${{MAMMOFED_CONFIG}}"
                                          f" or {DEFAULT_CONFIG})")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("serve", help="start every node in the config")
    p.set_defaults(fn=_cmd_serve)

    p = sub.add_parser("ingest", help="ingest a JSONL file at a site")
    p.add_argument("--site", required=True)
    p.add_argument("--file", required=True)
    p.set_defaults(fn=_cmd_ingest)

    p = sub.add_parser("query", help="run a query at a site")
    p.add_argument("--site", required=True)
    p.add_argument("--local", action="store_true", help="skip federation")
    p.add_argument("--format", choices=("xml", "json"), default="xml")
    p.add_argument("dsl")
    p.set_defaults(fn=_cmd_query)

    p = sub.add_parser("similar", help="find similar cases for a patient")
    p.add_argument("--site", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--age-band", type=int, default=3, dest="age_band")
    p.add_argument("--children-band", action="store_true", dest="children_band")
    p.add_argument("--pregnancy-band", type=int, default=None, dest="pregnancy_band")
    p.add_argument("--like", help="reference image id")
    p.add_argument("--threshold", type=float)
    p.add_argument("--views", help="comma list: MLO,CC")
    p.add_argument("--format", choices=("xml", "json"), default="xml")
    p.set_defaults(fn=_cmd_similar)

    p = sub.add_parser("suite", help="run a clinical suite against a site")
    p.add_argument("name", choices=("contralateral", "qc-allocate", "qc-metrics"))
    p.add_argument("--site", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "xml"), default="csv")
    p.set_defaults(fn=_cmd_suite)

    p = sub.add_parser("cache", help="knowledge-cache inspection")
    cache_sub = p.add_subparsers(dest="cache_command")
    stats = cache_sub.add_parser("stats")
    stats.add_argument("--site", required=True)
    stats.set_defaults(fn=_cmd_cache_stats)

    p = sub.add_parser("sim", help="simulation tools")
    sim_sub = p.add_subparsers(dest="sim_command")
    run = sim_sub.add_parser("run")
    run.add_argument("--script", required=True)
    run.add_argument("--transcript", help="write the frame transcript (JSONL)")
    run.set_defaults(fn=_cmd_sim_run)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; contract says 1
        return EXIT_OK if exc.code in (0, None) else EXIT_USER
    fn = getattr(args, "fn", None)
    if fn is None:
        parser.print_usage(sys.stderr)
        return EXIT_USER
    try:
        return fn(args)
    except CliError as exc:
        print(f"mammofed: {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

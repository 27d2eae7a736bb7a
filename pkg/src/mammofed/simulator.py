"""Deterministic multi-site networks, in-process or over loopback sockets.

Every inter-site frame is recorded exactly once in a transcript ordered by
a logical clock, which makes message-count assertions exact. Determinism
comes from seeded per-node query-id streams, ordered peer dispatch, and
zero default latency; faults (site down/up, drop-next-frame) are scripted.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import federation
from .analyser import PeerInfo, SiteRegistry
from .federation import (Dialer, PeerRefused, PeerTimeout, PeerTransportError,
                         TcpDialer, recv_frame, send_frame)
from .node import Node, NodeConfig
from .query import fnv1a64

logger = logging.getLogger(__name__)


class SimConfigError(ValueError):
    pass


class StartupError(RuntimeError):
    pass


class ScenarioError(RuntimeError):
    def __init__(self, step_index: int, message: str):
        super().__init__(f"step {step_index}: {message}")
        self.step_index = step_index


@dataclass
class SimSiteConfig:
    site_id: str
    port: Optional[int] = None  # None means in-process transport
    api_port: Optional[int] = None
    seed_data: Optional[str] = None
    token: Optional[str] = None


@dataclass
class SimConfig:
    sites: list[SimSiteConfig]
    latency_ms: dict[str, float] = field(default_factory=dict)  # "A->B" keys
    faults: list[dict] = field(default_factory=list)  # {"at_step", "action", "site"}
    seed: int = 0
    default_token: str = "grid-token"
    query_timeout_s: float = 1.0
    cache_capacity: int = 256
    host: str = "127.0.0.1"
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [s.site_id for s in self.sites]
        if len(set(ids)) != len(ids):
            raise SimConfigError("site ids must be unique")
        ports = [s.port for s in self.sites if s.port]  # 0 asks for an ephemeral port
        ports += [s.api_port for s in self.sites if s.api_port]
        if len(set(ports)) != len(ports):
            raise SimConfigError("ports must be unique")
        for v in self.latency_ms.values():
            if v < 0:
                raise SimConfigError("latencies must be non-negative")

    @property
    def tcp(self) -> bool:
        return bool(self.sites) and all(s.port is not None for s in self.sites)

    def token_for(self, site: SimSiteConfig) -> str:
        return site.token if site.token is not None else self.default_token

    @classmethod
    def from_obj(cls, obj: dict, base_dir: Path = Path()) -> "SimConfig":
        sites = [SimSiteConfig(s["site_id"], s.get("port"), s.get("api_port"),
                               s.get("seed_data"), s.get("token"))
                 for s in obj.get("sites", [])]
        return cls(sites,
                   dict(obj.get("latency_ms", {})),
                   list(obj.get("faults", [])),
                   int(obj.get("seed", 0)),
                   obj.get("default_token", "grid-token"),
                   float(obj.get("query_timeout_s", 1.0)),
                   int(obj.get("cache_capacity", 256)),
                   obj.get("host", "127.0.0.1"),
                   base_dir)

    @classmethod
    def from_path(cls, path) -> "SimConfig":
        p = Path(path)
        with open(p, "r", encoding="utf-8") as fh:
            return cls.from_obj(json.load(fh), base_dir=p.parent)


# ---------------------------------------------------------------------------
# Transcript


@dataclass(frozen=True)
class TranscriptRecord:
    t: int
    from_site: str
    to_site: str
    payload: dict
    dropped: bool = False

    @property
    def msg_type(self) -> str:
        return self.payload.get("type", "?")


class Transcript:
    """Append-only frame log, totally ordered by a logical clock."""

    def __init__(self):
        self._records: list[TranscriptRecord] = []
        self._clock = 0
        self._lock = threading.Lock()

    def record(self, from_site: str, to_site: str, payload: dict,
               dropped: bool = False) -> None:
        redacted = {k: v for k, v in payload.items() if k != "token"}
        with self._lock:
            self._clock += 1
            self._records.append(TranscriptRecord(self._clock, from_site, to_site,
                                                  redacted, dropped))

    def records(self) -> list[TranscriptRecord]:
        with self._lock:
            return list(self._records)

    def frames(self, msg_type: Optional[str] = None) -> list[TranscriptRecord]:
        return [r for r in self.records()
                if msg_type is None or r.msg_type == msg_type]

    def query_frame_count(self) -> int:
        return len(self.frames(federation.MSG_QUERY))

    def signature(self) -> list[tuple[str, str, str]]:
        """(from, to, type) sequence; the determinism comparand."""
        return [(r.from_site, r.to_site, r.msg_type) for r in self.records()]

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records():
            lines.append(json.dumps({
                "t": r.t, "from": r.from_site, "to": r.to_site,
                "dropped": r.dropped, "msg": r.payload,
            }, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# In-process transport


class LoopbackNetwork:
    """Synchronous in-process transport with fault injection.

    A refused dial records nothing (no frame ever left); a dropped frame is
    recorded once with the dropped flag and surfaces as a timeout.
    """

    def __init__(self, transcript: Transcript, latency_ms: Optional[dict] = None):
        self.transcript = transcript
        self.latency_ms = latency_ms or {}
        self._nodes: dict[str, Node] = {}
        self._down: set[str] = set()
        self._drop_next: dict[str, int] = {}
        self._lock = threading.Lock()

    @staticmethod
    def address_of(site_id: str) -> str:
        return f"inproc:{site_id}"

    def register(self, node: Node) -> None:
        self._nodes[self.address_of(node.site_id)] = node

    def set_down(self, site_id: str, down: bool = True) -> None:
        with self._lock:
            if down:
                self._down.add(site_id)
            else:
                self._down.discard(site_id)

    def drop_next(self, site_id: str, count: int = 1) -> None:
        with self._lock:
            self._drop_next[site_id] = self._drop_next.get(site_id, 0) + count

    def dialer_for(self, from_site: str) -> "LoopbackDialer":
        return LoopbackDialer(self, from_site)

    def request(self, from_site: str, address: str, payload: dict,
                timeout_s: float) -> dict:
        node = self._nodes.get(address)
        if node is None:
            raise PeerTransportError(f"unknown address {address!r}")
        to_site = node.site_id
        with self._lock:
            if to_site in self._down:
                raise PeerRefused(f"site {to_site} is down")
            drop = self._drop_next.get(to_site, 0) > 0
            if drop:
                self._drop_next[to_site] -= 1
                if self._drop_next[to_site] <= 0:
                    del self._drop_next[to_site]
        latency = self.latency_ms.get(f"{from_site}->{to_site}",
                                      self.latency_ms.get("default", 0.0))
        if latency:
            threading.Event().wait(min(latency / 1000.0, timeout_s))
            if 2 * latency / 1000.0 > timeout_s:
                raise PeerTimeout(f"link latency exceeds the {timeout_s}s deadline")
        self.transcript.record(from_site, to_site, payload, dropped=drop)
        if drop:
            raise PeerTimeout(f"frame to {to_site} dropped")
        response = node.handle_frame(payload)
        self.transcript.record(to_site, from_site, response)
        return response


class LoopbackDialer:
    def __init__(self, network: LoopbackNetwork, from_site: str):
        self._network = network
        self._from_site = from_site

    def request(self, address: str, payload: dict, timeout_s: float) -> dict:
        return self._network.request(self._from_site, address, payload, timeout_s)


class RecordingDialer:
    """Wraps a real dialer so every frame that actually left is recorded."""

    def __init__(self, inner: Dialer, transcript: Transcript, from_site: str,
                 site_of_address: dict[str, str]):
        self._inner = inner
        self._transcript = transcript
        self._from_site = from_site
        self._site_of_address = site_of_address

    def request(self, address: str, payload: dict, timeout_s: float) -> dict:
        to_site = self._site_of_address.get(address, address)
        try:
            response = self._inner.request(address, payload, timeout_s)
        except PeerRefused:
            raise  # connection never opened; no frame left this node
        except PeerTimeout:
            self._transcript.record(self._from_site, to_site, payload, dropped=True)
            raise
        self._transcript.record(self._from_site, to_site, payload)
        self._transcript.record(to_site, self._from_site, response)
        return response


# ---------------------------------------------------------------------------
# TCP frame server


class FrameServer(threading.Thread):
    """One listener per site: one frame in, one frame out per connection.

    The node may be attached after the socket is opened, so ephemeral ports
    can be resolved before registries are built.
    """

    def __init__(self, node: Optional[Node], host: str, port: int):
        name = f"frames-{node.site_id}" if node is not None else "frames"
        super().__init__(daemon=True, name=name)
        self.node = node
        self.host = host
        self.port = port
        self._sock: Optional[socket.socket] = None
        self._stopped = threading.Event()

    def open_socket(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.host, self.port))
        except OSError as exc:
            sock.close()
            raise StartupError(f"cannot bind {self.host}:{self.port}: {exc}") from None
        sock.listen(16)
        if self.port == 0:
            self.port = sock.getsockname()[1]
        self._sock = sock

    def run(self) -> None:
        assert self._sock is not None, "open_socket() must run before start()"
        assert self.node is not None, "a node must be attached before start()"
        while not self._stopped.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                break
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        with conn:
            try:
                payload = recv_frame(conn)
            except federation.FrameError as exc:
                try:
                    send_frame(conn, federation.error_message(
                        self.node.token, None, "bad_message", str(exc)))
                except OSError:
                    pass
                return
            response = self.node.handle_frame(payload)
            try:
                send_frame(conn, response)
            except OSError:
                logger.debug("client of %s vanished before the response", self.node.site_id)

    def stop(self) -> None:
        self._stopped.set()
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None


# ---------------------------------------------------------------------------
# Network assembly


class SimNetwork:
    def __init__(self, cfg: SimConfig, nodes: dict[str, Node], transcript: Transcript,
                 loop: Optional[LoopbackNetwork], servers: dict[str, FrameServer]):
        self.cfg = cfg
        self.nodes = nodes
        self.transcript = transcript
        self.loop = loop
        self.servers = servers

    def node(self, site_id: str) -> Node:
        try:
            return self.nodes[site_id]
        except KeyError:
            raise SimConfigError(f"unknown site {site_id!r}") from None

    def set_down(self, site_id: str) -> None:
        self.node(site_id)
        if self.loop is not None:
            self.loop.set_down(site_id)
        else:
            self.servers[site_id].stop()

    def set_up(self, site_id: str) -> None:
        node = self.node(site_id)
        if self.loop is not None:
            self.loop.set_down(site_id, down=False)
        else:
            old = self.servers[site_id]
            server = FrameServer(node, old.host, old.port)
            server.open_socket()
            server.start()
            self.servers[site_id] = server

    def drop_next(self, site_id: str, count: int = 1) -> None:
        self.node(site_id)
        if self.loop is None:
            raise SimConfigError("drop-next faults need the in-process transport")
        self.loop.drop_next(site_id, count)

    def close(self) -> None:
        for server in self.servers.values():
            server.stop()


def _node_seed(cfg_seed: int, site_id: str) -> int:
    return fnv1a64(f"{cfg_seed}:{site_id}")


def build_network(cfg: SimConfig) -> SimNetwork:
    """Start every site and cross-wire the registries full mesh."""
    transcript = Transcript()
    tcp = cfg.tcp
    loop = None if tcp else LoopbackNetwork(transcript, cfg.latency_ms)

    servers: dict[str, FrameServer] = {}
    try:
        if tcp:
            # Bind every listener first so ephemeral ports resolve before
            # the registries are built.
            for site in cfg.sites:
                server = FrameServer(None, cfg.host, site.port)
                server.open_socket()
                servers[site.site_id] = server

        def address(site: SimSiteConfig) -> str:
            if tcp:
                return f"{cfg.host}:{servers[site.site_id].port}"
            return LoopbackNetwork.address_of(site.site_id)

        site_of_address = {address(s): s.site_id for s in cfg.sites}
        nodes: dict[str, Node] = {}
        for site in cfg.sites:
            registry = SiteRegistry(site.site_id, [
                PeerInfo(other.site_id, address(other))
                for other in cfg.sites if other.site_id != site.site_id
            ])
            node_cfg = NodeConfig(
                site_id=site.site_id,
                token=cfg.token_for(site),
                query_timeout_s=cfg.query_timeout_s,
                cache_capacity=cfg.cache_capacity,
                dispatch="ordered",
                allocation_seed=_node_seed(cfg.seed, site.site_id) & 0x7FFFFFFF,
                rng_seed=_node_seed(cfg.seed, site.site_id),
            )
            if tcp:
                dialer: Dialer = RecordingDialer(TcpDialer(), transcript,
                                                 site.site_id, site_of_address)
            else:
                dialer = loop.dialer_for(site.site_id)
            node = Node(node_cfg, registry, dialer)
            if site.seed_data:
                node.store.ingest_path(cfg.base_dir / site.seed_data)
            nodes[site.site_id] = node
            if loop is not None:
                loop.register(node)
            else:
                servers[site.site_id].node = node
                servers[site.site_id].start()
    except Exception:
        for server in servers.values():
            server.stop()
        raise

    net = SimNetwork(cfg, nodes, transcript, loop, servers)
    _health_check(net)
    return net


def _health_check(net: SimNetwork) -> None:
    """Every node must answer a VERSION_PROBE (off the transcript)."""
    probe_dialer = TcpDialer() if net.loop is None else None
    for site_id, node in net.nodes.items():
        if probe_dialer is None:
            resp = node.handle_frame({"type": federation.MSG_VERSION_PROBE,
                                      "token": node.token})
        else:
            address = f"{net.cfg.host}:{net.servers[site_id].port}"
            resp = probe_dialer.request(address, {"type": federation.MSG_VERSION_PROBE,
                                                  "token": node.token}, 2.0)
        if resp.get("type") != federation.MSG_VERSION:
            raise StartupError(f"site {site_id} failed its startup probe: {resp}")


# ---------------------------------------------------------------------------
# Scenario driver


def load_script(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        steps = json.load(fh)
    if not isinstance(steps, list):
        raise SimConfigError("a scenario script is a JSON list of steps")
    return steps


def run_scenario(net: SimNetwork, script: list[dict]) -> tuple[list[dict], Transcript]:
    """Run ordered ingest/query/fault/assert steps; deterministic at zero latency."""
    results: list[dict] = []
    last_query: Optional[dict] = None
    config_faults = list(net.cfg.faults)

    for index, step in enumerate(script):
        for fault in config_faults:
            if fault.get("at_step") == index:
                _apply_fault(net, fault, index)
        op = step.get("op")
        try:
            if op == "ingest":
                node = net.node(step["site"])
                if "file" in step:
                    report = node.store.ingest_path(net.cfg.base_dir / step["file"])
                else:
                    lines = [json.dumps(obj) for obj in step.get("records", [])]
                    report = node.ingest_lines(lines)
                results.append({"step": index, "op": op, "site": step["site"],
                                "accepted": report.accepted,
                                "rejected": list(report.rejected),
                                "version": report.new_version})
            elif op == "query":
                node = net.node(step["site"])
                outcome = node.run_dsl(step["dsl"], force_local=step.get("local", False))
                last_query = {
                    "step": index, "op": op, "site": step["site"],
                    "rows": len(outcome.merged.rows),
                    "cache": outcome.cache,
                    "missing": [list(m) for m in outcome.merged.missing],
                    "xml": outcome.xml,
                }
                results.append(last_query)
            elif op == "fault":
                _apply_fault(net, step, index)
                results.append({"step": index, "op": op, "site": step.get("site"),
                                "action": step.get("action")})
            elif op == "assert":
                _run_assert(net, step, last_query, index)
                results.append({"step": index, "op": op, "check": step.get("check"),
                                "ok": True})
            else:
                raise ScenarioError(index, f"unknown op {op!r}")
        except ScenarioError:
            raise
        except Exception as exc:
            raise ScenarioError(index, str(exc)) from exc
    return results, net.transcript


def _apply_fault(net: SimNetwork, fault: dict, index: int) -> None:
    action = fault.get("action")
    site = fault.get("site")
    if action == "down":
        net.set_down(site)
    elif action == "up":
        net.set_up(site)
    elif action == "drop_next":
        net.drop_next(site, int(fault.get("count", 1)))
    else:
        raise ScenarioError(index, f"unknown fault action {action!r}")


def _run_assert(net: SimNetwork, step: dict, last_query: Optional[dict],
                index: int) -> None:
    check = step.get("check")
    expected = step.get("value")
    if check == "rows":
        if last_query is None:
            raise ScenarioError(index, "no query has run yet")
        actual = last_query["rows"]
    elif check == "cache":
        if last_query is None:
            raise ScenarioError(index, "no query has run yet")
        actual = last_query["cache"]
    elif check == "missing":
        if last_query is None:
            raise ScenarioError(index, "no query has run yet")
        actual = last_query["missing"]
        expected = [list(m) for m in (expected or [])]
    elif check == "query_frames":
        actual = net.transcript.query_frame_count()
    elif check == "version":
        actual = net.node(step["site"]).store.data_version()
    else:
        raise ScenarioError(index, f"unknown check {check!r}")
    if actual != expected:
        raise ScenarioError(index, f"{check}: expected {expected!r}, got {actual!r}")

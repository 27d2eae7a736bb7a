"""Query decomposition: one local sub-query plus one dispatch per peer.

Decomposition is a broadcast: every site evaluates the identical predicate
(the schema is homogeneous across sites, so there is nothing to prune on).
Forwarded sub-queries carry hop budget 0, which makes them terminal and
the per-query message count exactly |peers|.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from .query import FormalQuery, validate_query, with_hop

JOIN_DEDUPE_KEY = ("site_id", "entity", "id")
JOIN_ORDER = "lexicographic"


@dataclass
class PeerInfo:
    site_id: str
    address: str
    last_known_version: Optional[int] = None
    status: str = "unknown"  # up | down | unknown


@dataclass
class SiteRegistry:
    local_site: str
    peers: list[PeerInfo] = field(default_factory=list)

    def __post_init__(self):
        ids = [self.local_site] + [p.site_id for p in self.peers]
        if len(set(ids)) != len(ids):
            raise ValueError("site ids must be unique and exclude the local site")

    def peer(self, site_id: str) -> Optional[PeerInfo]:
        for p in self.peers:
            if p.site_id == site_id:
                return p
        return None


@dataclass(frozen=True)
class JoinSpec:
    dedupe_key: tuple[str, ...] = JOIN_DEDUPE_KEY
    order: str = JOIN_ORDER


@dataclass(frozen=True)
class QueryPlan:
    query_id: str
    local_part: FormalQuery
    remote_parts: tuple[tuple[str, FormalQuery], ...]
    join_spec: JoinSpec = JoinSpec()


def new_query_id(rng: Optional[random.Random] = None) -> str:
    bits = (rng or random).getrandbits(128)
    return f"Q-{bits:032x}"


def plan(q: FormalQuery, reg: SiteRegistry, query_id: Optional[str] = None,
         exclude_sites: Optional[set[str]] = None) -> QueryPlan:
    """Decompose a query for local execution and per-peer dispatch.

    Peers marked down are still planned; their failure surfaces at dispatch
    time as a missing marker. `exclude_sites` is an accepted hint and
    unused by the default pipeline.
    """
    validate_query(q)
    local_part = with_hop(q, 0)
    remote_parts: list[tuple[str, FormalQuery]] = []
    if q.scope.hop_budget == 1:
        excluded = exclude_sites or set()
        for peer in reg.peers:
            if peer.site_id in excluded:
                continue
            remote_parts.append((peer.site_id, local_part))
    return QueryPlan(query_id or new_query_id(), local_part, tuple(remote_parts))

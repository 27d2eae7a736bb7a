"""Stored-query knowledge base: merged results keyed by canonical query.

An entry is fresh only while every site in its version snapshot still
reports exactly the data version it contributed with; any ingest anywhere
in the snapshot makes it stale, and an unreachable site makes dependent
entries conservatively stale. Partial results (missing sites) are never
cached, so an outage can not freeze itself into future answers.
"""

from __future__ import annotations

import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

from .analyser import SiteRegistry
from .federation import (MSG_VERSION, MSG_VERSION_PROBE, Dialer, MergedResultSet,
                         PeerFailure)

FRESH = "fresh"
STALE = "stale"
MISS = "miss"


class PartialResultError(ValueError):
    """Attempt to cache a result with missing sites."""


@dataclass
class KnowledgeEntry:
    key: int
    merged_xml: str
    version_snapshot: dict[str, int]
    created_at: float
    hit_count: int = 0


class KnowledgeCache:
    """LRU-bounded map from canonical query key to cached merged XML."""

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: "OrderedDict[int, KnowledgeEntry]" = OrderedDict()
        self._lock = threading.Lock()
        self._hits = 0
        self._misses = 0
        self._evictions = 0

    def lookup(self, key: int, current_versions: dict[str, int]
               ) -> tuple[str, Optional[KnowledgeEntry]]:
        """fresh(entry) when every snapshot site still matches, stale(entry)
        when the entry exists otherwise, miss when absent."""
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                self._misses += 1
                return MISS, None
            fresh = all(current_versions.get(site) == version
                        for site, version in entry.version_snapshot.items())
            if fresh:
                entry.hit_count += 1
                self._hits += 1
                self._entries.move_to_end(key)
                return FRESH, entry
            self._misses += 1
            return STALE, entry

    def update(self, key: int, merged: MergedResultSet,
               snapshot: dict[str, int]) -> KnowledgeEntry:
        """Store (replacing any prior entry); partial results are rejected."""
        if merged.missing:
            raise PartialResultError(
                f"refusing to cache a partial result (missing {list(merged.missing)})")
        entry = KnowledgeEntry(key, merged.to_xml(), dict(snapshot), time.time())
        with self._lock:
            self._entries.pop(key, None)
            self._entries[key] = entry
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
                self._evictions += 1
        return entry

    def stats(self) -> dict[str, int]:
        with self._lock:
            return {"entries": len(self._entries), "hits": self._hits,
                    "misses": self._misses, "evictions": self._evictions}

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


def probe_versions(reg: SiteRegistry, local_version: int, dialer: Dialer,
                   token: str, timeout_s: float) -> dict[str, int]:
    """Current data versions across the registry; unreachable sites omitted.

    The local site is always present. Peer status and last known version in
    the registry are refreshed as a side effect.
    """
    versions = {reg.local_site: local_version}
    for peer in reg.peers:
        payload = {"type": MSG_VERSION_PROBE, "token": token}
        try:
            resp = dialer.request(peer.address, payload, timeout_s)
        except PeerFailure:
            peer.status = "down"
            continue
        if (isinstance(resp, dict) and resp.get("type") == MSG_VERSION
                and isinstance(resp.get("data_version"), int)):
            versions[peer.site_id] = resp["data_version"]
            peer.status = "up"
            peer.last_known_version = resp["data_version"]
        else:
            peer.status = "down"
    return versions

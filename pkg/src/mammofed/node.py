"""A grid node: store, registry, providers, knowledge cache, and pipeline.

`run_query` is the full query session: bind derived references, consult
the knowledge base (probing peer versions first), and on a miss decompose,
execute locally, dispatch to every peer, join, and cache the merged result
when no site is missing. `handle_frame` is the inbound face used by peers.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, replace
from typing import Optional

from . import analyser, federation, local_handler, records
from .cache import FRESH, KnowledgeCache, probe_versions
from .federation import Dialer, MergedResultSet, join_results
from .query import (And, DerivedCmp, FormalQuery, Not, Or, Predicate,
                    normalize, validate_query)
from .result_xml import ResultSet
from .suites import AllocationState
from .translator import (SimilarityCriteria, TermDictionary, build_similarity_query,
                         load_default_dictionary, translate)

logger = logging.getLogger(__name__)

DEFAULT_READERS = ("R1", "R2", "R3")


class ReferenceBindingError(ValueError):
    """A similarity reference image is not in the local store."""


@dataclass
class NodeConfig:
    site_id: str
    token: str = "grid-token"
    query_timeout_s: float = 2.0
    probe_timeout_s: float = 1.0
    cache_capacity: int = 256
    dispatch: str = "concurrent"  # "ordered" gives deterministic transcripts
    readers: tuple[str, str, str] = DEFAULT_READERS
    allocation_seed: int = 1
    rng_seed: Optional[int] = None  # query-id stream; None draws from os entropy


@dataclass(frozen=True)
class QueryOutcome:
    merged: MergedResultSet
    cache: str  # "hit" | "miss"
    xml: str


class Node:
    def __init__(self, config: NodeConfig, registry: analyser.SiteRegistry,
                 dialer: Dialer, store: Optional[records.SiteStore] = None,
                 providers: Optional[local_handler.ProviderRegistry] = None,
                 dictionary: Optional[TermDictionary] = None):
        if registry.local_site != config.site_id:
            raise ValueError("registry local site must match the node site")
        self.config = config
        self.site_id = config.site_id
        self.token = config.token
        self.registry = registry
        self.store = store if store is not None else records.SiteStore(config.site_id)
        self.providers = providers if providers is not None else local_handler.default_providers()
        self.dictionary = dictionary if dictionary is not None else load_default_dictionary()
        self.cache = KnowledgeCache(config.cache_capacity)
        self.allocation = AllocationState(config.readers, config.allocation_seed)
        self._dialer = dialer
        self._rng = random.Random(config.rng_seed) if config.rng_seed is not None else None

    # -- inbound --

    def handle_frame(self, payload: dict) -> dict:
        return federation.handle_incoming(payload, self)

    def execute_formal_local(self, q: FormalQuery, query_id: str) -> ResultSet:
        plan = analyser.plan(q, self.registry, query_id=query_id)
        stmts = local_handler.compile_statements(plan.local_part)
        return local_handler.execute_local(stmts, self.store, self.providers, query_id)

    # -- query session --

    def run_dsl(self, text: str, force_local: bool = False) -> QueryOutcome:
        q = translate(text, self.dictionary, origin_site=self.site_id)
        if force_local:
            q = replace(q, scope=replace(q.scope, hop_budget=0))
        return self.run_query(q)

    def run_similar(self, patient_id: str, crit: SimilarityCriteria) -> QueryOutcome:
        ref = self.store.get_entity("patients", patient_id)
        if ref is None:
            raise ReferenceBindingError(f"patient {patient_id!r} not in the local store")
        q = build_similarity_query(ref, crit, origin_site=self.site_id)
        return self.run_query(q)

    def run_query(self, q: FormalQuery) -> QueryOutcome:
        q = self.bind_derived_references(q)
        validate_query(q)
        canon = normalize(q)

        if q.scope.hop_budget == 1 and self.registry.peers:
            versions = probe_versions(self.registry, self.store.data_version(),
                                      self._dialer, self.token,
                                      self.config.probe_timeout_s)
        else:
            versions = {self.site_id: self.store.data_version()}

        status, entry = self.cache.lookup(canon.key, versions)
        if status == FRESH and entry is not None:
            merged = _merged_from_cached_xml(entry.merged_xml)
            return QueryOutcome(merged, "hit", entry.merged_xml)

        plan = analyser.plan(q, self.registry, query_id=self._new_query_id())

        local_rs: Optional[ResultSet] = None
        missing: list[tuple[str, str]] = []
        try:
            stmts = local_handler.compile_statements(plan.local_part)
            local_rs = local_handler.execute_local(stmts, self.store, self.providers,
                                                   plan.query_id)
        except local_handler.ExecutionError as exc:
            # A runtime failure at the local site only; the peers may still
            # answer, so it is reported as a missing marker, not a crash.
            logger.warning("local execution failed for %s: %s", plan.query_id, exc)
            missing.append((self.site_id, federation.REASON_TRANSPORT))

        parts = []
        for peer_site, sub in plan.remote_parts:
            peer = self.registry.peer(peer_site)
            parts.append((peer_site, peer.address, sub))
        remotes, failures = federation.dispatch_remotes(
            self._dialer, parts, plan.query_id, self.token,
            self.config.query_timeout_s, ordered=self.config.dispatch == "ordered")
        missing.extend(failures)
        for site, _reason in failures:
            peer = self.registry.peer(site)
            if peer is not None:
                peer.status = "down"
        for rs in remotes:
            peer = self.registry.peer(rs.site_id)
            if peer is not None:
                peer.status = "up"
                peer.last_known_version = rs.source_version

        merged = join_results(local_rs, remotes, missing,
                              origin_site=self.site_id, query_id=plan.query_id)
        if not merged.missing:
            entry = self.cache.update(canon.key, merged, merged.version_snapshot())
            return QueryOutcome(merged, "miss", entry.merged_xml)
        return QueryOutcome(merged, "miss", merged.to_xml())

    # -- similarity reference binding --

    def bind_derived_references(self, q: FormalQuery) -> FormalQuery:
        """Resolve similarity reference image ids to explicit per-view
        feature vectors before any dispatch; peers can not resolve a foreign
        image id."""
        def rewrite(node: Predicate) -> Predicate:
            if isinstance(node, DerivedCmp):
                params = node.params
                if (node.provider == local_handler.FIND_ONE_LIKE_IT
                        and "reference" in params
                        and "reference_features" not in params):
                    ref = self.store.get_entity("images", params["reference"])
                    if ref is None:
                        raise ReferenceBindingError(
                            f"reference image {params['reference']!r} not in the local store")
                    new_params = dict(params)
                    new_params["reference_features"] = {ref.view: list(ref.feature_vector)}
                    return DerivedCmp(node.provider, new_params, node.op, node.value)
                return node
            if isinstance(node, Not):
                return Not(rewrite(node.child))
            if isinstance(node, And):
                return And(tuple(rewrite(c) for c in node.children))
            if isinstance(node, Or):
                return Or(tuple(rewrite(c) for c in node.children))
            return node

        return replace(q, predicate=rewrite(q.predicate))

    # -- operational surface --

    def ingest_lines(self, lines) -> records.IngestReport:
        return self.store.ingest_lines(lines)

    def allocate(self, patient_id: str) -> tuple[str, str]:
        return self.allocation.allocate(patient_id)

    def cache_stats(self) -> dict[str, int]:
        return self.cache.stats()

    def sites_info(self) -> dict:
        return {
            "local": {"site_id": self.site_id, "data_version": self.store.data_version()},
            "peers": [
                {"site_id": p.site_id, "address": p.address, "status": p.status,
                 "last_known_version": p.last_known_version}
                for p in self.registry.peers
            ],
        }

    def _new_query_id(self) -> str:
        return analyser.new_query_id(self._rng)


def _merged_from_cached_xml(xml_text: str) -> MergedResultSet:
    from .result_xml import parse_resultset
    parsed = parse_resultset(xml_text)
    return MergedResultSet(parsed.query_id, parsed.site_id, (), parsed.missing,
                           parsed.rows, parsed.skipped)

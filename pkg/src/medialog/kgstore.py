"""Typed knowledge graph store: triplet ingestion, entity linking, n-hop subgraphs."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from . import _kernels

CO_MENTION = "co_mention"
SELF_LOOP = "self_loop"


class TripletParseError(ValueError):
    pass


class GraphValidationError(ValueError):
    pass


class EntityType(str, enum.Enum):
    DISEASE = "disease"
    SYMPTOM = "symptom"
    MEDICINE = "medicine"
    TREATMENT = "treatment"


@dataclass(frozen=True)
class Triplet:
    head: str
    relation: str
    tail: str
    head_type: EntityType
    tail_type: EntityType

    def __post_init__(self):
        for name in (self.head, self.relation, self.tail):
            if not name:
                raise GraphValidationError("triplet fields must be non-empty")


def load_triplets(source: IO[str], format: str = "tsv") -> list[Triplet]:
    """Parse a triplet TSV stream: head, relation, tail, head_type, tail_type.

    Lines starting with '#' and blank lines are skipped. Duplicate rows are
    dropped (first occurrence wins, input order preserved).
    """
    if format != "tsv":
        raise ValueError(f"unsupported triplet format: {format!r}")
    out: list[Triplet] = []
    seen: set[tuple] = set()
    for lineno, raw in enumerate(source, start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise TripletParseError(
                f"line {lineno}: expected 5 tab-separated fields, got {len(fields)}"
            )
        head, relation, tail, head_type, tail_type = (f.strip() for f in fields)
        try:
            ht = EntityType(head_type)
            tt = EntityType(tail_type)
        except ValueError as exc:
            raise GraphValidationError(f"line {lineno}: {exc}") from None
        trip = Triplet(head, relation, tail, ht, tt)
        key = (head, relation, tail, ht, tt)
        if key not in seen:
            seen.add(key)
            out.append(trip)
    return out


class KnowledgeGraph:
    """Immutable global graph over typed entities.

    Triplets sharing an entity name (case-folded) share a node. Node and
    relation ids are assigned in first-seen order; `co_mention` and
    `self_loop` relations are always registered so downstream graph encoders
    can size their relation tables from any graph.
    """

    def __init__(self, triplets: Iterable[Triplet] = ()):
        self.entity_names: list[str] = []
        self.entity_types: list[EntityType] = []
        self._entity_by_key: dict[str, int] = {}
        self.relation_names: list[str] = []
        self._relation_by_name: dict[str, int] = {}
        self.edges: list[tuple[int, int, int]] = []
        self._edge_set: set[tuple[int, int, int]] = set()
        self.adjacency: dict[int, list[int]] = {}

        for rel in (CO_MENTION, SELF_LOOP):
            self._intern_relation(rel)
        for trip in triplets:
            self._add_triplet(trip)
        self._freeze_caches()

    # -- construction -----------------------------------------------------

    def _intern_entity(self, name: str, etype: EntityType) -> int:
        key = name.casefold()
        eid = self._entity_by_key.get(key)
        if eid is None:
            eid = len(self.entity_names)
            self._entity_by_key[key] = eid
            self.entity_names.append(name)
            self.entity_types.append(etype)
            self.adjacency[eid] = []
        elif self.entity_types[eid] != etype:
            raise GraphValidationError(
                f"entity {name!r} declared as both "
                f"{self.entity_types[eid].value!r} and {etype.value!r}"
            )
        return eid

    def _intern_relation(self, name: str) -> int:
        rid = self._relation_by_name.get(name)
        if rid is None:
            rid = len(self.relation_names)
            self._relation_by_name[name] = rid
            self.relation_names.append(name)
        return rid

    def _add_triplet(self, trip: Triplet) -> None:
        h = self._intern_entity(trip.head, trip.head_type)
        t = self._intern_entity(trip.tail, trip.tail_type)
        r = self._intern_relation(trip.relation)
        edge = (h, r, t)
        if edge not in self._edge_set:
            self._edge_set.add(edge)
            idx = len(self.edges)
            self.edges.append(edge)
            self.adjacency[h].append(idx)
            if t != h:
                self.adjacency[t].append(idx)

    def _freeze_caches(self) -> None:
        n = len(self.entity_names)
        und: list[list[int]] = [[] for _ in range(n)]
        for h, _r, t in self.edges:
            und[h].append(t)
            if t != h:
                und[t].append(h)
        indptr = np.zeros(n + 1, dtype=np.int64)
        for i, nb in enumerate(und):
            indptr[i + 1] = indptr[i] + len(nb)
        indices = np.empty(int(indptr[-1]), dtype=np.int64)
        for i, nb in enumerate(und):
            indices[indptr[i]:indptr[i + 1]] = nb
        self._und_indptr, self._und_indices = indptr, indices

        out: list[list[int]] = [[] for _ in range(n)]
        for h, _r, t in self.edges:
            out[h].append(t)
        dptr = np.zeros(n + 1, dtype=np.int64)
        for i, nb in enumerate(out):
            dptr[i + 1] = dptr[i] + len(nb)
        didx = np.empty(int(dptr[-1]), dtype=np.int64)
        for i, nb in enumerate(out):
            didx[dptr[i]:dptr[i + 1]] = nb
        self._dir_indptr, self._dir_indices = dptr, didx
        self._build_matcher()

    def _build_matcher(self) -> None:
        # Flattened name patterns grouped by first token for the scan kernel.
        tid_of: dict[str, int] = {}
        patterns: list[tuple[int, tuple[int, ...], int]] = []  # (first, tids, eid)
        for eid, name in enumerate(self.entity_names):
            toks = name.casefold().split()
            tids = tuple(tid_of.setdefault(t, len(tid_of)) for t in toks)
            patterns.append((tids[0], tids, eid))
        self._match_tid_of = tid_of
        patterns.sort(key=lambda p: (p[0], -len(p[1])))
        flat: list[int] = []
        starts, lens, owners, firsts, g_start, g_end = [], [], [], [], [], []
        for first, tids, eid in patterns:
            if not firsts or firsts[-1] != first:
                if firsts:
                    g_end.append(len(starts))
                firsts.append(first)
                g_start.append(len(starts))
            starts.append(len(flat))
            lens.append(len(tids))
            owners.append(eid)
            flat.extend(tids)
        if firsts:
            g_end.append(len(starts))
        as_arr = lambda x: np.asarray(x, dtype=np.int64)
        self._match_tables = tuple(
            as_arr(x) for x in (flat, starts, lens, owners, firsts, g_start, g_end)
        )

    # -- queries -----------------------------------------------------------

    def __len__(self) -> int:
        return len(self.entity_names)

    def entity_id(self, name: str) -> int:
        try:
            return self._entity_by_key[name.casefold()]
        except KeyError:
            raise KeyError(f"unknown entity: {name!r}") from None

    def has_entity(self, name: str) -> bool:
        return name.casefold() in self._entity_by_key

    def entity_type(self, eid: int) -> EntityType:
        return self.entity_types[eid]

    def relation_id(self, name: str) -> int:
        return self._relation_by_name[name]

    def entities_of_type(self, etype: EntityType) -> list[int]:
        return [i for i, t in enumerate(self.entity_types) if t == etype]

    def neighbors(self, eid: int, relation: str | None = None) -> list[int]:
        """Out-neighbors of `eid`, optionally restricted to one relation."""
        rid = None if relation is None else self._relation_by_name.get(relation, -1)
        out = []
        for idx in self.adjacency[eid]:
            h, r, t = self.edges[idx]
            if h == eid and (rid is None or r == rid):
                out.append(t)
        return out

    def in_neighbors(self, eid: int, relation: str | None = None) -> list[int]:
        rid = None if relation is None else self._relation_by_name.get(relation, -1)
        out = []
        for idx in self.adjacency[eid]:
            h, r, t = self.edges[idx]
            if t == eid and (rid is None or r == rid):
                out.append(h)
        return out

    # -- serialization -----------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "entities": [
                {"name": n, "type": t.value}
                for n, t in zip(self.entity_names, self.entity_types)
            ],
            "relations": self.relation_names,
            "edges": self.edges,
        }
        return json.dumps(doc, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "KnowledgeGraph":
        doc = json.loads(text)
        kg = cls()
        for ent in doc["entities"]:
            kg._intern_entity(ent["name"], EntityType(ent["type"]))
        for rel in doc["relations"]:
            kg._intern_relation(rel)
        for h, r, t in doc["edges"]:
            edge = (h, r, t)
            kg._edge_set.add(edge)
            idx = len(kg.edges)
            kg.edges.append(edge)
            kg.adjacency[h].append(idx)
            if t != h:
                kg.adjacency[t].append(idx)
        kg._freeze_caches()
        return kg


def build_global_graph(triplets: Iterable[Triplet]) -> KnowledgeGraph:
    """Link triplets into the global graph (shared entity names share a node)."""
    return KnowledgeGraph(triplets)


def link_entities(tokens: Sequence[str], kg: KnowledgeGraph) -> set[int]:
    """Ids of entities whose full name matches a contiguous token window.

    Matching is case-folded; overlaps resolve left-to-right with the longest
    name winning. A single token equal to a full multi-word name also counts.
    """
    if not tokens or len(kg) == 0:
        return set()
    tid_of = kg._match_tid_of
    ids = np.fromiter(
        (tid_of.get(t.casefold(), -1) for t in tokens), dtype=np.int64, count=len(tokens)
    )
    hits = _kernels.match_spans(ids, *kg._match_tables)
    found = set(int(e) for e in hits)
    # Multi-word names may also surface as one merged token ("night sweats").
    for t in tokens:
        key = t.casefold()
        if " " in key and key in kg._entity_by_key:
            found.add(kg._entity_by_key[key])
    return found


@dataclass(frozen=True)
class LocalSubgraph:
    """n-hop neighborhood of a seed set, with seeds joined by co-mention edges.

    `nodes` is sorted by entity id; that order fixes the row order of any
    embedding matrix computed over the subgraph.
    """

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int, int], ...]
    seeds: frozenset[int]
    hop_limit: int

    @property
    def is_empty(self) -> bool:
        return not self.nodes


def extract_subgraph(
    kg: KnowledgeGraph,
    seeds: Iterable[int],
    hops: int,
    directed_hops: bool = False,
) -> LocalSubgraph:
    """All entities within `hops` hops of any seed, plus the edges among them.

    Hop counting is undirected by default. Every unordered seed pair gets a
    synthetic `co_mention` edge so the result stays connected across seeds.
    Empty seeds give the empty subgraph.
    """
    if hops < 0:
        raise ValueError("hops must be >= 0")
    seed_set = {int(s) for s in seeds}
    for s in seed_set:
        if not 0 <= s < len(kg):
            raise KeyError(f"seed id {s} not in graph")
    if not seed_set:
        return LocalSubgraph((), (), frozenset(), hops)
    if directed_hops:
        indptr, indices = kg._dir_indptr, kg._dir_indices
    else:
        indptr, indices = kg._und_indptr, kg._und_indices
    nodes = _kernels.reachable_within(
        indptr, indices, np.asarray(sorted(seed_set), dtype=np.int64), hops
    )
    node_set = set(int(v) for v in nodes)
    edges = [e for e in kg.edges if e[0] in node_set and e[2] in node_set]
    co = kg.relation_id(CO_MENTION)
    ordered_seeds = sorted(seed_set)
    for i, a in enumerate(ordered_seeds):
        for b in ordered_seeds[i + 1:]:
            edges.append((a, co, b))
    return LocalSubgraph(
        nodes=tuple(int(v) for v in nodes),
        edges=tuple(edges),
        seeds=frozenset(seed_set),
        hop_limit=hops,
    )

"""Triple and rule data: vocabularies, splits, file formats, synthetic family graphs.

File formats (UTF-8, no header):
  triples:  ``<head>\\t<relation>\\t<tail>``              one per line
  rules:    ``<kind>\\t<rel1>[\\t<rel2>[\\t<rel3>]]\\t<confidence>``
Composition reads as rel1 o rel2 => rel3, i.e. (h,rel1,t) and (t,rel2,s) => (h,rel3,s).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")

RULE_ARITY = {
    "equivalence": 2,
    "implication": 2,
    "symmetric": 1,
    "antisymmetric": 1,
    "inverse": 2,
    "transitive": 1,
    "composition": 3,
    "negation": 2,
    "reflexive": 1,
    "irreflexive": 1,
}

RULE_KINDS = tuple(RULE_ARITY)

FAMILY_RELATIONS = ("spouse", "parentOf", "childOf", "grandparentOf", "siblingOf")
ENTAILMENT_RELATIONS = ("caresFor", "wedTo")


class DataError(Exception):
    """Malformed input file or data inconsistent with the graph."""


@dataclass(frozen=True, order=True)
class Triple:
    head: int
    relation: int
    tail: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.head, self.relation, self.tail)


@dataclass(frozen=True)
class Rule:
    """A relation-level constraint with a confidence weight in [0, 1]."""

    kind: str
    relations: tuple[int, ...]
    confidence: float = 1.0

    def __post_init__(self):
        if self.kind not in RULE_ARITY:
            raise ValueError(f"unknown rule kind {self.kind!r}")
        arity = RULE_ARITY[self.kind]
        if len(self.relations) != arity:
            raise ValueError(
                f"{self.kind} rule takes {arity} relation(s), got {len(self.relations)}"
            )
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"rule confidence must lie in [0, 1], got {self.confidence}")


class Vocabulary:
    """Dense, injective string <-> id interning table (ids contiguous from 0)."""

    __slots__ = ("names", "_ids")

    def __init__(self):
        self.names: list[str] = []
        self._ids: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def intern(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self.names)
            self._ids[name] = idx
            self.names.append(name)
        return idx

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise KeyError(f"unknown name {name!r}") from None

    def name(self, idx: int) -> str:
        return self.names[idx]


class KnowledgeGraph:
    """Interned entity/relation vocabularies plus train/valid/test triples and indexes.

    Mutable while loading; treat as read-only afterwards (all query methods are
    then safe for concurrent readers).
    """

    def __init__(self):
        self.entities = Vocabulary()
        self.relations = Vocabulary()
        self.splits: dict[str, list[Triple]] = {s: [] for s in SPLITS}
        self._split_sets: dict[str, set[tuple[int, int, int]]] = {s: set() for s in SPLITS}
        self._adjacency: dict[int, list[tuple[int, int]]] = {}
        self._head_index: dict[int, dict[int, list[int]]] = {}
        self._filter_tails: dict[tuple[int, int], set[int]] | None = None
        self._filter_heads: dict[tuple[int, int], set[int]] | None = None

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def triples(self, split: str) -> list[Triple]:
        return self.splits[split]

    def add(self, split: str, triple: Triple) -> bool:
        """Append a triple to a split; returns False (and skips) on duplicate."""
        key = triple.as_tuple()
        if key in self._split_sets[split]:
            return False
        self.splits[split].append(triple)
        self._split_sets[split].add(key)
        if split == "train":
            self._adjacency.setdefault(triple.relation, []).append((triple.head, triple.tail))
            self._head_index.pop(triple.relation, None)
        self._filter_tails = None
        self._filter_heads = None
        return True

    def contains(self, head: int, relation: int, tail: int, split: str | None = None) -> bool:
        key = (head, relation, tail)
        if split is not None:
            return key in self._split_sets[split]
        return any(key in s for s in self._split_sets.values())

    def adjacency(self, relation: int) -> list[tuple[int, int]]:
        """Train-split (head, tail) pairs for one relation, in insertion order."""
        return self._adjacency.get(relation, [])

    def head_index(self, relation: int) -> dict[int, list[int]]:
        """Train-split head -> tails map for one relation (cached)."""
        idx = self._head_index.get(relation)
        if idx is None:
            idx = {}
            for h, t in self.adjacency(relation):
                idx.setdefault(h, []).append(t)
            self._head_index[relation] = idx
        return idx

    def _build_filters(self) -> None:
        tails: dict[tuple[int, int], set[int]] = {}
        heads: dict[tuple[int, int], set[int]] = {}
        for split in SPLITS:
            for t in self.splits[split]:
                tails.setdefault((t.head, t.relation), set()).add(t.tail)
                heads.setdefault((t.relation, t.tail), set()).add(t.head)
        self._filter_tails = tails
        self._filter_heads = heads

    def known_tails(self, head: int, relation: int) -> set[int]:
        """Tails t with (head, relation, t) present in any split."""
        if self._filter_tails is None:
            self._build_filters()
        return self._filter_tails.get((head, relation), set())

    def known_heads(self, relation: int, tail: int) -> set[int]:
        """Heads h with (h, relation, tail) present in any split."""
        if self._filter_heads is None:
            self._build_filters()
        return self._filter_heads.get((relation, tail), set())


@dataclass
class LoadReport:
    """What a triple-file load did to the graph."""

    split: str
    added: int = 0
    duplicates: int = 0
    new_entities: int = 0
    new_relations: int = 0
    unseen_entities: list[str] = field(default_factory=list)


def load_triples(
    path,
    graph: KnowledgeGraph,
    split: str,
    *,
    on_duplicate: str = "dedupe",
) -> LoadReport:
    """Load tab-separated triples from ``path`` into one split of ``graph``.

    Entities and relations are interned as encountered; entities first seen
    outside the train split are recorded in the report.  Duplicates within the
    split are dropped with a warning (``on_duplicate="dedupe"``) or rejected
    (``on_duplicate="error"``).
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if on_duplicate not in ("dedupe", "error"):
        raise ValueError(f"unknown duplicate policy {on_duplicate!r}")
    report = LoadReport(split=split)
    try:
        handle = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with handle:
        for lineno, line in enumerate(handle, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            head_name, rel_name, tail_name = fields
            if rel_name not in graph.relations:
                report.new_relations += 1
            ids = []
            for name in (head_name, tail_name):
                if name not in graph.entities:
                    report.new_entities += 1
                    if split != "train":
                        report.unseen_entities.append(name)
                ids.append(graph.entities.intern(name))
            triple = Triple(ids[0], graph.relations.intern(rel_name), ids[1])
            if graph.add(split, triple):
                report.added += 1
            else:
                if on_duplicate == "error":
                    raise DataError(f"{path}:{lineno}: duplicate triple in split {split!r}")
                report.duplicates += 1
    if report.duplicates:
        log.warning("%s: dropped %d duplicate triple(s) in split %s", path, report.duplicates, split)
    if report.unseen_entities:
        log.warning(
            "%s: %d entit(ies) first seen in split %s", path, len(report.unseen_entities), split
        )
    return report


def write_triples(path, graph: KnowledgeGraph, split: str) -> None:
    with open(path, "w", encoding="utf-8") as out:
        for t in graph.triples(split):
            out.write(
                f"{graph.entities.name(t.head)}\t"
                f"{graph.relations.name(t.relation)}\t"
                f"{graph.entities.name(t.tail)}\n"
            )


def load_rules(path, graph: KnowledgeGraph, min_confidence: float = 0.0) -> tuple[list[Rule], int]:
    """Parse a rule file; returns (rules, skipped) where skipped counts rules
    referencing relations absent from the graph vocabulary.

    Rules with confidence below ``min_confidence`` are silently filtered.
    """
    rules: list[Rule] = []
    skipped = 0
    try:
        handle = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with handle:
        for lineno, line in enumerate(handle, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise DataError(f"{path}:{lineno}: expected at least 3 fields, got {len(fields)}")
            kind = fields[0]
            if kind not in RULE_ARITY:
                raise DataError(f"{path}:{lineno}: unknown rule kind {kind!r}")
            rel_names = fields[1:-1]
            if len(rel_names) != RULE_ARITY[kind]:
                raise DataError(
                    f"{path}:{lineno}: {kind} rule takes {RULE_ARITY[kind]} relation(s), "
                    f"got {len(rel_names)}"
                )
            try:
                confidence = float(fields[-1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad confidence {fields[-1]!r}") from None
            if not 0.0 <= confidence <= 1.0:
                raise DataError(f"{path}:{lineno}: confidence {confidence} outside [0, 1]")
            unknown = [n for n in rel_names if n not in graph.relations]
            if unknown:
                skipped += 1
                log.warning("%s:%d: skipping rule with unknown relation(s) %s", path, lineno, unknown)
                continue
            if confidence < min_confidence:
                continue
            rules.append(Rule(kind, tuple(graph.relations.id(n) for n in rel_names), confidence))
    return rules, skipped


def write_rules(path, graph: KnowledgeGraph, rules: list[Rule]) -> None:
    with open(path, "w", encoding="utf-8") as out:
        for rule in rules:
            names = "\t".join(graph.relations.name(r) for r in rule.relations)
            out.write(f"{rule.kind}\t{names}\t{rule.confidence:g}\n")


def generate_family_kg(
    num_families: int,
    seed: int,
    *,
    holdout_fraction: float = 0.3,
    entailment_pairs: bool = False,
) -> tuple[KnowledgeGraph, list[Rule]]:
    """Deterministic synthetic kinship graph whose splits obey the emitted rules.

    Each family has two parents and two children; the first child of family i
    marries into family i+1, so grandparent facts appear from two families on.
    Base facts always land in train; ``holdout_fraction`` of the rule-derived
    facts are held out, alternating into valid and test.

    With ``entailment_pairs`` two extra relations are added so that implication
    and equivalence rules have true instances: caresFor (parentOf implies
    caresFor, plus spouses care for each other) and wedTo (equivalent to
    spouse).
    """
    if num_families < 1:
        raise ValueError("num_families must be >= 1")
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie in [0, 1)")

    graph = KnowledgeGraph()
    rel_names = FAMILY_RELATIONS + (ENTAILMENT_RELATIONS if entailment_pairs else ())
    rel = {name: graph.relations.intern(name) for name in rel_names}

    base: list[Triple] = []
    derived: list[Triple] = []

    def fact(bucket, rel_id, head, tail):
        t = Triple(head, rel_id, tail)
        if t not in seen:
            seen.add(t)
            bucket.append(t)

    seen: set[Triple] = set()
    prev_first_child = None
    for i in range(num_families):
        if prev_first_child is None:
            mother = graph.entities.intern(f"f{i}_mother")
        else:
            mother = prev_first_child
        father = graph.entities.intern(f"f{i}_father")
        children = [graph.entities.intern(f"f{i}_child{j}") for j in range(2)]
        prev_first_child = children[0]

        fact(base, rel["spouse"], mother, father)
        fact(derived, rel["spouse"], father, mother)
        fact(base, rel["siblingOf"], children[0], children[1])
        fact(derived, rel["siblingOf"], children[1], children[0])
        for parent in (mother, father):
            for child in children:
                fact(base, rel["parentOf"], parent, child)
                fact(derived, rel["childOf"], child, parent)
        if entailment_pairs:
            fact(base, rel["caresFor"], mother, father)
            fact(base, rel["caresFor"], father, mother)

    # Grandparents: both parents of a mother who married in from family i-1.
    parent_pairs = [(t.head, t.tail) for t in base if t.relation == rel["parentOf"]]
    children_of = {}
    for p, c in parent_pairs:
        children_of.setdefault(p, []).append(c)
    for grandparent, middle in parent_pairs:
        for grandchild in children_of.get(middle, []):
            fact(derived, rel["grandparentOf"], grandparent, grandchild)

    if entailment_pairs:
        for t in base + derived:
            if t.relation == rel["parentOf"]:
                fact(derived, rel["caresFor"], t.head, t.tail)
            if t.relation == rel["spouse"]:
                fact(derived, rel["wedTo"], t.head, t.tail)

    rng = np.random.default_rng(seed)
    n_hold = int(holdout_fraction * len(derived))
    held = rng.permutation(len(derived))[:n_hold]
    to_valid = {int(i) for pos, i in enumerate(held) if pos % 2 == 0}
    to_test = {int(i) for pos, i in enumerate(held) if pos % 2 == 1}

    for t in base:
        graph.add("train", t)
    for i, t in enumerate(derived):
        if i in to_valid:
            graph.add("valid", t)
        elif i in to_test:
            graph.add("test", t)
        else:
            graph.add("train", t)

    rules = [
        Rule("symmetric", (rel["spouse"],), 1.0),
        Rule("symmetric", (rel["siblingOf"],), 1.0),
        Rule("inverse", (rel["parentOf"], rel["childOf"]), 1.0),
        Rule("composition", (rel["parentOf"], rel["parentOf"], rel["grandparentOf"]), 1.0),
        Rule("irreflexive", (rel["parentOf"],), 1.0),
    ]
    if entailment_pairs:
        rules.append(Rule("implication", (rel["parentOf"], rel["caresFor"]), 1.0))
        rules.append(Rule("equivalence", (rel["spouse"], rel["wedTo"]), 1.0))
    return graph, rules

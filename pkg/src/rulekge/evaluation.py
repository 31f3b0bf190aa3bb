"""Link-prediction ranking under raw and filtered protocols, metric
aggregation, and rule-satisfaction diagnostics.

Everything here is a pure read over the parameters and graph; queries are
independent and aggregation uses a fixed order, so results do not depend on
how the work is scheduled."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import KnowledgeGraph, Rule, Triple
from .model import ModelParameters, score_all_heads, score_all_tails
from .rules import (
    GROUNDING_FREE_KINDS,
    DeltaStat,
    PenaltyReport,
    SlackConfig,
    delta_statistics,
    ground_rule,
    penalty,
    penalty_grounding_free,
)

SIDES = ("head", "tail")
PROTOCOLS = ("raw", "filtered")


@dataclass
class QueryRank:
    triple: Triple
    side: str
    raw: float
    filtered: float


@dataclass
class RankingReport:
    """Per-query ranks plus aggregate MR/MRR/Hits@k in both protocols."""

    queries: list[QueryRank] = field(default_factory=list)
    hits_at: tuple[int, ...] = (1, 3, 10)

    def ranks(self, protocol: str) -> list[float]:
        if protocol == "raw":
            return [q.raw for q in self.queries]
        if protocol == "filtered":
            return [q.filtered for q in self.queries]
        raise ValueError(f"unknown protocol {protocol!r}")

    def aggregates(self) -> dict:
        return {p: aggregate_ranks(self.ranks(p), self.hits_at) for p in PROTOCOLS}


def _rank_from_scores(scores: np.ndarray, true_index: int, allowed: np.ndarray, tie_break: str) -> float:
    """Rank of the true candidate among the allowed ones.

    ``allowed`` is a boolean mask that always includes the true index.  Ties
    are broken by the average position of the tie block, or pessimistically by
    its last position.
    """
    true_score = scores[true_index]
    others = allowed.copy()
    others[true_index] = False
    higher = int(np.count_nonzero(scores[others] > true_score))
    ties = 1 + int(np.count_nonzero(scores[others] == true_score))
    if tie_break == "average":
        return higher + (ties + 1) / 2
    if tie_break == "pessimistic":
        return float(higher + ties)
    raise ValueError(f"unknown tie break {tie_break!r}")


def _candidate_scores(params, graph, triple: Triple, side: str):
    if side == "tail":
        scores = score_all_tails(params, triple.head, triple.relation)
        known = graph.known_tails(triple.head, triple.relation)
        true_index = triple.tail
    elif side == "head":
        scores = score_all_heads(params, triple.relation, triple.tail)
        known = graph.known_heads(triple.relation, triple.tail)
        true_index = triple.head
    else:
        raise ValueError(f"unknown side {side!r}")
    return scores, known, true_index


def rank_triple(
    params: ModelParameters,
    graph: KnowledgeGraph,
    triple: Triple,
    side: str,
    protocol: str = "filtered",
    tie_break: str = "average",
) -> float:
    """Rank of the true entity when the chosen side of ``triple`` is predicted.

    The filtered protocol removes candidates that form triples present in any
    split, other than the query's own entity.
    """
    scores, known, true_index = _candidate_scores(params, graph, triple, side)
    allowed = np.ones(len(scores), dtype=bool)
    if protocol == "filtered":
        for e in known:
            allowed[e] = False
        allowed[true_index] = True
    elif protocol != "raw":
        raise ValueError(f"unknown protocol {protocol!r}")
    return _rank_from_scores(scores, true_index, allowed, tie_break)


def evaluate_split(
    params: ModelParameters,
    graph: KnowledgeGraph,
    split: str = "test",
    hits_at: tuple[int, ...] = (1, 3, 10),
    tie_break: str = "average",
) -> RankingReport:
    """Rank both sides of every triple in ``split`` under both protocols."""
    report = RankingReport(hits_at=tuple(hits_at))
    for triple in graph.triples(split):
        for side in SIDES:
            scores, known, true_index = _candidate_scores(params, graph, triple, side)
            allowed = np.ones(len(scores), dtype=bool)
            raw = _rank_from_scores(scores, true_index, allowed, tie_break)
            for e in known:
                allowed[e] = False
            allowed[true_index] = True
            filtered = _rank_from_scores(scores, true_index, allowed, tie_break)
            report.queries.append(QueryRank(triple, side, raw, filtered))
    return report


def aggregate_ranks(ranks, hits_at=(1, 3, 10)) -> dict:
    """MR, MRR and Hits@k over a pooled list of ranks."""
    if not len(ranks):
        raise ValueError("no ranks to aggregate")
    ranks = np.asarray(ranks, dtype=np.float64)
    out = {"MR": float(np.mean(ranks)), "MRR": float(np.mean(1.0 / ranks))}
    for k in hits_at:
        out[f"Hits@{k}"] = float(np.mean(ranks <= k))
    return out


def format_metrics(aggregates: dict) -> str:
    """Tab-separated ``metric\\tprotocol\\tvalue`` lines, raw then filtered."""
    lines = []
    for protocol in PROTOCOLS:
        metrics = aggregates.get(protocol)
        if metrics is None:
            continue
        for name, value in metrics.items():
            lines.append(f"{name}\t{protocol}\t{value:.6f}")
    return "\n".join(lines) + "\n"


def write_query_dump(report: RankingReport, graph: KnowledgeGraph, path) -> None:
    """Per-query dump: ``head\\trel\\ttail\\tside\\traw\\tfiltered``."""
    with open(path, "w", encoding="utf-8") as out:
        for q in report.queries:
            out.write(
                f"{graph.entities.name(q.triple.head)}\t"
                f"{graph.relations.name(q.triple.relation)}\t"
                f"{graph.entities.name(q.triple.tail)}\t"
                f"{q.side}\t{q.raw:g}\t{q.filtered:g}\n"
            )


def rule_satisfaction_report(
    params: ModelParameters,
    graph: KnowledgeGraph,
    rules: list[Rule],
    slack_config: SlackConfig | None = None,
    *,
    max_groundings: int | None = None,
    rng: np.random.Generator | None = None,
) -> PenaltyReport:
    """Evaluate every rule's penalty at slack 0 over its groundings.

    Groundings are exhaustive unless ``max_groundings`` caps them, in which
    case a uniform sample is scored and the evaluated count recorded.  When a
    ``slack_config`` is given the sums at those margins are reported alongside
    the slack-0 ones.  For implication/equivalence rules the grounding-free
    penalties and the relation-difference statistics are reported as well (the
    latter feed the diagnostics scatter plot).
    """
    penalties: dict[str, float] = {}
    at_slack: dict[str, float] = {}
    counts: dict[str, int] = {}
    evaluated: dict[str, int] = {}
    free: dict[str, float] = {}
    pairs = []
    rng = rng if rng is not None else np.random.default_rng(0)
    for rule in rules:
        groundings = ground_rule(rule, graph, grounding_free=False)
        counts[rule.kind] = counts.get(rule.kind, 0) + len(groundings)
        if max_groundings is not None and len(groundings) > max_groundings:
            pick = rng.choice(len(groundings), size=max_groundings, replace=False)
            groundings = [groundings[int(i)] for i in pick]
        evaluated[rule.kind] = evaluated.get(rule.kind, 0) + len(groundings)
        value, _ = penalty(rule.kind, params, groundings, 0.0, scale=0.0)
        penalties[rule.kind] = penalties.get(rule.kind, 0.0) + value
        if slack_config is not None:
            margin_value, _ = penalty(
                rule.kind, params, groundings, slack_config.get(rule.kind), scale=0.0
            )
            at_slack[rule.kind] = at_slack.get(rule.kind, 0.0) + margin_value
        if rule.kind in GROUNDING_FREE_KINDS:
            r1, r2 = rule.relations
            pairs.append((rule.kind, r1, r2))
            if params.activations[-1] == "relu":
                gf_value, _ = penalty_grounding_free(rule.kind, params, r1, r2, 0.0, scale=0.0)
                free[rule.kind] = free.get(rule.kind, 0.0) + gf_value
    stats: list[DeltaStat] = delta_statistics(params, pairs)
    return PenaltyReport(
        penalties, counts, evaluated, free, stats,
        penalties_at_slack=at_slack if slack_config is not None else None,
    )


def write_penalty_report(report: PenaltyReport, graph: KnowledgeGraph, path) -> None:
    """Penalty table: ``kind\\tgroundings\\tevaluated\\traw_penalty\\tgrounding_free``."""
    with open(path, "w", encoding="utf-8") as out:
        out.write("kind\tgroundings\tevaluated\traw_penalty\tgrounding_free\n")
        for kind in sorted(report.penalties):
            gf = report.grounding_free_penalties.get(kind)
            out.write(
                f"{kind}\t{report.grounding_counts[kind]}\t{report.evaluated_counts[kind]}\t"
                f"{report.penalties[kind]:.10g}\t{'' if gf is None else f'{gf:.10g}'}\n"
            )


def write_delta_table(stats: list, graph: KnowledgeGraph, path) -> None:
    """Delta table: ``pair_id\\tkind\\tmean\\tvariance`` for external plotting."""
    with open(path, "w", encoding="utf-8") as out:
        for s in stats:
            pair_id = f"{graph.relations.name(s.relation_a)}->{graph.relations.name(s.relation_b)}"
            out.write(f"{pair_id}\t{s.kind}\t{s.mean:.10g}\t{s.variance:.10g}\n")

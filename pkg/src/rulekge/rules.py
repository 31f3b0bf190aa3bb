"""Grounding rules against the training graph and turning them into
differentiable penalty terms.

Every penalty is a hinge on the violation of the rule's score-level condition,
so it is nonnegative and exactly zero when the condition holds within the
slack margin.  Implication and equivalence additionally have grounding-free
forms expressed purely on the two relation output rows, valid whenever the
final hidden activation is nonnegative.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .data import KnowledgeGraph, Rule, Triple, RULE_KINDS
from .model import Gradients, ModelParameters, backprop_scores, score_batch, sigmoid

GROUNDING_FREE_KINDS = ("implication", "equivalence")


class ConfigurationError(Exception):
    """Model/penalty combination that violates a precondition."""


@dataclass(frozen=True)
class Grounding:
    """A rule instantiated with concrete entities.

    All premise triples are observed in the train split and the conclusion
    triple is not.
    """

    rule: Rule
    bindings: tuple[int, ...]
    premises: tuple[Triple, ...]
    conclusion: Triple


@dataclass
class SlackConfig:
    """Nonnegative margin per rule kind, absorbed before a penalty activates."""

    equivalence: float = 0.0
    implication: float = 0.0
    symmetric: float = 0.0
    antisymmetric: float = 0.0
    inverse: float = 0.0
    transitive: float = 0.0
    composition: float = 0.0
    negation: float = 0.0
    reflexive: float = 0.0
    irreflexive: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"slack {f.name} must be nonnegative")

    def get(self, kind: str) -> float:
        return getattr(self, kind)

    @classmethod
    def from_mapping(cls, mapping) -> "SlackConfig":
        unknown = set(mapping) - set(RULE_KINDS)
        if unknown:
            raise ValueError(f"unknown rule kind(s) in slack mapping: {sorted(unknown)}")
        return cls(**mapping)


@dataclass
class DeltaStat:
    """Moments of the difference of two relation output rows."""

    kind: str
    relation_a: int
    relation_b: int
    mean: float
    variance: float


@dataclass
class PenaltyReport:
    """Rule-satisfaction diagnostics over a graph and model."""

    penalties: dict  # kind -> raw hinge sum at slack 0
    grounding_counts: dict  # kind -> total groundings found
    evaluated_counts: dict  # kind -> groundings actually scored (<= total if sampled)
    grounding_free_penalties: dict  # kind -> raw sum over relation rows (implication/equivalence)
    delta_stats: list  # DeltaStat per implication/equivalence rule
    penalties_at_slack: dict | None = None  # same sums at the configured margins


def ground_rule(rule: Rule, graph: KnowledgeGraph, *, grounding_free: bool = True) -> list:
    """Enumerate valid groundings of ``rule`` over the train split.

    A grounding is valid when its premises are observed train triples and its
    conclusion triple is not.  Implication and equivalence return no
    groundings in grounding-free mode (the default), since their penalties
    then live on the relation rows instead.
    """
    for r in rule.relations:
        if not 0 <= r < graph.num_relations:
            raise ValueError(f"rule relation id {r} out of range")
    kind = rule.kind
    out: list[Grounding] = []

    def novel(h, r, t):
        return not graph.contains(h, r, t, "train")

    if kind in ("symmetric", "antisymmetric"):
        (r,) = rule.relations
        for h, t in graph.adjacency(r):
            if novel(t, r, h):
                out.append(Grounding(rule, (h, t), (Triple(h, r, t),), Triple(t, r, h)))
    elif kind in ("inverse", "equivalence", "implication"):
        if kind != "inverse" and grounding_free:
            return out
        r1, r2 = rule.relations

        def conclude(h, t, r_from, r_to):
            if kind == "inverse":
                return Triple(t, r_to, h)
            return Triple(h, r_to, t)

        directions = [(r1, r2)] if kind == "implication" else [(r1, r2), (r2, r1)]
        for r_from, r_to in directions:
            for h, t in graph.adjacency(r_from):
                c = conclude(h, t, r_from, r_to)
                if novel(c.head, c.relation, c.tail):
                    out.append(Grounding(rule, (h, t), (Triple(h, r_from, t),), c))
    elif kind in ("transitive", "composition"):
        if kind == "transitive":
            r1 = r2 = r3 = rule.relations[0]
        else:
            r1, r2, r3 = rule.relations
        second = graph.head_index(r2)
        for h, t in graph.adjacency(r1):
            for s in second.get(t, ()):
                if novel(h, r3, s):
                    out.append(
                        Grounding(
                            rule, (h, t, s),
                            (Triple(h, r1, t), Triple(t, r2, s)),
                            Triple(h, r3, s),
                        )
                    )
    elif kind == "negation":
        r1, r2 = rule.relations
        for h, t in graph.adjacency(r1):
            if novel(h, r2, t):
                out.append(Grounding(rule, (h, t), (Triple(h, r1, t),), Triple(h, r2, t)))
    elif kind in ("reflexive", "irreflexive"):
        (r,) = rule.relations
        entities = sorted({e for pair in graph.adjacency(r) for e in pair})
        for e in entities:
            if novel(e, r, e):
                out.append(Grounding(rule, (e, e), (), Triple(e, r, e)))
    else:  # pragma: no cover - Rule validation makes this unreachable
        raise ValueError(f"unknown rule kind {kind!r}")
    return out


def _gather_scores(params: ModelParameters, triples: list[Triple]):
    heads = np.array([t.head for t in triples], dtype=np.intp)
    rels = np.array([t.relation for t in triples], dtype=np.intp)
    tails = np.array([t.tail for t in triples], dtype=np.intp)
    scores, cache = score_batch(params, heads, rels, tails)
    return scores, cache, rels


def penalty(
    kind: str,
    params: ModelParameters,
    groundings: list,
    slack: float,
    *,
    out: Gradients | None = None,
    scale: float = 1.0,
    margins_out: list | None = None,
):
    """Raw hinge penalty over ``groundings`` plus its gradient.

    Returns (value, gradients) where value is the unscaled hinge sum; the
    gradient contribution accumulated into ``out`` is ``scale`` times the
    gradient of that sum (callers fold in confidence, normalization and the
    regularization weight through ``scale``).  ``margins_out``, when given,
    receives the per-grounding hinge arguments (finite-difference harnesses
    use them to stay clear of the kinks).
    """
    if slack < 0:
        raise ValueError("slack must be nonnegative")
    if out is None:
        out = Gradients.zeros_like(params)
    if not groundings:
        return 0.0, out
    for g in groundings:
        if g.rule.kind != kind:
            raise ValueError(f"grounding of kind {g.rule.kind!r} passed to {kind!r} penalty")

    if kind in ("transitive", "composition"):
        triples = [t for g in groundings for t in (g.premises[0], g.premises[1], g.conclusion)]
        scores, cache, rels = _gather_scores(params, triples)
        f1, f2, f3 = scores[0::3], scores[1::3], scores[2::3]
        s1, s2, s3 = sigmoid(f1), sigmoid(f2), sigmoid(f3)
        args = s1 * s2 - s3 - slack
        active = args > 0
        value = float(np.sum(args[active]))
        dscores = np.zeros_like(scores)
        dscores[0::3] = active * s1 * (1 - s1) * s2
        dscores[1::3] = active * s1 * s2 * (1 - s2)
        dscores[2::3] = active * -(s3 * (1 - s3))
    elif kind in ("reflexive", "irreflexive"):
        triples = [g.conclusion for g in groundings]
        scores, cache, rels = _gather_scores(params, triples)
        s = sigmoid(scores)
        if kind == "reflexive":
            args = 1.0 - s - slack
            dsign = -1.0
        else:
            args = s - slack
            dsign = 1.0
        active = args > 0
        value = float(np.sum(args[active]))
        dscores = active * dsign * s * (1 - s)
    else:
        triples = [t for g in groundings for t in (g.premises[0], g.conclusion)]
        scores, cache, rels = _gather_scores(params, triples)
        fp, fc = scores[0::2], scores[1::2]
        dscores = np.zeros_like(scores)
        if kind in ("equivalence", "symmetric", "inverse"):
            diff = fp - fc
            args = np.abs(diff) - slack
            active = args > 0
            sign = np.sign(diff)
            dscores[0::2] = active * sign
            dscores[1::2] = active * -sign
        elif kind == "implication":
            args = fp - fc - slack
            active = args > 0
            dscores[0::2] = active * 1.0
            dscores[1::2] = active * -1.0
        elif kind == "antisymmetric":
            sp, sc = sigmoid(fp), sigmoid(fc)
            args = sp * sc - slack
            active = args > 0
            dscores[0::2] = active * sp * (1 - sp) * sc
            dscores[1::2] = active * sp * sc * (1 - sc)
        elif kind == "negation":
            sp, sc = sigmoid(fp), sigmoid(fc)
            u = sp + sc - 1.0
            args = np.abs(u) - slack
            active = args > 0
            sign = np.sign(u)
            dscores[0::2] = active * sign * sp * (1 - sp)
            dscores[1::2] = active * sign * sc * (1 - sc)
        else:
            raise ValueError(f"unknown rule kind {kind!r}")
        value = float(np.sum(args[active]))

    if margins_out is not None:
        margins_out.append(args.copy())
    if scale != 0.0:
        backprop_scores(params, cache, rels, dscores * scale, out)
    return value, out


def check_grounding_free_supported(params: ModelParameters) -> None:
    if params.activations[-1] != "relu":
        raise ConfigurationError(
            "grounding-free penalties need a nonnegative final hidden activation (ReLU); "
            f"got {params.activations[-1]!r}"
        )


def penalty_grounding_free(
    kind: str,
    params: ModelParameters,
    relation_a: int,
    relation_b: int,
    slack: float,
    *,
    out: Gradients | None = None,
    scale: float = 1.0,
    margins_out: list | None = None,
):
    """Implication/equivalence penalty on the two relation rows alone.

    Implication penalizes coordinates of row(a) - row(b) above the slack;
    equivalence penalizes coordinates whose absolute difference exceeds it.
    Only the two relation rows receive gradient.
    """
    if kind not in GROUNDING_FREE_KINDS:
        raise ValueError(f"no grounding-free form for rule kind {kind!r}")
    if slack < 0:
        raise ValueError("slack must be nonnegative")
    check_grounding_free_supported(params)
    if out is None:
        out = Gradients.zeros_like(params)
    diff = params.relation_outputs[relation_a] - params.relation_outputs[relation_b]
    if kind == "implication":
        args = diff - slack
        active = args > 0
        value = float(np.sum(args[active]))
        grad_a = active.astype(np.float64)
    else:
        args = np.abs(diff) - slack
        active = args > 0
        value = float(np.sum(args[active]))
        grad_a = active * np.sign(diff)
    if margins_out is not None:
        margins_out.append(args.copy())
    out.relation_outputs[relation_a] += scale * grad_a
    out.relation_outputs[relation_b] -= scale * grad_a
    return value, out


def delta_statistics(params: ModelParameters, pairs) -> list:
    """Mean and variance of the elements of row(a) - row(b) per rule pair.

    ``pairs`` holds (kind, relation_a, relation_b) with kind implication or
    equivalence; the result is what the diagnostics table and scatter plot
    consume.
    """
    stats = []
    for kind, ra, rb in pairs:
        if kind not in GROUNDING_FREE_KINDS:
            raise ValueError(f"delta statistics are defined for {GROUNDING_FREE_KINDS}, got {kind!r}")
        diff = params.relation_outputs[ra] - params.relation_outputs[rb]
        mean = float(np.mean(diff))
        stats.append(DeltaStat(kind, ra, rb, mean, float(np.mean((diff - mean) ** 2))))
    return stats

"""Independent brute-force reference implementations.

Everything here re-derives its answer with plain loops and set operations so
it can cross-check the production paths; none of the grounding, scoring,
ranking or aggregation code from the other modules is reused.  These oracles
trade speed for obviousness on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import KnowledgeGraph, Rule, Triple
from .model import Gradients, ModelParameters
from .rules import Grounding


def reference_forward(params: ModelParameters, head: int, relation: int, tail: int) -> float:
    """Straight-line, loop-based forward pass of the scoring network."""
    emb = params.entity_embeddings
    x = [float(v) for v in emb[head]] + [float(v) for v in emb[tail]]
    for w, b, act in zip(params.hidden_weights, params.hidden_biases, params.activations):
        nxt = []
        for i in range(w.shape[0]):
            total = 0.0
            for j in range(w.shape[1]):
                total += float(w[i, j]) * x[j]
            total += float(b[i])
            if act == "relu":
                nxt.append(total if total > 0.0 else 0.0)
            else:
                nxt.append(1.0 / (1.0 + math.exp(-total)) if total >= 0
                           else math.exp(total) / (1.0 + math.exp(total)))
        x = nxt
    beta = params.relation_outputs[relation]
    return sum(x[i] * float(beta[i]) for i in range(len(x)))


def min_relu_preactivation(params: ModelParameters, pairs) -> float:
    """Smallest |pre-activation| over the ReLU layers for the given (h, t)
    pairs; finite-difference harnesses reject points where this is tiny."""
    gap = math.inf
    emb = params.entity_embeddings
    for head, tail in pairs:
        x = [float(v) for v in emb[head]] + [float(v) for v in emb[tail]]
        for w, b, act in zip(params.hidden_weights, params.hidden_biases, params.activations):
            nxt = []
            for i in range(w.shape[0]):
                total = float(b[i])
                for j in range(w.shape[1]):
                    total += float(w[i, j]) * x[j]
                if act == "relu":
                    gap = min(gap, abs(total))
                    nxt.append(max(total, 0.0))
                else:
                    nxt.append(1.0 / (1.0 + math.exp(-total)) if total >= 0
                               else math.exp(total) / (1.0 + math.exp(total)))
            x = nxt
    return gap


def param_arrays(params: ModelParameters) -> list:
    """Own traversal of the parameter tensors, in declared field order."""
    arrays = [params.entity_embeddings]
    for w, b in zip(params.hidden_weights, params.hidden_biases):
        arrays.append(w)
        arrays.append(b)
    arrays.append(params.relation_outputs)
    return arrays


def finite_difference_gradients(params: ModelParameters, loss_fn, epsilon: float = 1e-5) -> list:
    """Central-difference gradient estimate per parameter tensor.

    ``loss_fn()`` must evaluate the loss at the current (mutated) parameters.
    Returns arrays aligned with ``param_arrays(params)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    estimates = []
    for arr in param_arrays(params):
        est = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            saved = arr[idx]
            arr[idx] = saved + epsilon
            up = loss_fn()
            arr[idx] = saved - epsilon
            down = loss_fn()
            arr[idx] = saved
            est[idx] = (up - down) / (2 * epsilon)
            it.iternext()
        estimates.append(est)
    return estimates


def gradient_relative_error(analytic: Gradients, estimates: list, noise_floor: float = 1e-9) -> float:
    """max over parameters of |g - g_fd| / max(1e-8, |g| + |g_fd|).

    Central differences resolve nothing below ~|loss| * eps / (2 epsilon)
    (about 1e-11 here), so absolute differences under ``noise_floor`` count as
    exact agreement; otherwise structurally-zero gradients would be compared
    against pure rounding noise.
    """
    worst = 0.0
    analytic_arrays = [a for _, a in analytic.arrays()]
    for g, fd in zip(analytic_arrays, estimates):
        if g.size == 0:
            continue
        diff = np.abs(g - fd)
        diff[diff <= noise_floor] = 0.0
        denom = np.maximum(1e-8, np.abs(g) + np.abs(fd))
        worst = max(worst, float(np.max(diff / denom)))
    return worst


def brute_force_groundings(rule: Rule, graph: KnowledgeGraph) -> list:
    """Exhaustive nested-loop grounding enumeration over all entity tuples."""
    train = {t.as_tuple() for t in graph.triples("train")}
    n = graph.num_entities
    kind = rule.kind
    out = []
    if kind in ("symmetric", "antisymmetric"):
        (r,) = rule.relations
        for h in range(n):
            for t in range(n):
                if (h, r, t) in train and (t, r, h) not in train:
                    out.append(Grounding(rule, (h, t), (Triple(h, r, t),), Triple(t, r, h)))
    elif kind == "inverse":
        r1, r2 = rule.relations
        for ra, rb in ((r1, r2), (r2, r1)):
            for h in range(n):
                for t in range(n):
                    if (h, ra, t) in train and (t, rb, h) not in train:
                        out.append(Grounding(rule, (h, t), (Triple(h, ra, t),), Triple(t, rb, h)))
    elif kind in ("implication", "equivalence"):
        r1, r2 = rule.relations
        directions = ((r1, r2),) if kind == "implication" else ((r1, r2), (r2, r1))
        for ra, rb in directions:
            for h in range(n):
                for t in range(n):
                    if (h, ra, t) in train and (h, rb, t) not in train:
                        out.append(Grounding(rule, (h, t), (Triple(h, ra, t),), Triple(h, rb, t)))
    elif kind in ("transitive", "composition"):
        if kind == "transitive":
            r1 = r2 = r3 = rule.relations[0]
        else:
            r1, r2, r3 = rule.relations
        for h in range(n):
            for t in range(n):
                if (h, r1, t) not in train:
                    continue
                for s in range(n):
                    if (t, r2, s) in train and (h, r3, s) not in train:
                        out.append(
                            Grounding(rule, (h, t, s),
                                      (Triple(h, r1, t), Triple(t, r2, s)), Triple(h, r3, s))
                        )
    elif kind == "negation":
        r1, r2 = rule.relations
        for h in range(n):
            for t in range(n):
                if (h, r1, t) in train and (h, r2, t) not in train:
                    out.append(Grounding(rule, (h, t), (Triple(h, r1, t),), Triple(h, r2, t)))
    elif kind in ("reflexive", "irreflexive"):
        (r,) = rule.relations
        for e in range(n):
            appears = any(
                (h, rr, t) in train and rr == r and (h == e or t == e)
                for (h, rr, t) in train
            )
            if appears and (e, r, e) not in train:
                out.append(Grounding(rule, (e, e), (), Triple(e, r, e)))
    else:
        raise ValueError(f"unknown rule kind {kind!r}")
    return out


def reference_rank(scores, true_index: int, excluded=(), tie_break: str = "average") -> float:
    """Sort-and-search rank of the true candidate, skipping excluded indexes."""
    true_score = scores[true_index]
    pool = sorted(
        (float(s) for i, s in enumerate(scores) if i != true_index and i not in set(excluded)),
        reverse=True,
    )
    higher = 0
    ties = 0
    for s in pool:
        if s > true_score:
            higher += 1
        elif s == true_score:
            ties += 1
        else:
            break
    if tie_break == "average":
        # true occupies one of positions higher+1 .. higher+ties+1, average them
        return higher + 1 + ties / 2
    return float(higher + ties + 1)


def reference_metrics(ranks, hits_at=(1, 3, 10)) -> dict:
    """Loop-based MR/MRR/Hits@k aggregation."""
    if not ranks:
        raise ValueError("no ranks")
    total = 0.0
    reciprocal = 0.0
    hits = {k: 0 for k in hits_at}
    for r in ranks:
        total += r
        reciprocal += 1.0 / r
        for k in hits_at:
            if r <= k:
                hits[k] += 1
    n = len(ranks)
    out = {"MR": total / n, "MRR": reciprocal / n}
    for k in hits_at:
        out[f"Hits@{k}"] = hits[k] / n
    return out


def two_pass_moments(values) -> tuple[float, float]:
    """Two-pass mean and population variance."""
    values = list(values)
    n = len(values)
    mean = sum(values) / n
    return mean, sum((v - mean) ** 2 for v in values) / n


class ReferenceAdam:
    """Textbook Adam for a flat list of arrays, kept separate from the trainer."""

    def __init__(self, arrays, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.arrays = arrays
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, grads) -> None:
        self.step_count += 1
        t = self.step_count
        for i, (a, g) in enumerate(zip(self.arrays, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**t)
            v_hat = self.v[i] / (1 - self.beta2**t)
            a -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


def forward_chain(facts, rules, num_entities: int | None = None) -> set:
    """Fixpoint closure of ``facts`` under the generative rule kinds.

    ``facts`` is a set of (h, r, t) id triples.  Constraint kinds
    (antisymmetric, negation, irreflexive) derive nothing; see
    ``rule_violations`` for them.
    """
    closure = set(facts)
    changed = True
    while changed:
        changed = False
        new = set()
        for rule in rules:
            kind = rule.kind
            if kind == "symmetric":
                (r,) = rule.relations
                for h, rr, t in closure:
                    if rr == r and (t, r, h) not in closure:
                        new.add((t, r, h))
            elif kind == "inverse":
                r1, r2 = rule.relations
                for h, rr, t in closure:
                    if rr == r1 and (t, r2, h) not in closure:
                        new.add((t, r2, h))
                    if rr == r2 and (t, r1, h) not in closure:
                        new.add((t, r1, h))
            elif kind == "implication":
                r1, r2 = rule.relations
                for h, rr, t in closure:
                    if rr == r1 and (h, r2, t) not in closure:
                        new.add((h, r2, t))
            elif kind == "equivalence":
                r1, r2 = rule.relations
                for h, rr, t in closure:
                    if rr == r1 and (h, r2, t) not in closure:
                        new.add((h, r2, t))
                    if rr == r2 and (h, r1, t) not in closure:
                        new.add((h, r1, t))
            elif kind in ("transitive", "composition"):
                if kind == "transitive":
                    r1 = r2 = r3 = rule.relations[0]
                else:
                    r1, r2, r3 = rule.relations
                firsts = [(h, t) for h, rr, t in closure if rr == r1]
                seconds = {}
                for h, rr, t in closure:
                    if rr == r2:
                        seconds.setdefault(h, []).append(t)
                for h, t in firsts:
                    for s in seconds.get(t, ()):
                        if (h, r3, s) not in closure:
                            new.add((h, r3, s))
            elif kind == "reflexive":
                (r,) = rule.relations
                for h, rr, t in closure:
                    if rr == r:
                        for e in (h, t):
                            if (e, r, e) not in closure:
                                new.add((e, r, e))
        if new:
            closure |= new
            changed = True
    return closure


def rule_violations(facts, rules) -> int:
    """Count of fact pairs violating the constraint rule kinds."""
    violations = 0
    for rule in rules:
        kind = rule.kind
        if kind == "irreflexive":
            (r,) = rule.relations
            violations += sum(1 for h, rr, t in facts if rr == r and h == t)
        elif kind == "antisymmetric":
            (r,) = rule.relations
            violations += sum(
                1 for h, rr, t in facts if rr == r and (t, r, h) in facts
            )
        elif kind == "negation":
            r1, r2 = rule.relations
            violations += sum(1 for h, rr, t in facts if rr == r1 and (h, r2, t) in facts)
    return violations


def rules_hold(facts, rules) -> bool:
    """True when ``facts`` is closed under the rules and violates none."""
    return forward_chain(facts, rules) == set(facts) and rule_violations(facts, rules) == 0


@dataclass
class GroundTruthTable:
    """Complete boolean assignment over every (h, r, t) cell of a tiny KG."""

    truth: np.ndarray  # bool, shape (N_e, N_r, N_e)

    def __post_init__(self):
        if self.truth.ndim != 3 or self.truth.shape[0] != self.truth.shape[2]:
            raise ValueError("truth must have shape (N_e, N_r, N_e)")

    @property
    def num_entities(self) -> int:
        return self.truth.shape[0]

    @property
    def num_relations(self) -> int:
        return self.truth.shape[1]

    @property
    def num_true(self) -> int:
        return int(np.count_nonzero(self.truth))

    @classmethod
    def random(cls, num_entities: int, num_relations: int, density: float = 0.5,
               rng: np.random.Generator | None = None) -> "GroundTruthTable":
        rng = rng if rng is not None else np.random.default_rng()
        return cls(rng.random((num_entities, num_relations, num_entities)) < density)


@dataclass
class MemorizationResult:
    accuracy: float
    margin: float  # min positive score - max negative score
    epochs_run: int


def memorization_test(
    table: GroundTruthTable,
    *,
    embedding_dim: int = 16,
    hidden_widths: tuple[int, ...] = (64, 64),
    activation: str = "relu",
    learning_rate: float = 0.01,
    max_epochs: int = 3000,
    seed: int = 0,
    check_every: int = 25,
    stop_at_accuracy: float = 1.0,
) -> MemorizationResult:
    """Train on the full table (labels +1/-1, no sampling, full batches) and
    report classification accuracy at threshold 0 plus the score margin.

    This drives the production model and optimizer; only the harness logic
    lives here.
    """
    if table.num_entities > 20 or table.num_relations > 5:
        raise ValueError("memorization tables are capped at 20 entities / 5 relations")
    from .model import backward, init_parameters, project_entities, score_batch
    from .training import AdamState, adam_step

    rng = np.random.default_rng(seed)
    params = init_parameters(
        table.num_entities, table.num_relations, embedding_dim, hidden_widths, activation, rng
    )
    state = AdamState.zeros(params)

    n_e, n_r = table.num_entities, table.num_relations
    grid_h, grid_r, grid_t = np.meshgrid(
        np.arange(n_e), np.arange(n_r), np.arange(n_e), indexing="ij"
    )
    heads = grid_h.ravel().astype(np.intp)
    rels = grid_r.ravel().astype(np.intp)
    tails = grid_t.ravel().astype(np.intp)
    labels = np.where(table.truth.ravel(), 1.0, -1.0)
    batch = [
        (Triple(int(h), int(r), int(t)), float(y), 1.0)
        for h, r, t, y in zip(heads, rels, tails, labels)
    ]

    def measure():
        scores, _ = score_batch(params, heads, rels, tails)
        correct = np.mean((scores > 0) == (labels > 0))
        pos = scores[labels > 0]
        neg = scores[labels < 0]
        lo = float(np.min(pos)) if pos.size else float("inf")
        hi = float(np.max(neg)) if neg.size else float("-inf")
        return float(correct), lo - hi

    epochs = 0
    for epoch in range(max_epochs):
        _, grads = backward(params, batch)
        adam_step(params, grads, state, learning_rate)
        project_entities(params)
        epochs = epoch + 1
        if epochs % check_every == 0:
            accuracy, margin = measure()
            if accuracy >= stop_at_accuracy and margin > 0:
                break
    accuracy, margin = measure()
    return MemorizationResult(accuracy, margin, epochs)

"""Optimization loop: negative sampling with self-adversarial weighting, data
loss plus rule penalties, Adam updates, unit-norm projection and early
stopping on validation MRR.

One trainer owns the parameters for the duration of a run; the loop is
single-threaded with a fixed reduction order, so a fixed seed reproduces
checkpoints bit for bit."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import KnowledgeGraph, Rule, Triple
from .model import (
    Gradients,
    ModelParameters,
    backprop_scores,
    init_parameters,
    logistic_loss,
    project_entities,
    score_batch,
)
from .rules import (
    GROUNDING_FREE_KINDS,
    SlackConfig,
    check_grounding_free_supported,
    ground_rule,
    penalty,
    penalty_grounding_free,
)

log = logging.getLogger(__name__)

MAX_RESAMPLE = 10  # attempts to replace a negative that collides with train


class TrainingError(Exception):
    """Divergence or invalid state during optimization."""


@dataclass
class TrainingConfig:
    """All hyperparameters of one training run."""

    embedding_dim: int = 32
    hidden_widths: tuple[int, ...] = (64, 128, 32)
    activation: str = "relu"
    learning_rate: float = 0.01
    negatives_per_positive: int = 2
    adversarial_temperature: float = 1.0
    rule_weight: float = 0.1
    slacks: SlackConfig = field(default_factory=SlackConfig)
    batches_per_epoch: int = 10
    max_epochs: int = 200
    validation_period: int = 25
    patience: int = 10
    seed: int = 0
    grounding_free: bool = True
    groundings_per_rule: int = 512
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        if self.rule_weight < 0:
            raise ValueError("rule_weight must be nonnegative")
        if self.adversarial_temperature < 0:
            raise ValueError("adversarial_temperature must be nonnegative")
        if self.batches_per_epoch < 1:
            raise ValueError("batches_per_epoch must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.validation_period < 1 or self.patience < 1:
            raise ValueError("validation_period and patience must be >= 1")
        if self.groundings_per_rule < 1:
            raise ValueError("groundings_per_rule must be >= 1")
        if not self.hidden_widths:
            raise ValueError("need at least one hidden layer")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")


def fb15k_full_scale() -> TrainingConfig:
    """Full-scale FB15k setting: d=200, hidden 1000/2000/200, lr 0.001, 8
    negatives, rule weight 0.05 with the per-kind slacks tuned for it."""
    return TrainingConfig(
        embedding_dim=200,
        hidden_widths=(1000, 2000, 200),
        activation="relu",
        learning_rate=0.001,
        negatives_per_positive=8,
        rule_weight=0.05,
        slacks=SlackConfig(equivalence=1.0, symmetric=0.5, implication=5.0,
                           composition=0.1, inverse=3.0),
        batches_per_epoch=100,
        max_epochs=2000,
    )


def wn18_full_scale() -> TrainingConfig:
    """Full-scale WN18 setting: d=200, lr 0.001, 5 negatives, rule weight 0.01."""
    return TrainingConfig(
        embedding_dim=200,
        hidden_widths=(1000, 2000, 200),
        activation="relu",
        learning_rate=0.001,
        negatives_per_positive=5,
        rule_weight=0.01,
        slacks=SlackConfig(inverse=0.1),
        batches_per_epoch=100,
        max_epochs=2000,
    )


PRESETS = {
    "desk": TrainingConfig,
    "fb15k-full": fb15k_full_scale,
    "wn18-full": wn18_full_scale,
}


def sample_negatives(
    triple: Triple,
    graph: KnowledgeGraph,
    k: int,
    rng: np.random.Generator,
    counters: dict | None = None,
) -> list[Triple]:
    """k corruptions of ``triple``, each replacing head or tail (fair coin)
    with a uniformly random *different* entity.

    Corruptions colliding with known train triples are resampled a bounded
    number of times, then kept anyway with label -1 (count reported through
    ``counters["collision_kept"]`` when given).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = graph.num_entities
    if n < 2:
        raise ValueError("need at least two entities to corrupt triples")
    out = []
    for _ in range(k):
        corrupt_head = bool(rng.integers(2))
        original = triple.head if corrupt_head else triple.tail
        candidate = None
        for _ in range(MAX_RESAMPLE):
            e = int(rng.integers(n - 1))
            if e >= original:
                e += 1  # uniform over entities other than the original
            candidate = (
                Triple(e, triple.relation, triple.tail)
                if corrupt_head
                else Triple(triple.head, triple.relation, e)
            )
            if not graph.contains(*candidate.as_tuple(), "train"):
                break
        else:
            if counters is not None:
                counters["collision_kept"] = counters.get("collision_kept", 0) + 1
        out.append(candidate)
    return out


def adversarial_weights(scores, temperature: float) -> np.ndarray:
    """Softmax of temperature * scores, computed with max-shift; sums to 1.

    Used to up-weight high-scoring negatives; the weights are treated as
    constants in gradients.  Temperature 0 gives uniform weights.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score vector")
    if temperature < 0:
        raise ValueError("temperature must be nonnegative")
    logits = temperature * scores
    logits = logits - np.max(logits)
    w = np.exp(logits)
    return w / np.sum(w)


@dataclass
class AdamState:
    """First/second moment accumulators, shaped like the parameters."""

    step: int
    first: Gradients
    second: Gradients

    @classmethod
    def zeros(cls, params: ModelParameters) -> "AdamState":
        return cls(0, Gradients.zeros_like(params), Gradients.zeros_like(params))


def adam_step(
    params: ModelParameters,
    grads: Gradients,
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on every parameter tensor."""
    state.step += 1
    t = state.step
    for (_, p), (_, g), (_, m), (_, v) in zip(
        params.arrays(), grads.arrays(), state.first.arrays(), state.second.arrays()
    ):
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient in Adam update")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)


@dataclass
class TrainingTrace:
    """Per-epoch loss components plus the validation history."""

    data_loss: list[float] = field(default_factory=list)
    penalty_terms: list[dict] = field(default_factory=list)  # kind -> pre-lambda term
    total_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    validation_epochs: list[int] = field(default_factory=list)
    validation_mrr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    rule_weight: float = 0.0
    collision_kept: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.data_loss)

    def penalty_kinds(self) -> list[str]:
        kinds = set()
        for terms in self.penalty_terms:
            kinds.update(terms)
        return sorted(kinds)

    def write_tsv(self, path) -> None:
        kinds = self.penalty_kinds()
        valid = dict(zip(self.validation_epochs, self.validation_mrr))
        with open(path, "w", encoding="utf-8") as out:
            cols = ["epoch", "data_loss"]
            cols += [f"penalty_{k}" for k in kinds]
            cols += ["total_loss", "valid_mrr", "seconds"]
            out.write("\t".join(cols) + "\n")
            for e in range(self.epochs_run):
                row = [str(e), f"{self.data_loss[e]:.10g}"]
                row += [f"{self.penalty_terms[e].get(k, 0.0):.10g}" for k in kinds]
                row.append(f"{self.total_loss[e]:.10g}")
                row.append(f"{valid[e]:.10g}" if e in valid else "")
                row.append(f"{self.seconds[e]:.4g}")
                out.write("\t".join(row) + "\n")


def _filtered_mrr(params, graph, split) -> float:
    # local import: evaluation depends on model only, no cycle in practice
    from .evaluation import evaluate_split

    report = evaluate_split(params, graph, split)
    ranks = [q.filtered for q in report.queries]
    return float(np.mean([1.0 / r for r in ranks]))


def train(
    graph: KnowledgeGraph,
    rules: list[Rule],
    config: TrainingConfig,
) -> tuple[ModelParameters, TrainingTrace]:
    """Run the full optimization and return the best-validation parameters.

    Each epoch shuffles the train split into mini-batches; every batch samples
    negatives, weights them self-adversarially, adds the rule penalties
    (grounding-free where enabled), takes one Adam step and re-projects the
    entity rows to unit norm.  Validation MRR is computed every
    ``validation_period`` epochs and training stops early after ``patience``
    validations without improvement.
    """
    config.validate()
    train_triples = graph.triples("train")
    if not train_triples:
        raise TrainingError("train split is empty")
    for rule in rules:
        for r in rule.relations:
            if not 0 <= r < graph.num_relations:
                raise ValueError(f"rule references unknown relation id {r}")

    rng = np.random.default_rng(config.seed)
    params = init_parameters(
        graph.num_entities,
        graph.num_relations,
        config.embedding_dim,
        config.hidden_widths,
        config.activation,
        rng,
    )
    state = AdamState.zeros(params)

    use_rules = bool(rules) and config.rule_weight > 0
    grounded: list[tuple[Rule, list]] = []
    free_rules: list[Rule] = []
    if use_rules:
        for rule in rules:
            if config.grounding_free and rule.kind in GROUNDING_FREE_KINDS:
                check_grounding_free_supported(params)
                free_rules.append(rule)
            else:
                grounded.append((rule, ground_rule(rule, graph, grounding_free=False)))
        log.info(
            "materialized %d grounded rule(s), %d grounding-free rule(s)",
            len(grounded),
            len(free_rules),
        )

    heads = np.array([t.head for t in train_triples], dtype=np.intp)
    rels = np.array([t.relation for t in train_triples], dtype=np.intp)
    tails = np.array([t.tail for t in train_triples], dtype=np.intp)
    n_train = len(train_triples)
    k = config.negatives_per_positive
    feature_dim = params.feature_dim
    per_batch_cap = max(1, config.groundings_per_rule // config.batches_per_epoch)

    trace = TrainingTrace(rule_weight=config.rule_weight)
    counters: dict = {}
    best_params = params.copy()
    best_mrr = -np.inf
    best_epoch = 0
    bad_validations = 0
    has_validation = bool(graph.triples("valid"))

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n_train)
        n_batches = min(config.batches_per_epoch, n_train)
        epoch_data = 0.0
        epoch_pen: dict[str, float] = {}

        for b, batch_idx in enumerate(np.array_split(order, n_batches)):
            if batch_idx.size == 0:
                continue
            pos_h, pos_r, pos_t = heads[batch_idx], rels[batch_idx], tails[batch_idx]
            n_pos = batch_idx.size
            neg_h = np.empty(n_pos * k, dtype=np.intp)
            neg_r = np.empty(n_pos * k, dtype=np.intp)
            neg_t = np.empty(n_pos * k, dtype=np.intp)
            for i in range(n_pos):
                negs = sample_negatives(
                    Triple(int(pos_h[i]), int(pos_r[i]), int(pos_t[i])),
                    graph, k, rng, counters,
                )
                for j, nt in enumerate(negs):
                    neg_h[i * k + j] = nt.head
                    neg_r[i * k + j] = nt.relation
                    neg_t[i * k + j] = nt.tail

            all_h = np.concatenate([pos_h, neg_h])
            all_r = np.concatenate([pos_r, neg_r])
            all_t = np.concatenate([pos_t, neg_t])
            scores, cache = score_batch(params, all_h, all_r, all_t)

            labels = np.concatenate([np.ones(n_pos), -np.ones(n_pos * k)])
            weights = np.ones(n_pos * (1 + k))
            neg_scores = scores[n_pos:].reshape(n_pos, k)
            for i in range(n_pos):
                weights[n_pos + i * k : n_pos + (i + 1) * k] = adversarial_weights(
                    neg_scores[i], config.adversarial_temperature
                )

            grads = Gradients.zeros_like(params)
            data_loss, dscores = logistic_loss(scores, labels, weights)
            backprop_scores(params, cache, all_r, dscores, grads)

            batch_pen: dict[str, float] = {}
            if use_rules:
                for rule, groundings in grounded:
                    if not groundings:
                        batch_pen.setdefault(rule.kind, 0.0)
                        continue
                    if len(groundings) > per_batch_cap:
                        pick = rng.choice(len(groundings), size=per_batch_cap, replace=False)
                        sample = [groundings[int(j)] for j in pick]
                    else:
                        sample = groundings
                    raw, _ = penalty(
                        rule.kind, params, sample, config.slacks.get(rule.kind),
                        out=grads,
                        scale=config.rule_weight * rule.confidence / len(sample),
                    )
                    term = rule.confidence * raw / len(sample)
                    batch_pen[rule.kind] = batch_pen.get(rule.kind, 0.0) + term
                for rule in free_rules:
                    r1, r2 = rule.relations
                    raw, _ = penalty_grounding_free(
                        rule.kind, params, r1, r2, config.slacks.get(rule.kind),
                        out=grads,
                        scale=config.rule_weight * rule.confidence / feature_dim,
                    )
                    term = rule.confidence * raw / feature_dim
                    batch_pen[rule.kind] = batch_pen.get(rule.kind, 0.0) + term

            batch_total = data_loss + config.rule_weight * sum(batch_pen.values())
            if not np.isfinite(batch_total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            adam_step(
                params, grads, state, config.learning_rate,
                config.adam_beta1, config.adam_beta2, config.adam_epsilon,
            )
            project_entities(params)

            epoch_data += data_loss
            for kind, term in batch_pen.items():
                epoch_pen[kind] = epoch_pen.get(kind, 0.0) + term

        trace.data_loss.append(epoch_data)
        trace.penalty_terms.append(epoch_pen)
        trace.total_loss.append(epoch_data + config.rule_weight * sum(epoch_pen.values()))
        trace.seconds.append(time.perf_counter() - t0)

        if has_validation and (epoch + 1) % config.validation_period == 0:
            mrr = _filtered_mrr(params, graph, "valid")
            trace.validation_epochs.append(epoch)
            trace.validation_mrr.append(mrr)
            if mrr > best_mrr:
                best_mrr = mrr
                best_epoch = epoch
                best_params = params.copy()
                bad_validations = 0
            else:
                bad_validations += 1
                if bad_validations >= config.patience:
                    log.info("early stop at epoch %d (best MRR %.4f @ %d)", epoch, best_mrr, best_epoch)
                    break

    if not trace.validation_epochs:
        best_params = params
        best_epoch = trace.epochs_run - 1
    trace.best_epoch = best_epoch
    trace.collision_kept = counters.get("collision_kept", 0)
    if trace.collision_kept:
        log.info(
            "kept %d negative(s) that collide with train triples after %d resample attempts",
            trace.collision_kept, MAX_RESAMPLE,
        )
    return best_params, trace


def config_from_mapping(base: TrainingConfig, values: dict) -> TrainingConfig:
    """Apply string-typed overrides (config file or CLI) onto ``base``.

    Slack keys use the ``slack_<kind>`` form; booleans accept true/false/1/0.
    """
    cfg = base
    slacks = dict()
    for key, raw in values.items():
        if key.startswith("slack_"):
            slacks[key[len("slack_"):]] = float(raw)
            continue
        if key in ("embedding_dim", "negatives_per_positive", "batches_per_epoch",
                   "max_epochs", "validation_period", "patience", "seed",
                   "groundings_per_rule"):
            cfg = replace(cfg, **{key: int(raw)})
        elif key in ("learning_rate", "adversarial_temperature", "rule_weight",
                     "adam_beta1", "adam_beta2", "adam_epsilon"):
            cfg = replace(cfg, **{key: float(raw)})
        elif key == "hidden_widths":
            widths = tuple(int(w) for w in str(raw).replace(",", " ").split())
            cfg = replace(cfg, hidden_widths=widths)
        elif key == "activation":
            cfg = replace(cfg, activation=str(raw))
        elif key == "grounding_free":
            text = str(raw).strip().lower()
            if text not in ("true", "false", "1", "0"):
                raise ValueError(f"bad boolean for grounding_free: {raw!r}")
            cfg = replace(cfg, grounding_free=text in ("true", "1"))
        else:
            raise ValueError(f"unknown config key {key!r}")
    if slacks:
        merged = {f: getattr(cfg.slacks, f) for f in SlackConfig.__dataclass_fields__}
        unknown = set(slacks) - set(merged)
        if unknown:
            raise ValueError(f"unknown slack kind(s): {sorted(unknown)}")
        merged.update(slacks)
        cfg = replace(cfg, slacks=SlackConfig(**merged))
    return cfg

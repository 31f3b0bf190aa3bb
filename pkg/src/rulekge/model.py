"""Scoring network: trainable parameters, forward scoring, hand-derived gradients,
unit-norm projection and binary checkpoints.

A triple (h, r, t) is scored by feeding the concatenated entity embeddings
[h; t] through a stack of affine hidden layers with per-layer activations and
taking the inner product of the final feature vector with the output-weight
row of relation r.  The output layer is linear, so scores are linear in the
relation rows.

Gradients are hand-derived reverse-mode for this fixed architecture; there is
no generic autodiff here on purpose.

Scoring only reads parameters, so concurrent readers are safe; gradient
accumulation and updates assume a single writer between scoring phases.

Checkpoint format (little-endian):
  magic   4 bytes  b"LENN"
  u32     format version (currently 1)
  u32     embedding dimension d
  u32     number of hidden layers K
  K x (u32 width, u8 activation tag)   0 = relu, 1 = sigmoid
  u32     number of entities
  u32     number of relations
  payload float64 row-major arrays in field order:
          entity embeddings, then per layer (weights, biases), relation outputs
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "sigmoid")
_ACT_CODES = {"relu": 0, "sigmoid": 1}
_ACT_NAMES = {code: name for name, code in _ACT_CODES.items()}

CHECKPOINT_MAGIC = b"LENN"
CHECKPOINT_VERSION = 1

_ZERO_ROW_EPS = 1e-30  # below this an entity row counts as zero for projection


class CheckpointError(Exception):
    """Unreadable or malformed checkpoint file."""


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def activation_plan(kind: str, num_layers: int) -> tuple[str, ...]:
    """Per-layer activation tags for the two supported plans.

    "relu" uses ReLU everywhere; "sigmoid" uses sigmoid between layers with
    ReLU on the last hidden layer, keeping the final features nonnegative.
    """
    if num_layers < 1:
        raise ValueError("need at least one hidden layer")
    if kind == "relu":
        return ("relu",) * num_layers
    if kind == "sigmoid":
        return ("sigmoid",) * (num_layers - 1) + ("relu",)
    raise ValueError(f"unknown activation plan {kind!r}")


@dataclass
class ModelParameters:
    """All trainable tensors, float64 throughout."""

    entity_embeddings: np.ndarray  # (N_e, d)
    hidden_weights: list[np.ndarray]  # W_k of shape (out_k, in_k); in_1 = 2d
    hidden_biases: list[np.ndarray]  # b_k of shape (out_k,)
    relation_outputs: np.ndarray  # (N_r, L), rows are relation embeddings
    activations: tuple[str, ...]  # per hidden layer

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.entity_embeddings.ndim != 2:
            raise ValueError("entity_embeddings must be 2-D")
        if len(self.hidden_weights) != len(self.hidden_biases):
            raise ValueError("weights/biases length mismatch")
        if len(self.hidden_weights) != len(self.activations):
            raise ValueError("one activation tag per hidden layer required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        width = 2 * self.embedding_dim
        for k, (w, b) in enumerate(zip(self.hidden_weights, self.hidden_biases)):
            if w.ndim != 2 or w.shape[1] != width:
                raise ValueError(f"layer {k}: expected input width {width}, got {w.shape}")
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: bias shape {b.shape} does not match {w.shape}")
            width = w.shape[0]
        if self.relation_outputs.ndim != 2 or self.relation_outputs.shape[1] != width:
            raise ValueError(
                f"relation_outputs must have {width} columns, got {self.relation_outputs.shape}"
            )

    @property
    def num_entities(self) -> int:
        return self.entity_embeddings.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation_outputs.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.entity_embeddings.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.relation_outputs.shape[1]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.hidden_weights)

    @property
    def parameter_count(self) -> int:
        count = self.entity_embeddings.size + self.relation_outputs.size
        count += sum(w.size + b.size for w, b in zip(self.hidden_weights, self.hidden_biases))
        return count

    def arrays(self):
        """(name, array) pairs in the declared (= checkpoint) field order."""
        yield "entity_embeddings", self.entity_embeddings
        for k, (w, b) in enumerate(zip(self.hidden_weights, self.hidden_biases)):
            yield f"hidden_weights[{k}]", w
            yield f"hidden_biases[{k}]", b
        yield "relation_outputs", self.relation_outputs

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            self.entity_embeddings.copy(),
            [w.copy() for w in self.hidden_weights],
            [b.copy() for b in self.hidden_biases],
            self.relation_outputs.copy(),
            self.activations,
        )


def init_parameters(
    num_entities: int,
    num_relations: int,
    embedding_dim: int,
    hidden_widths: tuple[int, ...],
    activation: str = "relu",
    rng: np.random.Generator | None = None,
) -> ModelParameters:
    """Glorot-uniform initialization; entity rows are projected to unit norm."""
    if num_entities < 1 or num_relations < 1:
        raise ValueError("need at least one entity and one relation")
    rng = rng if rng is not None else np.random.default_rng()

    def glorot(fan_out, fan_in):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_out, fan_in))

    entities = glorot(num_entities, embedding_dim)
    weights, biases = [], []
    width = 2 * embedding_dim
    for out in hidden_widths:
        weights.append(glorot(out, width))
        biases.append(np.zeros(out))
        width = out
    relations = glorot(num_relations, width)
    params = ModelParameters(
        entities, weights, biases, relations, activation_plan(activation, len(hidden_widths))
    )
    project_entities(params)
    return params


class ForwardCache:
    """Per-batch activations retained for the backward pass."""

    __slots__ = ("head_ids", "tail_ids", "pre", "acts")

    def __init__(self, head_ids, tail_ids, pre, acts):
        self.head_ids = head_ids
        self.tail_ids = tail_ids
        self.pre = pre  # pre-activations z_k, one (B, out_k) array per layer
        self.acts = acts  # acts[0] is the input, acts[k] the layer-k output

    @property
    def features(self) -> np.ndarray:
        return self.acts[-1]


def _check_entity_ids(params: ModelParameters, *ids) -> None:
    for i in ids:
        if not 0 <= i < params.num_entities:
            raise ValueError(f"entity id {i} out of range [0, {params.num_entities})")


def _check_relation_id(params: ModelParameters, r: int) -> None:
    if not 0 <= r < params.num_relations:
        raise ValueError(f"relation id {r} out of range [0, {params.num_relations})")


def forward_pairs(params: ModelParameters, head_ids, tail_ids) -> tuple[np.ndarray, ForwardCache]:
    """Final feature vectors for a batch of (head, tail) pairs, with cache."""
    head_ids = np.asarray(head_ids, dtype=np.intp)
    tail_ids = np.asarray(tail_ids, dtype=np.intp)
    x = np.concatenate(
        [params.entity_embeddings[head_ids], params.entity_embeddings[tail_ids]], axis=1
    )
    pre, acts = [], [x]
    a = x
    for w, b, act in zip(params.hidden_weights, params.hidden_biases, params.activations):
        z = a @ w.T + b
        pre.append(z)
        a = relu(z) if act == "relu" else sigmoid(z)
        acts.append(a)
    return a, ForwardCache(head_ids, tail_ids, pre, acts)


def features(params: ModelParameters, head: int, tail: int) -> np.ndarray:
    """Final hidden-layer feature vector for a single entity pair."""
    _check_entity_ids(params, head, tail)
    phi, _ = forward_pairs(params, [head], [tail])
    return phi[0]


def score_batch(params: ModelParameters, head_ids, relation_ids, tail_ids):
    """Scores for a batch of triples plus the forward cache for backprop."""
    relation_ids = np.asarray(relation_ids, dtype=np.intp)
    phi, cache = forward_pairs(params, head_ids, tail_ids)
    scores = np.einsum("bl,bl->b", phi, params.relation_outputs[relation_ids])
    return scores, cache


def score(params: ModelParameters, head: int, relation: int, tail: int) -> float:
    """Plausibility score of one triple."""
    _check_entity_ids(params, head, tail)
    _check_relation_id(params, relation)
    scores, _ = score_batch(params, [head], [relation], [tail])
    return float(scores[0])


def score_all_tails(params: ModelParameters, head: int, relation: int) -> np.ndarray:
    """Scores of (head, relation, e) for every entity e, as one batched pass."""
    _check_entity_ids(params, head)
    _check_relation_id(params, relation)
    n = params.num_entities
    phi, _ = forward_pairs(params, np.full(n, head, dtype=np.intp), np.arange(n, dtype=np.intp))
    return phi @ params.relation_outputs[relation]


def score_all_heads(params: ModelParameters, relation: int, tail: int) -> np.ndarray:
    """Scores of (e, relation, tail) for every entity e."""
    _check_entity_ids(params, tail)
    _check_relation_id(params, relation)
    n = params.num_entities
    phi, _ = forward_pairs(params, np.arange(n, dtype=np.intp), np.full(n, tail, dtype=np.intp))
    return phi @ params.relation_outputs[relation]


@dataclass
class Gradients:
    """Gradient tensors shaped exactly like ModelParameters."""

    entity_embeddings: np.ndarray
    hidden_weights: list[np.ndarray]
    hidden_biases: list[np.ndarray]
    relation_outputs: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParameters) -> "Gradients":
        return cls(
            np.zeros_like(params.entity_embeddings),
            [np.zeros_like(w) for w in params.hidden_weights],
            [np.zeros_like(b) for b in params.hidden_biases],
            np.zeros_like(params.relation_outputs),
        )

    def arrays(self):
        yield "entity_embeddings", self.entity_embeddings
        for k, (w, b) in enumerate(zip(self.hidden_weights, self.hidden_biases)):
            yield f"hidden_weights[{k}]", w
            yield f"hidden_biases[{k}]", b
        yield "relation_outputs", self.relation_outputs

    def add_scaled(self, other: "Gradients", scale: float = 1.0) -> None:
        for (_, mine), (_, theirs) in zip(self.arrays(), other.arrays()):
            mine += scale * theirs

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(a))) if a.size else 0.0) for _, a in self.arrays())


def backprop_scores(
    params: ModelParameters,
    cache: ForwardCache,
    relation_ids,
    dscores,
    grads: Gradients,
) -> None:
    """Accumulate d(sum_i dscores[i] * score_i)/d(theta) into ``grads``.

    ``dscores`` holds the loss derivative with respect to each batch score;
    entity gradients accumulate over repeated ids in a fixed order.
    """
    relation_ids = np.asarray(relation_ids, dtype=np.intp)
    dscores = np.asarray(dscores, dtype=np.float64)
    phi = cache.features
    np.add.at(grads.relation_outputs, relation_ids, dscores[:, None] * phi)
    da = dscores[:, None] * params.relation_outputs[relation_ids]
    for k in range(len(params.hidden_weights) - 1, -1, -1):
        if params.activations[k] == "relu":
            dz = da * (cache.pre[k] > 0)
        else:
            s = cache.acts[k + 1]
            dz = da * s * (1.0 - s)
        grads.hidden_weights[k] += dz.T @ cache.acts[k]
        grads.hidden_biases[k] += dz.sum(axis=0)
        da = dz @ params.hidden_weights[k]
    d = params.embedding_dim
    np.add.at(grads.entity_embeddings, cache.head_ids, da[:, :d])
    np.add.at(grads.entity_embeddings, cache.tail_ids, da[:, d:])


def logistic_loss(scores, labels, weights) -> tuple[float, np.ndarray]:
    """Weighted softplus loss sum(w * log(1 + exp(-y * f))) and d/df per sample."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    margins = -labels * scores
    loss = float(np.sum(weights * np.logaddexp(0.0, margins)))
    dscores = weights * (-labels) * sigmoid(margins)
    return loss, dscores


def backward(params: ModelParameters, batch, extra_grads: Gradients | None = None):
    """Loss and gradients of the weighted data term over a labelled batch.

    ``batch`` is a sequence of (Triple, label, weight) with labels in {+1, -1}
    and weights >= 0.  ``extra_grads`` (e.g. accumulated rule-penalty
    gradients) are added into the result.
    """
    grads = Gradients.zeros_like(params)
    if extra_grads is not None:
        grads.add_scaled(extra_grads)
    if not len(batch):
        return 0.0, grads
    heads = np.array([t.head for t, _, _ in batch], dtype=np.intp)
    rels = np.array([t.relation for t, _, _ in batch], dtype=np.intp)
    tails = np.array([t.tail for t, _, _ in batch], dtype=np.intp)
    labels = np.array([y for _, y, _ in batch], dtype=np.float64)
    weights = np.array([w for _, _, w in batch], dtype=np.float64)
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise ValueError("labels must be +1 or -1")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    scores, cache = score_batch(params, heads, rels, tails)
    loss, dscores = logistic_loss(scores, labels, weights)
    backprop_scores(params, cache, rels, dscores, grads)
    return loss, grads


def project_entities(params: ModelParameters) -> int:
    """Normalize every entity row to unit Euclidean norm, in place.

    Zero rows are replaced by the first basis vector; returns how many were.
    """
    emb = params.entity_embeddings
    norms = np.linalg.norm(emb, axis=1)
    zero = norms < _ZERO_ROW_EPS
    n_zero = int(np.count_nonzero(zero))
    if n_zero:
        emb[zero] = 0.0
        emb[zero, 0] = 1.0
        norms[zero] = 1.0
    emb /= norms[:, None]
    return n_zero


def save_checkpoint(params: ModelParameters, path) -> None:
    header = struct.pack(
        "<4sIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.embedding_dim,
        len(params.hidden_weights),
    )
    for width, act in zip(params.hidden_widths, params.activations):
        header += struct.pack("<IB", width, _ACT_CODES[act])
    header += struct.pack("<II", params.num_entities, params.num_relations)
    with open(path, "wb") as out:
        out.write(header)
        for _, arr in params.arrays():
            out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParameters:
    with open(path, "rb") as handle:
        blob = handle.read()

    def take(fmt, offset):
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise CheckpointError(f"{path}: truncated header")
        return struct.unpack_from(fmt, blob, offset), offset + size

    (magic, version, dim, n_layers), offset = take("<4sIII", 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    widths, acts = [], []
    for _ in range(n_layers):
        (width, code), offset = take("<IB", offset)
        if code not in _ACT_NAMES:
            raise CheckpointError(f"{path}: unknown activation code {code}")
        widths.append(width)
        acts.append(_ACT_NAMES[code])
    (num_entities, num_relations), offset = take("<II", offset)

    shapes = [(num_entities, dim)]
    in_width = 2 * dim
    for width in widths:
        shapes.append((width, in_width))
        shapes.append((width,))
        in_width = width
    shapes.append((num_relations, in_width))
    expected = sum(int(np.prod(s)) for s in shapes) * 8
    payload = blob[offset:]
    if len(payload) != expected:
        if len(payload) < expected:
            raise CheckpointError(
                f"{path}: truncated payload, missing {expected - len(payload)} bytes"
            )
        raise CheckpointError(f"{path}: {len(payload) - expected} trailing bytes")

    arrays = []
    pos = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(
            np.frombuffer(payload, dtype="<f8", count=count, offset=pos)
            .astype(np.float64)
            .reshape(shape)
        )
        pos += count * 8
    entity = arrays[0]
    weights = arrays[1:-1:2]
    biases = arrays[2:-1:2]
    relations = arrays[-1]
    return ModelParameters(entity, list(weights), list(biases), relations, tuple(acts))

"""Context-conditioned classifier used for both teacher and student.

A small tanh MLP over a fixed feature layout: the query embedding followed by
K context slots, each slot holding the context embedding, its label one-hot
(safe, unsafe) and the retrieval similarity score. Teacher and student share
the layout and differ only in capacity. Gradients are exact reverse-mode
derivatives of the losses; tests hold them to finite differences.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import Embedding, EncoderConfig, embed
from .kb import ContextSet, KnowledgeBase

LOG_CLAMP = 1e-12

LABEL_INDEX = {"safe": 0, "unsafe": 1}
INDEX_LABEL = {v: k for k, v in LABEL_INDEX.items()}


class ModelError(ValueError):
    """Shape mismatch, non-finite numerics, or invalid capacity."""


@dataclass(frozen=True)
class GuardCapacity:
    hidden_layers: int
    hidden_width: int
    role: str = "teacher"

    def __post_init__(self) -> None:
        if self.hidden_layers < 1:
            raise ModelError(f"hidden_layers must be >= 1, got {self.hidden_layers}")
        if self.hidden_width < 1:
            raise ModelError(f"hidden_width must be >= 1, got {self.hidden_width}")

    def to_dict(self) -> dict:
        return {
            "hidden_layers": self.hidden_layers,
            "hidden_width": self.hidden_width,
            "role": self.role,
        }


TEACHER_CAPACITY = GuardCapacity(2, 256, "teacher")
STUDENT_CAPACITY = GuardCapacity(1, 64, "student")


def feature_dim(embedding_dim: int, k: int) -> int:
    return embedding_dim + k * (embedding_dim + 3)


@dataclass
class GuardParams:
    """All weights of one classifier instance. Mutated only by apply_update."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    capacity: GuardCapacity
    input_dim: int
    seed: int

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "GuardParams":
        return GuardParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.capacity,
            self.input_dim,
            self.seed,
        )

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            h.update(np.ascontiguousarray(w).tobytes())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


def init_params(capacity: GuardCapacity, input_dim: int, seed: int) -> GuardParams:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from one seeded stream."""
    rng = np.random.default_rng(seed)
    dims = [input_dim] + [capacity.hidden_width] * capacity.hidden_layers + [2]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return GuardParams(weights, biases, capacity, input_dim, seed)


# -- feature construction ----------------------------------------------------


def build_input(
    text: str,
    ctx: ContextSet,
    kb: KnowledgeBase,
    cfg: EncoderConfig,
    k: int,
    *,
    query_embedding: Embedding | None = None,
) -> tuple[np.ndarray, str]:
    """Feature vector plus the canonical serialized prompt for one query.

    Layout: [query emb (d)] then k slots of [context emb (d), one-hot(safe,
    unsafe), similarity]; slots beyond the retrieved items stay zero. The
    prompt serialization is normative for logging/interchange:
    ``QUERY: {x}`` then one ``CTX{i} [{label}] (sim={score:.4f}): {text}``
    line per populated slot (i is 1-based).
    """
    emb = query_embedding if query_embedding is not None else embed(text, cfg)
    d = cfg.dimension
    features = np.zeros(feature_dim(d, k), dtype=np.float64)
    features[:d] = emb.values
    lines = [f"QUERY: {text}"]
    for i, (entry_id, score) in enumerate(ctx.items[:k]):
        entry = kb.get(entry_id)  # raises KbError on dangling ids
        base = d + i * (d + 3)
        features[base : base + d] = entry.embedding.values
        features[base + d + LABEL_INDEX[entry.label]] = 1.0
        features[base + d + 2] = score
        lines.append(f"CTX{i + 1} [{entry.label}] (sim={score:.4f}): {entry.text}")
    return features, "\n".join(lines)


# -- forward / losses --------------------------------------------------------


def _forward_cached(params: GuardParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    if x.shape[-1] != params.input_dim:
        raise ModelError(f"feature dim {x.shape[-1]} != model input dim {params.input_dim}")
    acts = [x]
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w + b)
        acts.append(h)
    logits = h @ params.weights[-1] + params.biases[-1]
    return logits, acts


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: GuardParams, features: np.ndarray) -> np.ndarray:
    """Class distribution(s) for one feature vector or a batch."""
    single = features.ndim == 1
    x = features[None, :] if single else features
    logits, _ = _forward_cached(params, x)
    probs = softmax(logits)
    return probs[0] if single else probs


def predict(params: GuardParams, features: np.ndarray) -> int:
    probs = forward(params, features)
    return int(np.argmax(probs))


def cross_entropy(dist: np.ndarray, y: int) -> float:
    """-log p_y, with p clamped at 1e-12 before the log."""
    return float(-np.log(max(float(dist[y]), LOG_CLAMP)))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """sum_i p_i ln(p_i / q_i), with 0 ln 0 = 0 and q clamped at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.clip(np.asarray(q, dtype=np.float64), LOG_CLAMP, None)
    mask = p > 0.0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def scaled(self, c: float) -> "Gradients":
        return Gradients([c * w for w in self.weights], [c * b for b in self.biases])

    def add(self, other: "Gradients", scale: float = 1.0) -> "Gradients":
        return Gradients(
            [a + scale * b for a, b in zip(self.weights, other.weights)],
            [a + scale * b for a, b in zip(self.biases, other.biases)],
        )


def zero_gradients(params: GuardParams) -> Gradients:
    return Gradients(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def loss_and_grads(
    params: GuardParams,
    x: np.ndarray,
    y: np.ndarray | None = None,
    *,
    teacher_probs: np.ndarray | None = None,
    ce_weight: float = 1.0,
    kl_weight: float = 0.0,
    reward_weight: float = 0.0,
    sample_weights: np.ndarray | None = None,
) -> tuple[float, Gradients]:
    """Weighted-mean loss over a batch and its exact parameter gradients.

    The per-sample loss is ce_weight * CE(probs, y) + kl_weight *
    KL(teacher || probs) + reward_weight * (1 - p_y)^2. Sample weights default
    to 1/N; callers pass explicit weights when variants of one example must
    share its mass.
    """
    if x.ndim != 2 or x.shape[0] == 0:
        raise ModelError("batch must be a nonempty 2-d array")
    n = x.shape[0]
    if sample_weights is None:
        sample_weights = np.full(n, 1.0 / n)
    logits, acts = _forward_cached(params, x)
    probs = softmax(logits)

    loss = 0.0
    dlogits = np.zeros_like(logits)
    if ce_weight != 0.0 or reward_weight != 0.0:
        if y is None:
            raise ModelError("targets required for cross-entropy/reward losses")
        p_y = np.clip(probs[np.arange(n), y], LOG_CLAMP, None)
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), y] = 1.0
        if ce_weight != 0.0:
            loss += ce_weight * float(np.sum(sample_weights * -np.log(p_y)))
            dlogits += ce_weight * sample_weights[:, None] * (probs - onehot)
        if reward_weight != 0.0:
            gap = 1.0 - p_y
            loss += reward_weight * float(np.sum(sample_weights * gap * gap))
            # d/dz_j (1-p_y)^2 = -2 (1-p_y) p_y (delta_jy - p_j)
            coef = -2.0 * gap * p_y
            dlogits += reward_weight * (sample_weights * coef)[:, None] * (onehot - probs)
    if kl_weight != 0.0:
        if teacher_probs is None:
            raise ModelError("teacher distributions required for the KL loss")
        kls = np.array([kl_divergence(teacher_probs[i], probs[i]) for i in range(n)])
        loss += kl_weight * float(np.sum(sample_weights * kls))
        dlogits += kl_weight * sample_weights[:, None] * (probs - teacher_probs)

    if not np.isfinite(loss):
        per_sample = -np.log(np.clip(probs[np.arange(n), y], LOG_CLAMP, None)) if y is not None else probs.sum(axis=1)
        bad = int(np.flatnonzero(~np.isfinite(per_sample))[0]) if np.any(~np.isfinite(per_sample)) else 0
        raise ModelError(f"non-finite loss at batch index {bad}")

    grads = zero_gradients(params)
    delta = dlogits
    for layer in range(len(params.weights) - 1, -1, -1):
        grads.weights[layer] = acts[layer].T @ delta
        grads.biases[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer].T) * (1.0 - acts[layer] ** 2)
    return loss, grads


def gradients(params: GuardParams, batch: Sequence[tuple[np.ndarray, int]]) -> Gradients:
    """Exact gradients of the mean cross-entropy over (features, target) pairs."""
    if not batch:
        raise ModelError("batch must be nonempty")
    x = np.stack([f for f, _ in batch])
    y = np.array([t for _, t in batch], dtype=np.int64)
    _, grads = loss_and_grads(params, x, y)
    return grads


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptimizerState:
    momentum: float = 0.0
    velocity_w: list[np.ndarray] | None = None
    velocity_b: list[np.ndarray] | None = None


def apply_update(
    params: GuardParams,
    grads: Gradients,
    state: OptimizerState | None,
    lr: float,
) -> GuardParams:
    """One SGD step (optionally with momentum); returns new params."""
    out = params.copy()
    mu = state.momentum if state is not None else 0.0
    if mu != 0.0:
        if state.velocity_w is None:
            state.velocity_w = [np.zeros_like(w) for w in params.weights]
            state.velocity_b = [np.zeros_like(b) for b in params.biases]
        for i in range(len(out.weights)):
            state.velocity_w[i] = mu * state.velocity_w[i] + grads.weights[i]
            state.velocity_b[i] = mu * state.velocity_b[i] + grads.biases[i]
            out.weights[i] -= lr * state.velocity_w[i]
            out.biases[i] -= lr * state.velocity_b[i]
    else:
        for i in range(len(out.weights)):
            out.weights[i] -= lr * grads.weights[i]
            out.biases[i] -= lr * grads.biases[i]
    for arr in (*out.weights, *out.biases):
        if not np.all(np.isfinite(arr)):
            raise ModelError("non-finite parameter after update")
    return out


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"GUARDCKPT1\n"


def save_params(params: GuardParams, path: str, metadata: dict | None = None) -> None:
    """Binary checkpoint: magic, JSON header line, row-major float64 weights.

    Training metadata goes to a JSON sidecar at ``<path>.meta.json``.
    """
    header = {
        "capacity": params.capacity.to_dict(),
        "input_dim": params.input_dim,
        "seed": params.seed,
        "shapes": [list(w.shape) for w in params.weights],
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for w, b in zip(params.weights, params.biases):
            f.write(np.ascontiguousarray(w, dtype=np.float64).tobytes())
            f.write(np.ascontiguousarray(b, dtype=np.float64).tobytes())
    if metadata is not None:
        with open(path + ".meta.json", "w", encoding="utf-8") as f:
            json.dump(metadata, f, sort_keys=True, indent=2)
            f.write("\n")


def load_params(path: str) -> GuardParams:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ModelError(f"not a checkpoint file: {path}")
        header = json.loads(f.readline().decode("utf-8"))
        cap = GuardCapacity(**header["capacity"])
        weights, biases = [], []
        for shape in header["shapes"]:
            fan_in, fan_out = shape
            w = np.frombuffer(f.read(fan_in * fan_out * 8), dtype=np.float64).reshape(fan_in, fan_out)
            b = np.frombuffer(f.read(fan_out * 8), dtype=np.float64)
            weights.append(w.copy())
            biases.append(b.copy())
    return GuardParams(weights, biases, cap, header["input_dim"], header["seed"])

"""Learnable embeddings of scaled report delays.

``time2vec``: one linear and K sine dimensions, each squashed by a sigmoid.
``ema2vec``: one linear, K/2 quadratic and K/2 square-root dimensions,
normalised to unit Euclidean norm.
``timeconcat``: the scaled delay itself, no parameters.

All functions broadcast over arbitrary leading dimensions of the delay
input; the embedding axis is appended last.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractViolationError, DegenerateEmbeddingError
from .numerics import cosine_similarity

log = logging.getLogger(__name__)

KINDS = ("time2vec", "ema2vec", "timeconcat")
DEFAULT_DIM = {"time2vec": 8, "ema2vec": 9, "timeconcat": 1}
_NORM_FLOOR = 1e-12


@dataclass
class TimeEmbeddingParams:
    """Weights and biases of a time embedding.

    For time2vec these are frequencies and phases, for ema2vec the slopes
    and offsets.  Index 0 is the linear dimension.  timeconcat carries
    empty arrays.
    """

    kind: str
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolationError(f"unknown embedding kind {self.kind!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.shape != self.biases.shape or self.weights.ndim != 1:
            raise ContractViolationError("weights and biases must be 1-D arrays of equal length")
        if self.kind == "timeconcat" and self.weights.size:
            raise ContractViolationError("timeconcat has no parameters")
        if self.kind == "ema2vec" and (self.weights.size < 1 or (self.weights.size - 1) % 2):
            raise ContractViolationError("ema2vec needs an even number K of nonlinear dimensions")
        if self.kind == "time2vec" and self.weights.size < 1:
            raise ContractViolationError("time2vec needs at least the linear dimension")

    @property
    def K(self) -> int:
        return max(self.weights.size - 1, 0)

    @property
    def dim(self) -> int:
        return 1 if self.kind == "timeconcat" else self.weights.size

    @property
    def n_params(self) -> int:
        return 2 * self.weights.size


def init_embedding_params(kind: str, dim: int | None = None, rng: np.random.Generator | None = None) -> TimeEmbeddingParams:
    """Weights uniform in [-1, 1], biases uniform in [-0.5, 0.5]."""
    if kind == "timeconcat":
        return TimeEmbeddingParams(kind, np.zeros(0), np.zeros(0))
    dim = DEFAULT_DIM[kind] if dim is None else dim
    rng = np.random.default_rng(0) if rng is None else rng
    w = rng.uniform(-1.0, 1.0, dim)
    b = rng.uniform(-0.5, 0.5, dim)
    return TimeEmbeddingParams(kind, w, b)


def _sigmoid(x):
    # exp overflow for very negative x gives the correct limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _check_tau(tau: np.ndarray) -> None:
    if not np.all(np.isfinite(tau)):
        raise ContractViolationError("time embedding called on a missing (masked) delay")


def embed_forward(tau, params: TimeEmbeddingParams) -> tuple[np.ndarray, dict]:
    """Embedding of ``tau`` plus the cache needed by :func:`embed_backward`."""
    tau = np.asarray(tau, dtype=np.float64)
    _check_tau(tau)
    t = tau[..., None]
    if params.kind == "timeconcat":
        return t.copy(), {"kind": "timeconcat"}
    w, b = params.weights, params.biases
    if params.kind == "time2vec":
        arg = w * t + b
        inner = arg.copy()
        inner[..., 1:] = np.sin(arg[..., 1:])
        out = _sigmoid(inner)
        return out, {"kind": "time2vec", "t": t, "arg": arg, "out": out}
    half = params.K // 2
    basis = np.empty(tau.shape + (params.dim,))
    basis[..., 0:1] = t
    basis[..., 1 : 1 + half] = t * t
    basis[..., 1 + half :] = np.sqrt(t)
    raw = w * basis + b
    norm = np.sqrt(np.sum(raw * raw, axis=-1, keepdims=True))
    if np.any(norm < _NORM_FLOOR):
        raise DegenerateEmbeddingError("ema2vec pre-normalisation vector has (near) zero norm")
    out = raw / norm
    return out, {"kind": "ema2vec", "basis": basis, "norm": norm, "out": out}


def embed_backward(cache: dict, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients with respect to (weights, biases), summed over leading dims."""
    kind = cache["kind"]
    if kind == "timeconcat":
        return np.zeros(0), np.zeros(0)
    lead = tuple(range(grad_out.ndim - 1))
    if kind == "time2vec":
        s = cache["out"]
        g_inner = grad_out * s * (1.0 - s)
        g_arg = g_inner.copy()
        g_arg[..., 1:] *= np.cos(cache["arg"][..., 1:])
        return np.sum(g_arg * cache["t"], axis=lead), np.sum(g_arg, axis=lead)
    e = cache["out"]
    g_raw = (grad_out - e * np.sum(e * grad_out, axis=-1, keepdims=True)) / cache["norm"]
    return np.sum(g_raw * cache["basis"], axis=lead), np.sum(g_raw, axis=lead)


def time2vec(tau, params: TimeEmbeddingParams) -> np.ndarray:
    if params.kind != "time2vec":
        raise ContractViolationError(f"time2vec called with {params.kind} parameters")
    return embed_forward(tau, params)[0]


def ema2vec(delta, params: TimeEmbeddingParams) -> np.ndarray:
    if params.kind != "ema2vec":
        raise ContractViolationError(f"ema2vec called with {params.kind} parameters")
    return embed_forward(delta, params)[0]


def embed(tau, params: TimeEmbeddingParams) -> np.ndarray:
    return embed_forward(tau, params)[0]


def embed_sequence(deltas: Sequence[float], params: TimeEmbeddingParams, mask: Sequence[bool] | None = None) -> list[np.ndarray | None]:
    """Per-position embeddings; masked or missing positions map to ``None``.

    ``mask`` is True for valid positions.  Without a mask, NaN marks missing.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    valid = np.isfinite(deltas) if mask is None else (np.asarray(mask, dtype=bool) & np.isfinite(deltas))
    out: list[np.ndarray | None] = [None] * deltas.shape[0]
    if np.any(valid):
        emb = embed(deltas[valid], params)
        for slot, row in zip(np.flatnonzero(valid), emb):
            out[slot] = row
    return out


def similarity_profile(deltas: Sequence[float], params: TimeEmbeddingParams) -> np.ndarray:
    """Cosine similarity between the embedding at position 0 and every position."""
    emb = embed(np.asarray(deltas, dtype=np.float64), params)
    return np.array([cosine_similarity(emb[0], e) for e in emb])


def class_average_profiles(
    deltas: Sequence[Sequence[float]],
    trend_labels: Sequence[str],
    params: TimeEmbeddingParams,
    classes: Sequence[str] = ("linear", "convex", "concave"),
) -> tuple[dict[str, np.ndarray], list[str]]:
    """Mean similarity profile per trend class.

    ``deltas`` holds one fully valid scaled-delay vector per sample, all of the
    same length.  Classes without members are omitted and reported in the
    returned warning list.
    """
    if len(deltas) != len(trend_labels):
        raise ContractViolationError("one trend label per sample required")
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for d, lab in zip(deltas, trend_labels):
        prof = similarity_profile(d, params)
        if lab in sums:
            sums[lab] += prof
            counts[lab] += 1
        else:
            sums[lab] = prof.copy()
            counts[lab] = 1
    averages: dict[str, np.ndarray] = {}
    warnings: list[str] = []
    for cls in classes:
        if cls not in sums:
            warnings.append(f"trend class {cls!r} has no samples; omitted")
            log.warning("trend class %r has no samples; omitted", cls)
            continue
        averages[cls] = sums[cls] / counts[cls]
    return averages, warnings


def write_profiles_csv(path: str | Path, profiles: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h", "similarity", "class"])
        for cls, prof in profiles.items():
            for h, v in enumerate(prof):
                w.writerow([h, repr(float(v)), cls])

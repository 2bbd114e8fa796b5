"""Masked LSTM + MLP classifier with a hand-written backward pass.

Variants
--------
``lstm_day``    LSTM over the raw hourly steps of the target's day.
``long_lstm``   LSTM over the daily functionals of the last H+1 reports.
``timeconcat``  ``long_lstm`` with the scaled delay appended to every step.
``time2vec``    ``long_lstm`` with a Time2Vec embedding of the delay.
``ema2vec``     ``long_lstm`` with an Ema2Vec embedding of the delay.

Longitudinal steps are fed oldest first so the final hidden state sits next
to the target report.  A masked step leaves hidden and cell state untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embeddings import DEFAULT_DIM, TimeEmbeddingParams, embed_backward, embed_forward, init_embedding_params
from .errors import ContractViolationError, UnusableSampleError
from .features import LongitudinalSample

VARIANTS = ("lstm_day", "long_lstm", "timeconcat", "time2vec", "ema2vec")
CLI_VARIANTS = {
    "lstm": "lstm_day",
    "long": "long_lstm",
    "timeconcat": "timeconcat",
    "time2vec": "time2vec",
    "ema2vec": "ema2vec",
}
DEFAULT_DROPOUT = (0.3, 0.1, 0.2)


def resolve_variant(name: str) -> str:
    if name in VARIANTS:
        return name
    if name in CLI_VARIANTS:
        return CLI_VARIANTS[name]
    raise ContractViolationError(f"unknown model variant {name!r}")


def embedding_kind(variant: str) -> str | None:
    return variant if variant in ("timeconcat", "time2vec", "ema2vec") else None


@dataclass(frozen=True)
class ModelShape:
    variant: str
    n_features: int
    n_covariates: int
    hidden: int = 128
    mlp: tuple[int, ...] = (64, 32)
    n_classes: int = 3
    embedding_dim: int = 0

    @classmethod
    def for_variant(cls, variant: str, n_features: int, n_covariates: int, embedding_dim: int | None = None, **kw) -> "ModelShape":
        variant = resolve_variant(variant)
        kind = embedding_kind(variant)
        if kind is None:
            dim = 0
        elif kind == "timeconcat":
            dim = 1
        else:
            dim = DEFAULT_DIM[kind] if embedding_dim is None else embedding_dim
        return cls(variant=variant, n_features=n_features, n_covariates=n_covariates, embedding_dim=dim, **kw)

    @property
    def input_dim(self) -> int:
        return self.n_features + self.embedding_dim

    def array_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = [
            ("lstm_W", (self.input_dim + self.hidden, 4 * self.hidden)),
            ("lstm_b", (4 * self.hidden,)),
        ]
        fan_in = self.hidden + self.n_covariates
        for k, width in enumerate(tuple(self.mlp) + (self.n_classes,)):
            shapes.append((f"dense{k}_W", (fan_in, width)))
            shapes.append((f"dense{k}_b", (width,)))
            fan_in = width
        kind = embedding_kind(self.variant)
        if kind in ("time2vec", "ema2vec"):
            shapes.append(("emb_w", (self.embedding_dim,)))
            shapes.append(("emb_b", (self.embedding_dim,)))
        return shapes

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n_features": self.n_features,
            "n_covariates": self.n_covariates,
            "hidden": self.hidden,
            "mlp": list(self.mlp),
            "n_classes": self.n_classes,
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelShape":
        return cls(
            variant=d["variant"],
            n_features=int(d["n_features"]),
            n_covariates=int(d["n_covariates"]),
            hidden=int(d["hidden"]),
            mlp=tuple(int(x) for x in d["mlp"]),
            n_classes=int(d["n_classes"]),
            embedding_dim=int(d["embedding_dim"]),
        )


@dataclass
class ModelParams:
    shape: ModelShape
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.shape.array_shapes()
        if [n for n, _ in expected] != list(self.arrays):
            raise ContractViolationError(f"parameter names {list(self.arrays)} do not match shape {[n for n, _ in expected]}")
        for name, shp in expected:
            if self.arrays[name].shape != shp:
                raise ContractViolationError(f"{name}: expected shape {shp}, got {self.arrays[name].shape}")

    @property
    def variant(self) -> str:
        return self.shape.variant

    @property
    def n_dense(self) -> int:
        return len(self.shape.mlp) + 1

    @property
    def embedding(self) -> TimeEmbeddingParams | None:
        kind = embedding_kind(self.variant)
        if kind is None:
            return None
        if kind == "timeconcat":
            return TimeEmbeddingParams("timeconcat", np.zeros(0), np.zeros(0))
        return TimeEmbeddingParams(kind, self.arrays["emb_w"], self.arrays["emb_b"])

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays.values()])

    @classmethod
    def unflatten(cls, shape: ModelShape, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        arrays = {}
        pos = 0
        for name, shp in shape.array_shapes():
            n = int(np.prod(shp))
            arrays[name] = flat[pos : pos + n].reshape(shp).copy()
            pos += n
        if pos != flat.size:
            raise ContractViolationError(f"flat vector has {flat.size} entries, shape needs {pos}")
        return cls(shape, arrays)

    def embedding_mask(self) -> np.ndarray:
        """Boolean mask over the flat vector selecting embedding parameters."""
        parts = [np.full(a.size, name.startswith("emb_")) for name, a in self.arrays.items()]
        return np.concatenate(parts)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())


def init_params(shape: ModelShape, rng: np.random.Generator) -> ModelParams:
    """LSTM uniform(+-1/sqrt(hidden)) with forget bias 1; dense He-uniform; zero biases."""
    arrays: dict[str, np.ndarray] = {}
    bound = 1.0 / np.sqrt(shape.hidden)
    for name, shp in shape.array_shapes():
        if name == "lstm_W":
            arrays[name] = rng.uniform(-bound, bound, shp)
        elif name == "lstm_b":
            b = np.zeros(shp)
            b[shape.hidden : 2 * shape.hidden] = 1.0
            arrays[name] = b
        elif name.endswith("_W"):
            lim = np.sqrt(6.0 / shp[0])
            arrays[name] = rng.uniform(-lim, lim, shp)
        elif name.startswith("dense"):
            arrays[name] = np.zeros(shp)
    kind = embedding_kind(shape.variant)
    if kind in ("time2vec", "ema2vec"):
        emb = init_embedding_params(kind, shape.embedding_dim, rng)
        arrays["emb_w"] = emb.weights
        arrays["emb_b"] = emb.biases
    return ModelParams(shape, arrays)


def zero_params(shape: ModelShape) -> ModelParams:
    return ModelParams(shape, {name: np.zeros(shp) for name, shp in shape.array_shapes()})


# ---------------------------------------------------------------------------
# Input preparation


@dataclass
class Normalizer:
    """Per-feature z-scoring statistics, fitted on training data only."""

    feat_mean: np.ndarray
    feat_std: np.ndarray
    cov_mean: np.ndarray
    cov_std: np.ndarray

    @classmethod
    def identity(cls, n_features: int, n_covariates: int) -> "Normalizer":
        return cls(np.zeros(n_features), np.ones(n_features), np.zeros(n_covariates), np.ones(n_covariates))

    @classmethod
    def fit(cls, samples: Sequence[LongitudinalSample], variant: str) -> "Normalizer":
        variant = resolve_variant(variant)
        if variant == "lstm_day":
            rows = [np.where(s.target_day.mask, np.nan, s.target_day.values) for s in samples]
        else:
            rows = [s.daily[s.step_mask] for s in samples]
        x = np.concatenate(rows, axis=0)
        cov = np.array([s.covariates for s in samples])
        return cls(*_mean_std(x), *_mean_std(cov))

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("feat_mean", "feat_std", "cov_mean", "cov_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(*(np.array(d[k], dtype=np.float64) for k in ("feat_mean", "feat_std", "cov_mean", "cov_std")))


def _mean_std(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    finite = np.isfinite(x)
    n = finite.sum(axis=0)
    xz = np.where(finite, x, 0.0)
    mean = np.where(n > 0, xz.sum(axis=0) / np.maximum(n, 1), 0.0)
    var = np.where(n > 0, (np.where(finite, x - mean, 0.0) ** 2).sum(axis=0) / np.maximum(n, 1), 1.0)
    std = np.sqrt(var)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


@dataclass
class Batch:
    """Model-ready arrays in feed order (oldest step first).

    ``tau`` holds scaled delays (NaN where masked); ``mask`` is True for
    steps the LSTM consumes.
    """

    x: np.ndarray  # (B, S, n_features)
    tau: np.ndarray  # (B, S)
    mask: np.ndarray  # (B, S)
    cov: np.ndarray  # (B, C)
    labels: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.x[idx], self.tau[idx], self.mask[idx], self.cov[idx], self.labels[idx])


def make_batch(samples: Sequence[LongitudinalSample], variant: str, norm: Normalizer | None = None) -> Batch:
    variant = resolve_variant(variant)
    if not samples:
        raise ContractViolationError("cannot build a batch from zero samples")
    if variant == "lstm_day":
        if any(s.target_day is None for s in samples):
            raise ContractViolationError("lstm_day needs the raw target day sequence on every sample")
        x = np.stack([np.where(s.target_day.mask, np.nan, s.target_day.values) for s in samples])
        mask = np.ones(x.shape[:2], dtype=bool)
        tau = np.zeros(x.shape[:2])
    else:
        x = np.stack([s.daily[::-1] for s in samples])
        mask = np.stack([s.step_mask[::-1] for s in samples])
        tau = np.stack([s.deltas[::-1] for s in samples])
    cov = np.stack([s.covariates for s in samples])
    if norm is not None:
        x = (x - norm.feat_mean) / norm.feat_std
        cov = (cov - norm.cov_mean) / norm.cov_std
    x = np.where(np.isfinite(x), x, 0.0)
    cov = np.where(np.isfinite(cov), cov, 0.0)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return Batch(x, tau, mask, cov, labels)


# ---------------------------------------------------------------------------
# Forward / backward


def _sigmoid(x):
    # exp overflow for very negative x gives the correct limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _dropout_masks(shapes, rates, seed) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    masks = []
    for shp, p in zip(shapes, rates):
        if p <= 0:
            masks.append(np.ones(shp))
        else:
            masks.append((rng.random(shp) >= p) / (1.0 - p))
    return masks


@dataclass
class ForwardTrace:
    params: ModelParams
    mode: str
    batch: Batch
    steps: list[dict] = field(default_factory=list)
    emb_cache: dict | None = None
    z: np.ndarray | None = None
    layer_inputs: list[np.ndarray] = field(default_factory=list)
    pre_acts: list[np.ndarray] = field(default_factory=list)
    dropout: list[np.ndarray] | None = None
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None


def forward_batch(
    params: ModelParams,
    batch: Batch,
    mode: str = "eval",
    rng_seed: int | None = None,
    dropout: Sequence[float] = DEFAULT_DROPOUT,
) -> tuple[np.ndarray, ForwardTrace]:
    """Class probabilities ``(B, n_classes)`` and the trace for :func:`backward_batch`."""
    if mode not in ("train", "eval"):
        raise ContractViolationError(f"mode must be 'train' or 'eval', got {mode!r}")
    shape = params.shape
    B, S, F = batch.x.shape
    if F != shape.n_features or batch.cov.shape[1] != shape.n_covariates:
        raise ContractViolationError(
            f"batch has {F} features/{batch.cov.shape[1]} covariates, model expects "
            f"{shape.n_features}/{shape.n_covariates}"
        )
    empty = ~batch.mask.any(axis=1)
    if np.any(empty):
        raise UnusableSampleError(f"sample(s) {np.flatnonzero(empty).tolist()} have every step masked")

    trace = ForwardTrace(params=params, mode=mode, batch=batch)
    inp = batch.x
    emb = params.embedding
    if emb is not None:
        tau = np.where(batch.mask, batch.tau, 0.0)
        e, trace.emb_cache = embed_forward(tau, emb)
        e = np.where(batch.mask[..., None], e, 0.0)
        inp = np.concatenate([inp, e], axis=2)

    W = params.arrays["lstm_W"]
    b = params.arrays["lstm_b"]
    Hd = shape.hidden
    h = np.zeros((B, Hd))
    c = np.zeros((B, Hd))
    for t in range(S):
        m = batch.mask[:, t][:, None]
        xh = np.concatenate([inp[:, t], h], axis=1)
        a = xh @ W + b
        gi = _sigmoid(a[:, :Hd])
        gf = _sigmoid(a[:, Hd : 2 * Hd])
        gg = np.tanh(a[:, 2 * Hd : 3 * Hd])
        go = _sigmoid(a[:, 3 * Hd :])
        c_new = gf * c + gi * gg
        tc = np.tanh(c_new)
        h_new = go * tc
        trace.steps.append({"xh": xh, "c_prev": c, "i": gi, "f": gf, "g": gg, "o": go, "tc": tc, "m": m})
        h = np.where(m, h_new, h)
        c = np.where(m, c_new, c)
    trace.z = h

    n_dense = params.n_dense
    if mode == "train":
        shapes = [(B, Hd)] + [(B, w) for w in shape.mlp]
        trace.dropout = _dropout_masks(shapes, list(dropout)[: len(shapes)], rng_seed)
    act = h * trace.dropout[0] if trace.dropout else h
    act = np.concatenate([act, batch.cov], axis=1)
    for k in range(n_dense):
        trace.layer_inputs.append(act)
        pre = act @ params.arrays[f"dense{k}_W"] + params.arrays[f"dense{k}_b"]
        if k < n_dense - 1:
            trace.pre_acts.append(pre)
            act = np.maximum(pre, 0.0)
            if trace.dropout:
                act = act * trace.dropout[k + 1]
        else:
            logits = pre
    trace.logits = logits
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    probs = ex / ex.sum(axis=1, keepdims=True)
    trace.probs = probs
    return probs, trace


def loss_from_probs(probs: np.ndarray, labels, class_weights: Sequence[float] | None = None) -> float:
    """(Weighted) mean cross-entropy ``-log p[label]``."""
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    with np.errstate(divide="ignore"):
        nll = -np.log(probs[np.arange(labels.size), labels])
    if class_weights is None:
        return float(nll.mean())
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    return float((w * nll).sum() / w.sum())


def loss(probabilities: np.ndarray, label: int, class_weights: Sequence[float] | None = None) -> float:
    return loss_from_probs(probabilities, [label], class_weights)


def backward_batch(
    trace: ForwardTrace,
    labels,
    params: ModelParams,
    class_weights: Sequence[float] | None = None,
) -> np.ndarray:
    """Flat gradient of the (weighted) mean batch loss."""
    if trace.params is not params or trace.probs is None:
        raise ContractViolationError("trace was produced with different parameters")
    shape = params.shape
    labels = np.asarray(labels, dtype=np.int64)
    B = trace.probs.shape[0]
    if labels.shape != (B,):
        raise ContractViolationError(f"expected {B} labels, got shape {labels.shape}")
    if class_weights is None:
        w = np.full(B, 1.0 / B)
    else:
        w = np.asarray(class_weights, dtype=np.float64)[labels]
        w = w / w.sum()
    grads = {name: np.zeros_like(a) for name, a in params.arrays.items()}

    d = trace.probs.copy()
    d[np.arange(B), labels] -= 1.0
    d *= w[:, None]
    n_dense = params.n_dense
    for k in reversed(range(n_dense)):
        Wk = params.arrays[f"dense{k}_W"]
        grads[f"dense{k}_W"] = trace.layer_inputs[k].T @ d
        grads[f"dense{k}_b"] = d.sum(axis=0)
        d = d @ Wk.T
        if k > 0:
            if trace.dropout:
                d = d * trace.dropout[k]
            d = d * (trace.pre_acts[k - 1] > 0)
    Hd = shape.hidden
    dh = d[:, :Hd]
    if trace.dropout:
        dh = dh * trace.dropout[0]
    dc = np.zeros_like(dh)

    W = params.arrays["lstm_W"]
    Wx, Wh = W[: shape.input_dim], W[shape.input_dim :]
    dW = grads["lstm_W"]
    db = grads["lstm_b"]
    S = len(trace.steps)
    emb = params.embedding
    d_emb = np.zeros(trace.batch.mask.shape + (shape.embedding_dim,)) if emb is not None else None
    for t in reversed(range(S)):
        st = trace.steps[t]
        m = st["m"]
        gi, gf, gg, go, tc = st["i"], st["f"], st["g"], st["o"], st["tc"]
        dct = dc + dh * go * (1.0 - tc * tc)
        da = np.concatenate(
            [
                dct * gg * gi * (1.0 - gi),
                dct * st["c_prev"] * gf * (1.0 - gf),
                dct * gi * (1.0 - gg * gg),
                dh * tc * go * (1.0 - go),
            ],
            axis=1,
        )
        da = np.where(m, da, 0.0)
        dW += st["xh"].T @ da
        db += da.sum(axis=0)
        dh = np.where(m, da @ Wh.T, dh)
        dc = np.where(m, dct * gf, dc)
        if d_emb is not None:
            d_emb[:, t] = da @ Wx[shape.n_features :].T
    if emb is not None and emb.kind != "timeconcat":
        gw, gb = embed_backward(trace.emb_cache, d_emb)
        grads["emb_w"] = gw
        grads["emb_b"] = gb
    return np.concatenate([g.reshape(-1) for g in grads.values()])


def predict_proba(params: ModelParams, batch: Batch, chunk: int = 512) -> np.ndarray:
    """Eval-mode probabilities, computed in chunks."""
    out = [forward_batch(params, batch.subset(slice(i, i + chunk)), "eval")[0] for i in range(0, len(batch), chunk)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Single-sample API


def forward(
    sample: LongitudinalSample,
    params: ModelParams,
    mode: str = "eval",
    rng_seed: int | None = None,
    norm: Normalizer | None = None,
    dropout: Sequence[float] = DEFAULT_DROPOUT,
) -> tuple[np.ndarray, ForwardTrace]:
    batch = make_batch([sample], params.variant, norm)
    probs, trace = forward_batch(params, batch, mode, rng_seed, dropout)
    return probs[0], trace


def backward(trace: ForwardTrace, label: int, params: ModelParams, class_weights: Sequence[float] | None = None) -> np.ndarray:
    return backward_batch(trace, np.array([label]), params, class_weights)


def forward_standard(
    day,
    params: ModelParams,
    covariates: np.ndarray,
    mode: str = "eval",
    rng_seed: int | None = None,
    norm: Normalizer | None = None,
    dropout: Sequence[float] = DEFAULT_DROPOUT,
) -> np.ndarray:
    """Day-sequence baseline over the raw ``T`` steps of one day."""
    if params.variant != "lstm_day":
        raise ContractViolationError(f"forward_standard needs an lstm_day model, got {params.variant}")
    x = np.where(day.mask, np.nan, day.values)[None]
    cov = np.asarray(covariates, dtype=np.float64)[None]
    if norm is not None:
        x = (x - norm.feat_mean) / norm.feat_std
        cov = (cov - norm.cov_mean) / norm.cov_std
    x = np.where(np.isfinite(x), x, 0.0)
    batch = Batch(x, np.zeros(x.shape[:2]), np.ones(x.shape[:2], dtype=bool), cov, np.zeros(1, dtype=np.int64))
    return forward_batch(params, batch, mode, rng_seed, dropout)[0][0]

"""Single-document JSON checkpoints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointMismatchError
from ..model import ModelParams, ModelShape, Normalizer, resolve_variant

FORMAT = "ema2vec-checkpoint"
VERSION = 1


def config_hash(config: dict | None) -> str:
    blob = json.dumps(config or {}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Checkpoint:
    params: ModelParams
    normalizer: Normalizer | None = None
    config: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def checkpoint_to_json(ckpt: Checkpoint) -> str:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "variant": ckpt.params.variant,
        "shape": ckpt.params.shape.to_dict(),
        "n_params": int(ckpt.params.size),
        "params": [float(v) for v in ckpt.params.flatten()],
        "normalization": None if ckpt.normalizer is None else ckpt.normalizer.to_dict(),
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
    }
    return json.dumps(doc, sort_keys=True, allow_nan=False) + "\n"


def save_checkpoint(params: ModelParams | Checkpoint, path: str | Path, normalizer: Normalizer | None = None,
                    config: dict | None = None) -> None:
    ckpt = params if isinstance(params, Checkpoint) else Checkpoint(params, normalizer, config or {})
    Path(path).write_text(checkpoint_to_json(ckpt))


def load_checkpoint(path: str | Path, variant: str | None = None, shape: ModelShape | None = None) -> Checkpoint:
    """Load a checkpoint, refusing on format, version, variant or shape mismatch."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointMismatchError(f"{path}: not a JSON document ({exc.msg})") from None
    if doc.get("format") != FORMAT:
        raise CheckpointMismatchError(f"{path}: not an {FORMAT} file")
    if doc.get("version") != VERSION:
        raise CheckpointMismatchError(f"{path}: checkpoint version {doc.get('version')} != supported {VERSION}")
    stored = ModelShape.from_dict(doc["shape"])
    if stored.variant != doc["variant"]:
        raise CheckpointMismatchError(f"{path}: variant field disagrees with shape metadata")
    if variant is not None and resolve_variant(variant) != stored.variant:
        raise CheckpointMismatchError(f"{path}: checkpoint variant {stored.variant!r}, requested {resolve_variant(variant)!r}")
    if shape is not None and shape != stored:
        raise CheckpointMismatchError(f"{path}: shape {stored.to_dict()} does not match requested {shape.to_dict()}")
    flat = np.array(doc["params"], dtype=np.float64)
    expected = sum(int(np.prod(s)) for _, s in stored.array_shapes())
    if flat.size != expected or doc.get("n_params") != expected:
        raise CheckpointMismatchError(f"{path}: {flat.size} parameters stored, shape metadata needs {expected}")
    norm = doc.get("normalization")
    normalizer = None if norm is None else Normalizer.from_dict(norm)
    if normalizer is not None and (normalizer.feat_mean.size != stored.n_features or normalizer.cov_mean.size != stored.n_covariates):
        raise CheckpointMismatchError(f"{path}: normalisation statistics do not match the model input sizes")
    config = doc.get("config") or {}
    if doc.get("config_hash") != config_hash(config):
        raise CheckpointMismatchError(f"{path}: config hash mismatch (file edited or corrupted)")
    return Checkpoint(ModelParams.unflatten(stored, flat), normalizer, config)

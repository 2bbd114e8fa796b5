"""Per-student chronological fold assignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolationError
from .features import LongitudinalSample

log = logging.getLogger(__name__)


@dataclass
class FoldSplit:
    """``blocks[student][i]`` holds that student's sample indices in fold ``i``, in time order."""

    k: int
    blocks: dict[str, list[np.ndarray]]
    times: np.ndarray  # target_time per dataset index
    warnings: list[str]

    def fold_indices(self, i: int) -> np.ndarray:
        parts = [b[i] for b in self.blocks.values()]
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)

    def assignment(self, test_fold: int, val_fraction: float = 1 / 8, strict_causal: bool = False):
        """``(train, validation, test)`` index arrays for one test fold.

        Validation is the chronologically last ``val_fraction`` of each
        student's training data.  ``strict_causal`` restricts training to
        folds that precede the test fold.
        """
        if not 0 <= test_fold < self.k:
            raise ContractViolationError(f"test fold {test_fold} outside 0..{self.k - 1}")
        train, val, test = [], [], []
        for blocks in self.blocks.values():
            test.append(blocks[test_fold])
            folds = range(test_fold) if strict_causal else [i for i in range(self.k) if i != test_fold]
            pool = np.concatenate([blocks[i] for i in folds]) if folds else np.zeros(0, dtype=np.int64)
            pool = pool[np.argsort(self.times[pool], kind="stable")]
            n_val = int(round(val_fraction * pool.size))
            if pool.size >= 2 and n_val == 0:
                n_val = 1
            train.append(pool[: pool.size - n_val])
            val.append(pool[pool.size - n_val :])
        cat = lambda parts: np.sort(np.concatenate(parts)).astype(np.int64)
        return cat(train), cat(val), cat(test)


def chronological_folds(samples: Sequence[LongitudinalSample], k: int = 5) -> FoldSplit:
    """Split every student's samples into ``k`` near-equal contiguous time blocks."""
    if k < 2:
        raise ContractViolationError("cross validation needs k >= 2 folds")
    times = np.array([s.target_time for s in samples], dtype=np.int64)
    by_student: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_student.setdefault(s.student_id, []).append(i)
    blocks = {}
    warnings = []
    for sid, idx in by_student.items():
        idx = np.array(idx, dtype=np.int64)
        idx = idx[np.argsort(times[idx], kind="stable")]
        if idx.size < k:
            msg = f"student {sid} has {idx.size} samples < k={k}; contributes to fewer folds"
            warnings.append(msg)
            log.warning(msg)
        blocks[sid] = [np.asarray(b, dtype=np.int64) for b in np.array_split(idx, k)]
    return FoldSplit(k, blocks, times, warnings)

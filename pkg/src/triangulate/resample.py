"""Patient-level nonparametric bootstrap shared by the estimators and the
heterogeneity test."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng
from .cohort import Cohort
from .errors import TooManyFailedReplicates, TriangulateError
from .parallel import ordered_map

MAX_FAILED_FRACTION = 0.10


@dataclass(frozen=True)
class _Replicate:
    cohort: Cohort
    estimators: tuple
    seed: int

    def __call__(self, b: int) -> np.ndarray:
        rows = rng.bootstrap_rows(self.cohort.n, self.seed, b)
        sample = self.cohort.subset(rows)
        out = np.empty(len(self.estimators))
        for j, fn in enumerate(self.estimators):
            try:
                out[j] = fn(sample)
            except (TriangulateError, np.linalg.LinAlgError, ValueError):
                return np.full(len(self.estimators), np.nan)
        return out


def bootstrap_replicates(
    cohort: Cohort,
    estimators: Sequence[Callable[[Cohort], float]],
    B: int,
    seed: int,
    threads: int = 1,
) -> tuple[np.ndarray, int]:
    """Run every estimator on each of ``B`` shared resamples of patients.

    Returns the ``(B_ok, k)`` matrix of replicate estimates (row order follows
    the replicate index) and the number of dropped replicates. A replicate in
    which any estimator fails is dropped as a whole; more than 10% failures
    abort.
    """
    if B < 2:
        raise ValueError("need at least two bootstrap replicates")
    task = _Replicate(cohort, tuple(estimators), int(seed))
    rows = np.array(ordered_map(task, range(B), threads))
    ok = np.all(np.isfinite(rows), axis=1)
    failed = int(B - ok.sum())
    if failed > MAX_FAILED_FRACTION * B:
        raise TooManyFailedReplicates(failed, B)
    return rows[ok], failed

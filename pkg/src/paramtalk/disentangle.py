"""Data-driven selection of lip / eye / global expression subspaces.

Each region is edited offline (lips closed, eyes closed) and the per-dimension
sensitivity ``mean|original - edited| / std(original)`` ranks the coefficients.
``aggregate="max"`` uses the largest per-frame change instead of the mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from paramtalk.types import ExpressionSequence, SubspacePartition

REGIONS = ("lip", "eye")
AGGREGATES = ("mean", "max")
SIGMA_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class RegionDeltaStats:
    region: str
    delta: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ValueError(f"region must be one of {REGIONS}, got {self.region!r}")
        delta = np.asarray(self.delta, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if delta.ndim != 1 or delta.shape != sigma.shape:
            raise ValueError(f"delta/sigma must be equal-length vectors, got {delta.shape}, {sigma.shape}")
        if np.any(delta < 0) or np.any(sigma <= 0):
            raise ValueError("delta must be >= 0 and sigma > 0")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_dims(self) -> int:
        return self.delta.shape[0]

    @property
    def ratio(self) -> np.ndarray:
        return self.delta / self.sigma


def compute_delta_stats(
    original: Sequence[ExpressionSequence],
    edited: Sequence[ExpressionSequence],
    region: str,
    aggregate: str = "mean",
) -> RegionDeltaStats:
    """Pool ``|original - edited|`` and ``original`` over every frame of every pair."""
    if aggregate not in AGGREGATES:
        raise ValueError(f"aggregate must be one of {AGGREGATES}, got {aggregate!r}")
    if len(original) == 0:
        raise ValueError("empty corpus")
    if len(original) != len(edited):
        raise ValueError(f"{len(original)} originals but {len(edited)} edited sequences")
    n = original[0].dim
    abs_sum = np.zeros(n)
    abs_max = np.zeros(n)
    frames = 0
    for k, (o, e) in enumerate(zip(original, edited)):
        if o.values.shape != e.values.shape or o.dim != n:
            raise ValueError(f"pair {k}: shape mismatch {o.values.shape} vs {e.values.shape}")
        diff = np.abs(o.values - e.values)
        abs_sum += diff.sum(axis=0)
        abs_max = np.maximum(abs_max, diff.max(axis=0))
        frames += o.frames
    pooled = np.concatenate([o.values for o in original], axis=0)
    sigma = np.maximum(pooled.std(axis=0), SIGMA_FLOOR)
    delta = abs_sum / frames if aggregate == "mean" else abs_max
    return RegionDeltaStats(region, delta, sigma)


def rank_dims(stats: RegionDeltaStats) -> list[int]:
    """All dimensions by descending sensitivity; ties go to the lower index."""
    ratio = stats.ratio
    return sorted(range(stats.n_dims), key=lambda i: (-ratio[i], i))


def select_region_dims(stats: RegionDeltaStats, k: int) -> tuple[int, ...]:
    if not 1 <= k <= stats.n_dims:
        raise ValueError(f"K must be in [1, {stats.n_dims}], got {k}")
    return tuple(sorted(rank_dims(stats)[:k]))


def build_partition(
    lip_stats: RegionDeltaStats,
    eye_stats: RegionDeltaStats,
    k_lip: int = 13,
    k_eye: int = 8,
) -> SubspacePartition:
    """Select lip and eye subspaces; the rest becomes the global subspace.

    A dimension picked by both regions stays with the one whose ratio is
    larger (lip on ties); the other region refills from its own ranking.
    """
    n = lip_stats.n_dims
    if eye_stats.n_dims != n:
        raise ValueError(f"stats disagree on N: {n} vs {eye_stats.n_dims}")
    if k_lip < 1 or k_eye < 1 or k_lip + k_eye > n:
        raise ValueError(f"need K_lip, K_eye >= 1 and K_lip + K_eye <= {n}, got {k_lip}, {k_eye}")

    ranks = {"lip": rank_dims(lip_stats), "eye": rank_dims(eye_stats)}
    ratios = {"lip": lip_stats.ratio, "eye": eye_stats.ratio}
    chosen = {"lip": set(ranks["lip"][:k_lip]), "eye": set(ranks["eye"][:k_eye])}
    cursor = {"lip": k_lip, "eye": k_eye}

    for i in sorted(chosen["lip"] & chosen["eye"]):
        loser = "eye" if ratios["lip"][i] >= ratios["eye"][i] else "lip"
        chosen[loser].discard(i)
        order = ranks[loser]
        while order[cursor[loser]] in chosen["lip"] or order[cursor[loser]] in chosen["eye"]:
            cursor[loser] += 1
        chosen[loser].add(order[cursor[loser]])
        cursor[loser] += 1

    return SubspacePartition(n_dims=n, lip=tuple(chosen["lip"]), eye=tuple(chosen["eye"]))

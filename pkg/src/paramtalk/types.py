"""Value types shared across the package.

All types are frozen after construction; array fields are stored as read-only
float64 copies so they can be shared between threads without locking.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ExpressionSequence:
    """Per-frame 3DMM expression coefficients, shape ``(frames, dim)``."""

    values: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        arr = _frozen_array(self.values, 2, "expression values")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"expression sequence needs >=1 frame and dim, got {arr.shape}")
        if not (self.fps > 0):
            raise ValueError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "fps", float(self.fps))

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def duration(self) -> float:
        return self.frames / self.fps

    def columns(self, idx: Sequence[int]) -> np.ndarray:
        return self.values[:, list(idx)]


@dataclass(frozen=True, eq=False)
class AudioFeatureSequence:
    """Per-frame audio features, shape ``(frames, dim)``, frame-aligned with expressions."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.values, 2, "audio values")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"audio sequence needs >=1 frame and dim, got {arr.shape}")
        object.__setattr__(self, "values", arr)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SubspacePartition:
    """Disjoint lip / eye / global index sets covering ``range(n_dims)``.

    Indices are 0-based and stored sorted.
    """

    n_dims: int
    lip: tuple[int, ...]
    eye: tuple[int, ...]
    global_: tuple[int, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        lip = tuple(sorted(int(i) for i in self.lip))
        eye = tuple(sorted(int(i) for i in self.eye))
        if self.global_ is None:
            taken = set(lip) | set(eye)
            glob = tuple(i for i in range(self.n_dims) if i not in taken)
        else:
            glob = tuple(sorted(int(i) for i in self.global_))
        object.__setattr__(self, "lip", lip)
        object.__setattr__(self, "eye", eye)
        object.__setattr__(self, "global_", glob)
        self.validate()

    def validate(self) -> None:
        sets = {"lip": set(self.lip), "eye": set(self.eye), "global": set(self.global_)}
        for name, idx in zip(sets, (self.lip, self.eye, self.global_)):
            if len(sets[name]) != len(idx):
                raise ValueError(f"{name} indices contain duplicates")
        if sets["lip"] & sets["eye"] or sets["lip"] & sets["global"] or sets["eye"] & sets["global"]:
            raise ValueError("partition subsets overlap")
        union = sets["lip"] | sets["eye"] | sets["global"]
        if union != set(range(self.n_dims)):
            raise ValueError(f"partition does not cover 0..{self.n_dims - 1}")

    def regions(self) -> dict[str, tuple[int, ...]]:
        """Region name to index tuple, in the order eye, lip, global."""
        return {"eye": self.eye, "lip": self.lip, "global": self.global_}

    def to_dict(self) -> dict:
        return {
            "n_dims": self.n_dims,
            "indexing": 0,
            "lip": list(self.lip),
            "eye": list(self.eye),
            "global": list(self.global_),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubspacePartition":
        base = int(d.get("indexing", 0))
        shift = lambda xs: [int(i) - base for i in xs]  # noqa: E731
        return cls(
            n_dims=int(d["n_dims"]),
            lip=tuple(shift(d["lip"])),
            eye=tuple(shift(d["eye"])),
            global_=tuple(shift(d["global"])) if "global" in d else None,
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-dimension mean/std mapping expressions to the diffusion latent."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = _frozen_array(self.mean, 1, "mean")
        std = _frozen_array(self.std, 1, "std")
        if mean.shape != std.shape:
            raise ValueError(f"mean/std shape mismatch: {mean.shape} vs {std.shape}")
        if np.any(std <= 0):
            raise ValueError("std components must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_sequences(cls, seqs: Iterable[ExpressionSequence], floor: float = 1e-6) -> "NormStats":
        stacked = np.concatenate([s.values for s in seqs], axis=0)
        return cls(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), floor))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


@dataclass(frozen=True, eq=False)
class LatentSequence:
    """Normalized expression sequence plus the stats needed to undo it."""

    values: np.ndarray
    stats: NormStats
    fps: float = 25.0

    def __post_init__(self):
        arr = _frozen_array(self.values, 2, "latent values")
        if arr.shape[1] != self.stats.dim:
            raise ValueError(f"latent dim {arr.shape[1]} != stats dim {self.stats.dim}")
        object.__setattr__(self, "values", arr)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def normalize(e: ExpressionSequence, stats: NormStats) -> LatentSequence:
    if stats.dim != e.dim:
        raise ValueError(f"stats dim {stats.dim} does not match expression dim {e.dim}")
    return LatentSequence((e.values - stats.mean) / stats.std, stats, e.fps)


def denormalize(z: LatentSequence) -> ExpressionSequence:
    return ExpressionSequence(z.values * z.stats.std + z.stats.mean, z.fps)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step noise variances and their cumulative signal retention."""

    beta_step: np.ndarray

    def __post_init__(self):
        beta = _frozen_array(self.beta_step, 1, "beta_step")
        if beta.size < 1:
            raise ValueError("schedule needs at least one step")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("beta_step entries must lie in (0, 1)")
        object.__setattr__(self, "beta_step", beta)
        alpha_bar = np.cumprod(1.0 - beta)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def T(self) -> int:
        return self.beta_step.shape[0]

    @property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        # beta~_t = beta_t (1 - abar_{t-1}) / (1 - abar_t)
        return self.beta_step * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)


def linear_schedule(T: int = 400, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    return NoiseSchedule(np.linspace(beta_min, beta_max, T))

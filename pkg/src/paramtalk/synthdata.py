"""Synthetic talking-face corpora with known ground truth.

Each sequence has four kinds of columns:

* lip: a fixed random linear map of the audio, delayed by ``lip_lag`` frames
  and smoothed with a width-3 moving average (so lip[t] depends on audio < t);
* eye: a per-dimension rest level with blink dips at renewal-process onsets;
* global: a slow smoothed random walk;
* audio: white Gaussian noise smoothed with the same moving average.

Everything derives from ``seed`` so the corpus can be rebuilt bit-exactly from
the ground-truth record.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from paramtalk.types import AudioFeatureSequence, ExpressionSequence, SubspacePartition

SMOOTH_WIDTH = 3
# Streams of the seed tree; sequences use their own index.
_LAYOUT_STREAM = 1_000_001
_MAP_STREAM = 1_000_002


@dataclass(frozen=True)
class SynthSpec:
    n_dims: int = 64
    k_lip: int = 13
    k_eye: int = 8
    planted_lip: Optional[tuple[int, ...]] = None
    planted_eye: Optional[tuple[int, ...]] = None
    audio_dim: int = 32
    fps: float = 25.0
    blink_rate: float = 0.35
    blink_duration: int = 5
    seq_len: int = 500
    lip_lag: int = 2
    walk_step: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_dims < 1 or self.audio_dim < 1 or self.seq_len < 1:
            raise ValueError("n_dims, audio_dim and seq_len must be positive")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.blink_rate < 0:
            raise ValueError("blink_rate must be >= 0")
        if self.blink_duration < 1:
            raise ValueError("blink_duration must be >= 1 frame")
        if self.blink_rate > 0 and 1.0 / self.blink_rate <= self.refractory_s:
            raise ValueError(
                f"blink_rate {self.blink_rate}/s too high for a {self.refractory_s:.3f} s refractory period"
            )
        lip, eye = self.planted_sets()
        if set(lip) & set(eye):
            raise ValueError("planted lip and eye sets overlap")
        if any(not 0 <= i < self.n_dims for i in lip + eye):
            raise ValueError("planted index out of range")

    @property
    def refractory_s(self) -> float:
        # a blink plus a few open frames; keeps dips from merging
        return (self.blink_duration + 4) / self.fps

    def planted_sets(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if self.planted_lip is not None and self.planted_eye is not None:
            return tuple(sorted(self.planted_lip)), tuple(sorted(self.planted_eye))
        if self.k_lip + self.k_eye > self.n_dims:
            raise ValueError("k_lip + k_eye exceeds n_dims")
        perm = np.random.default_rng([self.seed, _LAYOUT_STREAM]).permutation(self.n_dims)
        fixed_eye = set(self.planted_eye or ())
        perm = [int(i) for i in perm if int(i) not in fixed_eye]
        lip = self.planted_lip or tuple(sorted(perm[: self.k_lip]))
        rest = [int(i) for i in perm if int(i) not in set(lip)]
        eye = self.planted_eye or tuple(sorted(rest[: self.k_eye]))
        return tuple(sorted(lip)), tuple(sorted(eye))

    def partition(self) -> SubspacePartition:
        lip, eye = self.planted_sets()
        return SubspacePartition(self.n_dims, lip, eye)

    def to_dict(self) -> dict:
        d = asdict(self)
        lip, eye = self.planted_sets()
        d["planted_lip"], d["planted_eye"] = list(lip), list(eye)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthSpec keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("planted_lip", "planted_eye"):
            if d.get(key) is not None:
                d[key] = tuple(int(i) for i in d[key])
        return cls(**d)


@dataclass
class SynthSample:
    name: str
    audio: AudioFeatureSequence
    expression: ExpressionSequence
    blink_onsets: list[int] = field(default_factory=list)


@dataclass
class GroundTruth:
    spec: SynthSpec
    lip_map: np.ndarray  # (k_lip, audio_dim)
    eye_rest: np.ndarray
    eye_closed: np.ndarray
    blink_onsets: dict[str, list[int]]

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "lip_map": self.lip_map.tolist(),
            "eye_rest": self.eye_rest.tolist(),
            "eye_closed": self.eye_closed.tolist(),
            "blink_onsets": self.blink_onsets,
            "blink_profile": blink_profile(self.spec.blink_duration).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            spec=SynthSpec.from_dict(d["spec"]),
            lip_map=np.asarray(d["lip_map"], dtype=np.float64),
            eye_rest=np.asarray(d["eye_rest"], dtype=np.float64),
            eye_closed=np.asarray(d["eye_closed"], dtype=np.float64),
            blink_onsets={k: list(v) for k, v in d["blink_onsets"].items()},
        )


def moving_average(x: np.ndarray, width: int = SMOOTH_WIDTH) -> np.ndarray:
    """Centered moving average along axis 0 with zero padding (same length)."""
    kernel = np.ones(width) / width
    return np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="same"), 0, x)


def blink_profile(duration: int) -> np.ndarray:
    """Closure depth in (0, 1] for each frame of a blink."""
    k = np.arange(duration)
    return np.sin(np.pi * (k + 0.5) / duration)


def oracle_lip(audio: np.ndarray, lip_map: np.ndarray, lag: int) -> np.ndarray:
    """Lip trajectory implied by the planted map, frames before the start treated as zero."""
    pre = moving_average(audio @ lip_map.T)
    out = np.zeros_like(pre)
    if lag < len(pre):
        out[lag:] = pre[: len(pre) - lag]
    return out


def blink_onsets(spec: SynthSpec, rng: np.random.Generator) -> list[int]:
    """Onset frames of a dead-time renewal process with mean rate ``blink_rate``.

    Intervals are ``refractory + Exp``, with the exponential mean chosen so the
    long-run rate equals ``blink_rate``. The process is started well before
    frame 0 so the visible window sees the stationary regime.
    """
    if spec.blink_rate == 0:
        return []
    mean_gap = 1.0 / spec.blink_rate
    free = mean_gap - spec.refractory_s
    duration = spec.seq_len / spec.fps
    t = -10.0 * mean_gap
    onsets = []
    while True:
        t += spec.refractory_s + rng.exponential(free)
        if t >= duration:
            break
        if t >= 0:
            onsets.append(int(np.floor(t * spec.fps)))
    return onsets


def _layout(spec: SynthSpec):
    lip, eye = spec.planted_sets()
    rng = np.random.default_rng([spec.seed, _MAP_STREAM])
    lip_map = rng.standard_normal((len(lip), spec.audio_dim)) * np.sqrt(3.0 / spec.audio_dim)
    sign = rng.choice([-1.0, 1.0], size=len(eye))
    eye_rest = sign * rng.uniform(0.5, 1.5, size=len(eye))
    eye_closed = eye_rest - sign * rng.uniform(1.0, 2.0, size=len(eye))
    glob_offset = rng.uniform(-0.5, 0.5, size=spec.n_dims)
    return lip_map, eye_rest, eye_closed, glob_offset


def _sequence(spec: SynthSpec, index: int, lip_map, eye_rest, eye_closed, glob_offset) -> SynthSample:
    lip, eye = spec.planted_sets()
    rng = np.random.default_rng([spec.seed, index])
    S = spec.seq_len

    audio = moving_average(rng.standard_normal((S, spec.audio_dim))) * np.sqrt(3.0)

    values = np.empty((S, spec.n_dims))
    walk = np.cumsum(rng.normal(0.0, spec.walk_step, size=(S, spec.n_dims)), axis=0)
    values[:] = moving_average(walk) + glob_offset

    values[:, list(lip)] = oracle_lip(audio, lip_map, spec.lip_lag)

    onsets = blink_onsets(spec, rng)
    depth = np.zeros(S)
    prof = blink_profile(spec.blink_duration)
    for on in onsets:
        end = min(S, on + spec.blink_duration)
        depth[on:end] = np.maximum(depth[on:end], prof[: end - on])
    values[:, list(eye)] = eye_rest + depth[:, None] * (eye_closed - eye_rest)

    name = f"seq_{index:04d}"
    return SynthSample(name, AudioFeatureSequence(audio), ExpressionSequence(values, spec.fps), onsets)


def generate(spec: SynthSpec, count: int) -> tuple[list[SynthSample], GroundTruth]:
    if count < 1:
        raise ValueError("count must be >= 1")
    lip_map, eye_rest, eye_closed, glob_offset = _layout(spec)
    samples = [_sequence(spec, k, lip_map, eye_rest, eye_closed, glob_offset) for k in range(count)]
    truth = GroundTruth(
        spec=spec,
        lip_map=lip_map,
        eye_rest=eye_rest,
        eye_closed=eye_closed,
        blink_onsets={s.name: s.blink_onsets for s in samples},
    )
    return samples, truth


def regenerate(truth: GroundTruth, count: int) -> list[SynthSample]:
    """Rebuild a corpus from its ground-truth record."""
    return generate(truth.spec, count)[0]


def generate_edit_pairs(
    spec: SynthSpec, corpus: list[SynthSample]
) -> list[tuple[ExpressionSequence, ExpressionSequence, ExpressionSequence]]:
    """(original, lips closed, eyes closed) for every sequence."""
    lip, eye = spec.planted_sets()
    _, _, eye_closed, _ = _layout(spec)
    out = []
    for s in corpus:
        orig = s.expression
        lip_closed = orig.values.copy()
        lip_closed[:, list(lip)] = 0.0
        eye_shut = orig.values.copy()
        eye_shut[:, list(eye)] = eye_closed
        out.append((orig, ExpressionSequence(lip_closed, orig.fps), ExpressionSequence(eye_shut, orig.fps)))
    return out

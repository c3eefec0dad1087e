"""Parameter-space evaluation metrics.

These stand in for image-space metrics that would need a renderer: blink rate
from the eye subspace, an L2 mouth distance on the lip columns (LMD analog),
the sync-confidence score from :mod:`paramtalk.syncmodel` (LSE-C analog) and
frame-to-frame distances (consecutive-frame LPIPS analog).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from paramtalk.types import ExpressionSequence, SubspacePartition

BLINK_BAND = (0.28, 0.45)
HYSTERESIS_FRAMES = 3


def eye_signal(e: ExpressionSequence, partition: SubspacePartition,
               axis: Optional[np.ndarray] = None) -> np.ndarray:
    """Scalar eye-openness signal: projection of the eye columns on their main axis.

    The sign is chosen so that blinks are dips, i.e. the signal's extreme
    excursion from its median is downward. ``axis`` overrides the principal
    axis (e.g. the known open-to-closed direction of a synthetic corpus).
    """
    if not partition.eye:
        raise ValueError("partition has an empty eye subspace")
    x = e.columns(partition.eye)
    centered = x - x.mean(axis=0)
    if axis is None:
        if not np.any(centered):
            return np.zeros(e.frames)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        axis = vt[0]
    sig = centered @ np.asarray(axis, dtype=np.float64)
    med = np.median(sig)
    if sig.max() - med > med - sig.min():
        sig = -sig
    return sig


def count_blinks(signal: np.ndarray, hysteresis: int = HYSTERESIS_FRAMES) -> int:
    """Falling crossings of the mid-level ``(max + min) / 2``.

    After a crossing the detector re-arms only once the signal has stayed
    above the threshold for ``hysteresis`` consecutive frames.
    """
    signal = np.asarray(signal, dtype=np.float64)
    lo, hi = signal.min(), signal.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi), abs(lo)):
        return 0
    thr = 0.5 * (lo + hi)
    above = signal > thr
    armed = bool(above[0])
    run = hysteresis if armed else 0
    count = 0
    for a in above[1:]:
        if a:
            run += 1
            if run >= hysteresis:
                armed = True
        else:
            if armed:
                count += 1
                armed = False
            run = 0
    return count


def blink_rate(e: ExpressionSequence, partition: SubspacePartition,
               axis: Optional[np.ndarray] = None) -> float:
    """Blinks per second."""
    if e.frames < 2:
        raise ValueError("need at least 2 frames")
    return count_blinks(eye_signal(e, partition, axis)) / e.duration


def in_blink_band(rate: float, band: tuple[float, float] = BLINK_BAND) -> bool:
    return band[0] <= rate <= band[1]


def lip_distance(generated: ExpressionSequence, reference: ExpressionSequence,
                 partition: SubspacePartition) -> float:
    """Mean over frames of the L2 distance on the lip columns."""
    if generated.frames != reference.frames:
        raise ValueError(f"length mismatch: {generated.frames} vs {reference.frames}")
    d = generated.columns(partition.lip) - reference.columns(partition.lip)
    return float(_row_norms(d).mean())


def _row_norms(d: np.ndarray) -> np.ndarray:
    # scaled so tiny differences do not underflow to zero when squared
    scale = np.abs(d).max(axis=1, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    return scale[:, 0] * np.linalg.norm(d / safe, axis=1)


def temporal_smoothness(e: ExpressionSequence) -> np.ndarray:
    if e.frames < 2:
        raise ValueError("need at least 2 frames")
    return _row_norms(np.diff(e.values, axis=0))


@dataclass
class EvalReport:
    name: str
    duration: float
    blink_rate: float
    blink_in_band: bool
    sync_conf: Optional[float]
    lip_l2: Optional[float]
    temporal_var: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_sequence(name: str, generated: ExpressionSequence, partition: SubspacePartition,
                      reference: Optional[ExpressionSequence] = None, audio: Optional[np.ndarray] = None,
                      encoders=None) -> EvalReport:
    rate = blink_rate(generated, partition)
    sync = None
    if encoders is not None and audio is not None:
        from paramtalk.syncmodel import sync_confidence

        sync = sync_confidence(encoders, audio, generated.columns(partition.lip))
    lip = lip_distance(generated, reference, partition) if reference is not None else None
    return EvalReport(name, generated.duration, rate, in_blink_band(rate), sync, lip, temporal_smoothness(generated).tolist())


def summarize(reports: list[EvalReport]) -> dict:
    """Corpus-level figures; the blink rate pools all blinks over the total duration."""
    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    total = sum(r.duration for r in reports)
    rate = sum(r.blink_rate * r.duration for r in reports) / total if total else None
    return {
        "count": len(reports),
        "blink_rate": rate,
        "blink_in_band": in_blink_band(rate) if rate is not None else False,
        "sync_conf": mean([r.sync_conf for r in reports]),
        "lip_l2": mean([r.lip_l2 for r in reports]),
        "temporal_mean": mean([float(np.mean(r.temporal_var)) for r in reports]),
        "metric_note": "parameter-space analogs of Blink, LSE-C, LMD and consecutive-frame LPIPS",
    }

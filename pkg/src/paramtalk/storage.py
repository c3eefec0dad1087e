"""Dataset directories and model checkpoints on disk.

Dataset directory::

    dataset.json          {"fps": 25.0, "sequences": ["seq_0000", ...]}
    expression/<name>.pdt (frames, N)
    audio/<name>.pdt      (frames, D_a)
    edited_lip/<name>.pdt, edited_eye/<name>.pdt   optional edit pairs
    ground_truth.json     optional, synthetic corpora only

Checkpoint directory::

    manifest.json         kind, architecture, partition + hash, extra metadata
    tensors/<param>.pdt   one container per named tensor
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from paramtalk.tensorio import FormatError, list_tensors, read_json, read_tensor, write_json, write_tensor
from paramtalk.types import AudioFeatureSequence, ExpressionSequence, SubspacePartition


def write_dataset(directory, names, expressions, audios, fps: float, edited_lip=None, edited_eye=None,
                  ground_truth: Optional[dict] = None) -> None:
    d = Path(directory)
    for k, name in enumerate(names):
        write_tensor(d / "expression" / f"{name}.pdt", expressions[k].values)
        write_tensor(d / "audio" / f"{name}.pdt", audios[k].values)
        if edited_lip is not None:
            write_tensor(d / "edited_lip" / f"{name}.pdt", edited_lip[k].values)
        if edited_eye is not None:
            write_tensor(d / "edited_eye" / f"{name}.pdt", edited_eye[k].values)
    write_json(d / "dataset.json", {"fps": fps, "sequences": list(names)})
    if ground_truth is not None:
        write_json(d / "ground_truth.json", ground_truth)


def dataset_fps(directory, default: float = 25.0) -> float:
    meta = Path(directory) / "dataset.json"
    return float(read_json(meta)["fps"]) if meta.exists() else default


def read_expressions(directory, fps: float = 25.0) -> dict[str, ExpressionSequence]:
    out = {}
    for p in list_tensors(directory):
        try:
            out[p.stem] = ExpressionSequence(read_tensor(p), fps)
        except ValueError as exc:
            raise FormatError(f"{p}: {exc}") from exc
    if not out:
        raise FormatError(f"{directory}: no tensor files found")
    return out


def read_audios(directory) -> dict[str, AudioFeatureSequence]:
    out = {}
    for p in list_tensors(directory):
        try:
            out[p.stem] = AudioFeatureSequence(read_tensor(p))
        except ValueError as exc:
            raise FormatError(f"{p}: {exc}") from exc
    if not out:
        raise FormatError(f"{directory}: no tensor files found")
    return out


def read_dataset(directory):
    """``(names, expressions, audios, fps)`` for every sequence present in both subdirectories."""
    d = Path(directory)
    fps = dataset_fps(d)
    expr = read_expressions(d / "expression", fps)
    audio = read_audios(d / "audio")
    names = sorted(set(expr) & set(audio))
    if not names:
        raise FormatError(f"{d}: no sequences with both expression and audio")
    for n in names:
        if expr[n].frames != audio[n].frames:
            raise FormatError(f"{d}: {n} has {expr[n].frames} expression frames but {audio[n].frames} audio frames")
    return names, [expr[n] for n in names], [audio[n] for n in names], fps


def read_partition(path) -> SubspacePartition:
    try:
        return SubspacePartition.from_dict(read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: invalid partition ({exc})") from exc


def file_digest(path) -> str:
    h = hashlib.sha256()
    paths = sorted(p for p in Path(path).rglob("*") if p.is_file()) if Path(path).is_dir() else [Path(path)]
    for p in paths:
        h.update(str(p.relative_to(path) if Path(path).is_dir() else p.name).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


# -- checkpoints ------------------------------------------------------------


def save_module(directory, module: torch.nn.Module, kind: str, meta: dict) -> None:
    d = Path(directory)
    (d / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in module.state_dict().items():
        fname = f"{name}.pdt"
        arr = t.detach().cpu().numpy()
        write_tensor(d / "tensors" / fname, arr.reshape(arr.shape), "f64" if t.dtype == torch.float64 else "f32")
        tensors[name] = fname
    write_json(d / "manifest.json", {"kind": kind, **meta, "tensors": tensors})


def load_manifest(directory, kind: str) -> dict:
    d = Path(directory)
    manifest = read_json(d / "manifest.json")
    if manifest.get("kind") != kind:
        raise FormatError(f"{d / 'manifest.json'}: expected a {kind!r} checkpoint, found {manifest.get('kind')!r}")
    return manifest


def load_state(directory, module: torch.nn.Module, manifest: dict) -> None:
    d = Path(directory)
    expected = module.state_dict()
    state = {}
    for name, ref in expected.items():
        fname = manifest["tensors"].get(name)
        if fname is None:
            raise FormatError(f"{d / 'manifest.json'}: missing tensor entry {name!r}")
        path = d / "tensors" / fname
        arr = read_tensor(path)
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(f"{path}: shape {arr.shape} does not match expected {tuple(ref.shape)}")
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: contains non-finite values")
        state[name] = torch.as_tensor(arr.copy(), dtype=ref.dtype)
    module.load_state_dict(state)


def save_denoiser(directory, model, stats, sched_cfg: dict, extra: Optional[dict] = None) -> None:
    meta = {
        "arch": model.arch,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "partition": model.partition.to_dict(),
        "partition_hash": model.partition.digest(),
        "norm_stats": stats.to_dict(),
        "schedule": sched_cfg,
    }
    meta.update(extra or {})
    save_module(directory, model, "denoiser", meta)


def load_denoiser(directory):
    """``(model, stats, schedule_cfg, manifest)``."""
    from paramtalk.denoiser import Denoiser
    from paramtalk.types import NormStats

    m = load_manifest(directory, "denoiser")
    try:
        partition = SubspacePartition.from_dict(m["partition"])
        if partition.digest() != m["partition_hash"]:
            raise FormatError(f"{Path(directory) / 'manifest.json'}: partition hash mismatch")
        model = Denoiser(partition, **m["arch"])
        if m.get("dtype") == "float64":
            model = model.double()
        stats = NormStats.from_dict(m["norm_stats"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{Path(directory) / 'manifest.json'}: invalid manifest ({exc})") from exc
    load_state(directory, model, m)
    model.eval()
    return model, stats, m["schedule"], m


def save_sync(directory, enc, partition: SubspacePartition, extra: Optional[dict] = None) -> None:
    meta = {"arch": enc.arch, "partition": partition.to_dict(), "partition_hash": partition.digest()}
    meta.update(extra or {})
    save_module(directory, enc, "sync", meta)


def load_sync(directory):
    from paramtalk.syncmodel import SyncEncoders

    m = load_manifest(directory, "sync")
    try:
        enc = SyncEncoders(**m["arch"]).double()
        partition = SubspacePartition.from_dict(m["partition"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{Path(directory) / 'manifest.json'}: invalid manifest ({exc})") from exc
    load_state(directory, enc, m)
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc, partition, m

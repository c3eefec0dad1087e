"""Stage implementations shared by the CLI subcommands and the end-to-end pipeline."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from paramtalk import storage
from paramtalk.config import ConfigError, RunConfig
from paramtalk.denoiser import Denoiser
from paramtalk.diffusion import GuidanceConfig, NumericError, WindowSampler, sample_batch, train
from paramtalk.disentangle import build_partition, compute_delta_stats
from paramtalk.metrics import eye_signal, evaluate_sequence, summarize
from paramtalk.syncmodel import diffusion_sync_term, train_sync
from paramtalk.synthdata import SynthSpec, generate, generate_edit_pairs
from paramtalk.tensorio import FormatError, read_tensor, write_json, write_tensor
from paramtalk.types import AudioFeatureSequence, ExpressionSequence, NormStats, linear_schedule, normalize

log = logging.getLogger("paramtalk")

STAGES = ("synth", "disentangle", "train-sync", "train", "sample", "evaluate")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class StageError(RuntimeError):
    def __init__(self, stage: str, code: int, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
        self.code = code


def classify(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (FormatError, OSError, ValueError, KeyError)):
        return EXIT_DATA
    return 1


def _log(event: str, **fields) -> None:
    log.info(event, extra={"fields": fields})


# -- stages -----------------------------------------------------------------


def synth_spec_from_config(cfg: RunConfig) -> SynthSpec:
    return SynthSpec(
        n_dims=cfg.n_dims, k_lip=cfg.k_lip, k_eye=cfg.k_eye, audio_dim=cfg.audio_dim, fps=cfg.fps,
        blink_rate=cfg.blink_rate, blink_duration=cfg.blink_duration, seq_len=cfg.synth_seq_len, seed=cfg.seed,
    )


def run_synth(spec: SynthSpec, count: int, out, start: int = 0) -> None:
    """Write ``count`` sequences (indices ``start..``) as a dataset directory with edit pairs."""
    corpus, truth = generate(spec, start + count)
    corpus = corpus[start:]
    pairs = generate_edit_pairs(spec, corpus)
    gt = truth.to_dict()
    gt["blink_onsets"] = {s.name: s.blink_onsets for s in corpus}
    storage.write_dataset(
        out, [s.name for s in corpus], [s.expression for s in corpus], [s.audio for s in corpus], spec.fps,
        edited_lip=[p[1] for p in pairs], edited_eye=[p[2] for p in pairs], ground_truth=gt,
    )
    _log("synth.done", out=str(out), count=count)


def run_disentangle(original_dir, edited_lip_dir, edited_eye_dir, k_lip: int, k_eye: int, out,
                    aggregate: str = "mean") -> dict:
    orig = storage.read_expressions(original_dir)
    lip = storage.read_expressions(edited_lip_dir)
    eye = storage.read_expressions(edited_eye_dir)
    names = sorted(orig)
    for other, label in ((lip, "edited-lip"), (eye, "edited-eye")):
        missing = [n for n in names if n not in other]
        if missing:
            raise FormatError(f"{label} directory lacks sequences {missing[:3]}")
    o = [orig[n] for n in names]
    lip_stats = compute_delta_stats(o, [lip[n] for n in names], "lip", aggregate)
    eye_stats = compute_delta_stats(o, [eye[n] for n in names], "eye", aggregate)
    part = build_partition(lip_stats, eye_stats, k_lip, k_eye)
    d = part.to_dict()
    d["lip_ratio"] = lip_stats.ratio.tolist()
    d["eye_ratio"] = eye_stats.ratio.tolist()
    d["aggregate"] = aggregate
    write_json(out, d)
    _log("disentangle.done", out=str(out), lip=list(part.lip), eye=list(part.eye))
    return d


def run_train_sync(data_dir, partition_path, cfg: RunConfig, out) -> dict:
    names, exprs, audios, _ = storage.read_dataset(data_dir)
    part = storage.read_partition(partition_path)
    enc, summary = train_sync(
        [a.values for a in audios], [e.columns(part.lip) for e in exprs], seed=cfg.seed,
        window=cfg.sync_window, d_sync=cfg.d_sync, hidden=cfg.sync_hidden, lr=cfg.sync_lr,
        max_epochs=cfg.sync_max_epochs, patience=cfg.sync_patience,
        on_log=lambda rec: _log("train-sync.epoch", **rec),
    )
    storage.save_sync(out, enc, part, {"val_auc": summary["val_auc"], "epochs": summary["epochs"]})
    _log("train-sync.done", out=str(out), val_auc=summary["val_auc"])
    return summary


def build_denoiser(part, cfg: RunConfig) -> Denoiser:
    torch.manual_seed(cfg.seed)
    return Denoiser(part, cfg.audio_dim, d_model=cfg.d_model, n_heads=cfg.n_heads,
                    local_window=cfg.local_window, max_distance=cfg.max_distance, plain_eq=cfg.plain_eq)


def run_train(data_dir, partition_path, cfg: RunConfig, out, sync_ckpt=None) -> dict:
    names, exprs, audios, _ = storage.read_dataset(data_dir)
    part = storage.read_partition(partition_path)
    if part.n_dims != exprs[0].dim:
        raise FormatError(f"{partition_path}: partition has {part.n_dims} dims, data has {exprs[0].dim}")
    if audios[0].dim != cfg.audio_dim:
        raise ConfigError(f"audio_dim={cfg.audio_dim} but data has {audios[0].dim}-dim audio")
    stats = NormStats.from_sequences(exprs)
    windows = WindowSampler([normalize(e, stats).values for e in exprs], [a.values for a in audios], cfg.window)
    sched = linear_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    model = build_denoiser(part, cfg)

    sync_term = None
    if sync_ckpt is not None and cfg.sync_weight > 0:
        enc, _, _ = storage.load_sync(sync_ckpt)
        sync_term = diffusion_sync_term(enc, part.lip, stats.mean, stats.std, n_windows=256)

    sched_cfg = {"T": cfg.T, "beta_min": cfg.beta_min, "beta_max": cfg.beta_max}
    try:
        state = train(
            model, windows, sched, GuidanceConfig(cfg.guidance_scale, cfg.drop_prob), cfg.train_steps,
            seed=cfg.seed, lr=cfg.lr, batch_size=cfg.batch_size, clip_norm=cfg.clip_norm,
            sync_term=sync_term, sync_weight=cfg.sync_weight,
            log_every=max(1, min(100, cfg.train_steps)), on_log=lambda rec: _log("train.progress", **rec),
        )
    except NumericError as exc:
        storage.save_denoiser(out, model, stats, sched_cfg, {"status": "numeric_failure", "error": str(exc)})
        raise
    storage.save_denoiser(out, model, stats, sched_cfg, {"status": "ok", "steps": state.step})
    _log("train.done", out=str(out), steps=state.step)
    return {"steps": state.step, "history": state.history}


def _sample_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def run_sample(ckpt, audio_paths, out_paths, scale: float, seed: int, fps: float = 25.0,
               sampler: str = "ddpm", ddim_steps: int = 50) -> None:
    model, stats, sched_cfg, _ = storage.load_denoiser(ckpt)
    sched = linear_schedule(sched_cfg["T"], sched_cfg["beta_min"], sched_cfg["beta_max"])
    for k, (ap, op) in enumerate(zip(audio_paths, out_paths)):
        a = AudioFeatureSequence(read_tensor(ap))
        if a.dim != model.arch["audio_dim"]:
            raise FormatError(f"{ap}: audio has {a.dim} dims, model expects {model.arch['audio_dim']}")
        g = torch.Generator().manual_seed(_sample_seed(seed, k))
        z = sample_batch(model, torch.tensor(a.values)[None], sched, scale, g, sampler, ddim_steps)[0].numpy()
        if not np.all(np.isfinite(z)):
            raise NumericError(f"sample for {ap} is not finite")
        write_tensor(op, z * stats.std + stats.mean)
        _log("sample.done", audio=str(ap), out=str(op))


def run_evaluate(generated_dir, reference_dir, partition_path, out, sync_ckpt=None, audio_dir=None,
                 plots_dir=None, fps: Optional[float] = None) -> dict:
    part = storage.read_partition(partition_path)
    if fps is None:
        fps = storage.dataset_fps(Path(reference_dir).parent) if reference_dir else 25.0
    gen = storage.read_expressions(generated_dir, fps)
    ref = storage.read_expressions(reference_dir, fps) if reference_dir else {}
    if audio_dir is None and reference_dir is not None and (Path(reference_dir).parent / "audio").is_dir():
        audio_dir = Path(reference_dir).parent / "audio"
    audio = storage.read_audios(audio_dir) if audio_dir else {}
    enc = storage.load_sync(sync_ckpt)[0] if sync_ckpt else None

    reports = []
    for name in sorted(gen):
        e = gen[name]
        if e.dim != part.n_dims:
            raise FormatError(f"{generated_dir}/{name}: {e.dim} dims, partition expects {part.n_dims}")
        a = audio.get(name)
        reports.append(evaluate_sequence(
            name, e, part, reference=ref.get(name), audio=None if a is None else a.values, encoders=enc,
        ))
    summary = summarize(reports)
    if ref:
        summary["reference_blink_rate"] = summarize(
            [evaluate_sequence(n, ref[n], part) for n in sorted(gen) if n in ref]
        )["blink_rate"]
    report = {"summary": summary, "sequences": [r.to_dict() for r in reports]}
    write_json(out, report)
    if plots_dir:
        write_plots(plots_dir, gen, ref, part, reports)
    _log("evaluate.done", out=str(out), **{k: v for k, v in summary.items() if k != "metric_note"})
    return report


def write_plots(plots_dir, gen: dict, ref: dict, part, reports) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plots_dir = Path(plots_dir)
    plots_dir.mkdir(parents=True, exist_ok=True)
    name = sorted(gen)[0]
    fig, ax = plt.subplots(figsize=(9, 3))
    t = np.arange(gen[name].frames) / gen[name].fps
    ax.plot(t, eye_signal(gen[name], part), label="generated")
    if name in ref:
        ax.plot(t, eye_signal(ref[name], part), label="reference", alpha=0.7)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("eye openness (projected)")
    ax.set_title(f"eye signal: {name}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(plots_dir / "eye_signal.png", dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(9, 3))
    for r in reports[:5]:
        ax.plot(r.temporal_var, lw=0.8, label=r.name)
    ax.set_xlabel("frame")
    ax.set_ylabel("||e[i+1] - e[i]||")
    ax.set_title("consecutive-frame distance")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(plots_dir / "smoothness.png", dpi=100)
    plt.close(fig)


# -- orchestration ----------------------------------------------------------


def _outputs(work: Path) -> dict[str, list[Path]]:
    return {
        "synth": [work / "data", work / "eval"],
        "disentangle": [work / "partition.json"],
        "train-sync": [work / "sync_ckpt"],
        "train": [work / "ckpt"],
        "sample": [work / "samples"],
        "evaluate": [work / "report.json"],
    }


def _checksum(paths: list[Path]) -> Optional[str]:
    if not all(p.exists() for p in paths):
        return None
    return "-".join(storage.file_digest(p) for p in paths)


def run_pipeline(cfg: RunConfig, skip: tuple[str, ...] = (), force: bool = False) -> dict:
    """Run every stage in order, resuming stages whose recorded outputs are intact.

    Returns the manifest. Raises :class:`StageError` naming the failed stage.
    """
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    manifest_path = work / "manifest.json"
    manifest = {"config": cfg.to_dict(), "config_hash": cfg.digest(), "stages": {}}
    if manifest_path.exists() and not force:
        try:
            old = storage.read_json(manifest_path)
            if old.get("config_hash") == cfg.digest():
                manifest["stages"] = old.get("stages", {})
        except FormatError:
            pass
    outputs = _outputs(work)
    spec = synth_spec_from_config(cfg)

    actions = {
        "synth": lambda: (run_synth(spec, cfg.synth_count, work / "data"),
                          run_synth(spec, cfg.eval_count, work / "eval", start=cfg.synth_count)),
        "disentangle": lambda: run_disentangle(work / "data/expression", work / "data/edited_lip",
                                               work / "data/edited_eye", cfg.k_lip, cfg.k_eye,
                                               work / "partition.json"),
        "train-sync": lambda: run_train_sync(work / "data", work / "partition.json", cfg, work / "sync_ckpt"),
        "train": lambda: run_train(work / "data", work / "partition.json", cfg, work / "ckpt",
                                   sync_ckpt=work / "sync_ckpt" if (work / "sync_ckpt").exists() else None),
        "sample": lambda: _pipeline_sample(cfg, work),
        "evaluate": lambda: run_evaluate(work / "samples", work / "eval/expression", work / "partition.json",
                                         work / "report.json",
                                         sync_ckpt=work / "sync_ckpt" if (work / "sync_ckpt").exists() else None,
                                         audio_dir=work / "eval/audio", plots_dir=work / "plots", fps=cfg.fps),
    }
    for stage in STAGES:
        if stage in skip:
            _log("stage.skipped", stage=stage)
            continue
        rec = manifest["stages"].get(stage)
        if rec and rec.get("checksum") and rec["checksum"] == _checksum(outputs[stage]):
            _log("stage.resumed", stage=stage)
            continue
        _log("stage.start", stage=stage)
        try:
            actions[stage]()
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001
            code = classify(exc)
            write_json(manifest_path, manifest)
            raise StageError(stage, code, str(exc)) from exc
        manifest["stages"][stage] = {"checksum": _checksum(outputs[stage])}
        write_json(manifest_path, manifest)
    return manifest


def _pipeline_sample(cfg: RunConfig, work: Path) -> None:
    audio_dir = work / "eval" / "audio"
    names = sorted(p.stem for p in audio_dir.glob("*.pdt"))
    run_sample(work / "ckpt", [audio_dir / f"{n}.pdt" for n in names],
               [work / "samples" / f"{n}.pdt" for n in names], cfg.guidance_scale, cfg.seed, cfg.fps,
               cfg.sampler, cfg.ddim_steps)


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})

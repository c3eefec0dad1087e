"""Run configuration: every hyperparameter of every stage in one validated record."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    n_dims: int = 64
    audio_dim: int = 32
    fps: float = 25.0
    synth_count: int = 50
    eval_count: int = 5
    synth_seq_len: int = 500
    blink_rate: float = 0.35
    blink_duration: int = 5
    # subspaces
    k_lip: int = 13
    k_eye: int = 8
    # denoiser
    d_model: int = 128
    n_heads: int = 4
    local_window: int = 5
    max_distance: int = 32
    plain_eq: bool = False
    # diffusion
    T: int = 400
    beta_min: float = 1e-4
    beta_max: float = 0.02
    drop_prob: float = 0.1
    guidance_scale: float = 1.15
    sampler: str = "ddpm"
    ddim_steps: int = 50
    # optimisation
    window: int = 64
    lr: float = 1e-4
    batch_size: int = 32
    train_steps: int = 20000
    clip_norm: float = 1.0
    sync_weight: float = 0.01
    # sync encoders
    sync_window: int = 5
    d_sync: int = 64
    sync_hidden: int = 64
    sync_lr: float = 1e-3
    sync_max_epochs: int = 60
    sync_patience: int = 5
    # run
    seed: int = 0
    work_dir: str = "run"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.n_dims >= 3, "n_dims must be >= 3")
        need(self.audio_dim >= 1, "audio_dim must be >= 1")
        need(self.fps > 0, "fps must be > 0")
        need(self.synth_count >= 4, "synth_count must be >= 4 (sync training needs a validation split)")
        need(self.eval_count >= 1, "eval_count must be >= 1")
        need(self.synth_seq_len >= max(self.window, 2 * 25 + self.sync_window + 1),
             "synth_seq_len too short for training windows and shifted sync negatives")
        need(self.blink_rate >= 0, "blink_rate must be >= 0")
        need(self.k_lip >= 1 and self.k_eye >= 1 and self.k_lip + self.k_eye < self.n_dims,
             "need K_lip, K_eye >= 1 and K_lip + K_eye < n_dims")
        need(self.d_model % self.n_heads == 0 and self.d_model // self.n_heads >= 3,
             "d_model must be a multiple of n_heads with room for 3 regions")
        need(self.local_window >= 1 and self.local_window % 2 == 1, "local_window must be odd")
        need(self.T >= 1, "T must be >= 1")
        need(0 < self.beta_min <= self.beta_max < 1, "need 0 < beta_min <= beta_max < 1")
        need(0.0 <= self.drop_prob <= 1.0, "drop_prob must be in [0, 1]")
        need(self.sampler in ("ddpm", "ddim"), "sampler must be 'ddpm' or 'ddim'")
        need(self.window >= 1 and self.batch_size >= 1 and self.train_steps >= 0, "bad training sizes")
        need(self.lr > 0 and self.sync_lr > 0 and self.clip_norm > 0, "learning rates and clip_norm must be > 0")
        need(self.sync_weight >= 0, "sync_weight must be >= 0")
        need(self.sync_window >= 1, "sync_window must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        coerced = {}
        for k, v in d.items():
            typ = type(getattr(cls, k))
            try:
                coerced[k] = typ(v) if typ is not bool else _as_bool(v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {k!r}: cannot interpret {v!r} as {typ.__name__}") from exc
        return cls(**coerced)

    @classmethod
    def load(cls, path=None, env=os.environ) -> "RunConfig":
        d = {}
        if path is not None:
            try:
                d = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"{path}: cannot load config ({exc})") from exc
            if not isinstance(d, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
        cfg = cls.from_dict(d)
        if env.get("PDT_SEED"):
            try:
                cfg = replace(cfg, seed=int(env["PDT_SEED"]))
            except ValueError as exc:
                raise ConfigError(f"PDT_SEED={env['PDT_SEED']!r} is not an integer") from exc
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("work_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "false"):
        return v.lower() == "true"
    raise ValueError(v)

"""Forward noising, classifier-free-guidance training and guided sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from paramtalk.denoiser import Denoiser
from paramtalk.types import (
    AudioFeatureSequence,
    ExpressionSequence,
    LatentSequence,
    NoiseSchedule,
    NormStats,
    denormalize,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.15
    drop_prob: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob must be in [0, 1], got {self.drop_prob}")


class NumericError(RuntimeError):
    """Raised when a loss or parameter becomes NaN/Inf."""


def _alpha_bar(sched: NoiseSchedule, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(np.array(sched.alpha_bar), dtype=like.dtype)


def forward_diffuse(z0, t, noise, sched: NoiseSchedule):
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) noise``; ``t`` may be an int or a (B,) tensor."""
    if isinstance(z0, torch.Tensor):
        t = torch.as_tensor(t)
        if torch.any(t < 0) or torch.any(t >= sched.T):
            raise ValueError(f"timestep out of range [0, {sched.T})")
        ab = _alpha_bar(sched, z0)[t]
        if ab.ndim:
            ab = ab.view(-1, *([1] * (z0.ndim - 1)))
        return ab.sqrt() * z0 + (1 - ab).sqrt() * noise
    z0 = np.asarray(z0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if not 0 <= int(t) < sched.T:
        raise ValueError(f"timestep {t} out of range [0, {sched.T})")
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {noise.shape} != z0 shape {z0.shape}")
    ab = sched.alpha_bar[int(t)]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise


def predict_x0(z_t: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    ab = _alpha_bar(sched, z_t)[t].view(-1, *([1] * (z_t.ndim - 1)))
    return (z_t - (1 - ab).sqrt() * eps) / ab.sqrt()


@dataclass
class StepResult:
    total: torch.Tensor
    noise: torch.Tensor
    sync: Optional[torch.Tensor]
    kept: torch.Tensor
    t: torch.Tensor


def training_step(
    model: Denoiser,
    z0: torch.Tensor,
    audio: torch.Tensor,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    generator: torch.Generator,
    sync_term: Optional[Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]] = None,
    sync_weight: float = 0.0,
) -> StepResult:
    """One noise-prediction loss evaluation on a batch of windows ``(B, L, N)``.

    ``sync_term(x0_hat, audio, kept)`` returns the lip-sync loss on the
    one-step clean estimate; it is only consulted when provided.
    """
    if z0.shape[0] == 0:
        raise ValueError("empty batch")
    B = z0.shape[0]
    t = torch.randint(0, sched.T, (B,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    kept = torch.rand(B, generator=generator, dtype=torch.float64) >= guidance.drop_prob
    z_t = forward_diffuse(z0, t, eps, sched)
    eps_hat = model(z_t, t, audio, keep=kept)
    l_noise = ((eps - eps_hat) ** 2).mean()
    l_sync = None
    total = l_noise
    if sync_term is not None:
        l_sync = sync_term(predict_x0(z_t, t, eps_hat, sched), audio, kept)
        total = l_noise + sync_weight * l_sync
    return StepResult(total, l_noise, l_sync, kept, t)


def guided_epsilon(model: Denoiser, z_n: torch.Tensor, n, audio: Optional[torch.Tensor], s: float) -> torch.Tensor:
    """``s * eps(z, n, A) + (1 - s) * eps(z, n, null)``."""
    t = torch.as_tensor(n).reshape(-1).expand(z_n.shape[0])
    eps_c = model(z_n, t, audio)
    eps_u = model(z_n, t, None)
    return s * eps_c + (1 - s) * eps_u


def ddpm_sample(
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    shape: Sequence[int],
    sched: NoiseSchedule,
    generator: torch.Generator,
    dtype=torch.float64,
    z_start: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Ancestral reverse chain from ``z_T ~ N(0, I)`` using posterior variance beta~_t."""
    z = torch.randn(tuple(shape), generator=generator, dtype=dtype) if z_start is None else z_start.to(dtype)
    beta = torch.tensor(np.array(sched.beta_step), dtype=dtype)
    ab = torch.tensor(np.array(sched.alpha_bar), dtype=dtype)
    var = torch.tensor(sched.posterior_variance, dtype=dtype)
    for n in reversed(range(sched.T)):
        eps = eps_fn(z, n)
        mean = (z - beta[n] / (1 - ab[n]).sqrt() * eps) / (1 - beta[n]).sqrt()
        if n > 0:
            z = mean + var[n].sqrt() * torch.randn(z.shape, generator=generator, dtype=dtype)
        else:
            z = mean
    return z


def ddim_sample(
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    shape: Sequence[int],
    sched: NoiseSchedule,
    generator: torch.Generator,
    steps: int = 50,
    dtype=torch.float64,
) -> torch.Tensor:
    """Deterministic strided sampler (eta = 0)."""
    z = torch.randn(tuple(shape), generator=generator, dtype=dtype)
    ab = torch.tensor(np.array(sched.alpha_bar), dtype=dtype)
    ts = np.unique(np.linspace(0, sched.T - 1, min(steps, sched.T)).round().astype(int))[::-1]
    for i, n in enumerate(ts):
        eps = eps_fn(z, int(n))
        x0 = (z - (1 - ab[n]).sqrt() * eps) / ab[n].sqrt()
        ab_prev = ab[ts[i + 1]] if i + 1 < len(ts) else torch.tensor(1.0, dtype=dtype)
        z = ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps
    return z


def _check_finite(model: torch.nn.Module) -> None:
    for name, p in model.named_parameters():
        if not torch.all(torch.isfinite(p)):
            raise NumericError(f"parameter {name} is not finite")


@torch.no_grad()
def sample_batch(
    model: Denoiser,
    audio: torch.Tensor,
    sched: NoiseSchedule,
    s: float,
    generator: torch.Generator,
    sampler: str = "ddpm",
    ddim_steps: int = 50,
) -> torch.Tensor:
    """Latent samples for a batch of audio ``(B, L, D_a)``."""
    _check_finite(model)
    dtype = next(model.parameters()).dtype
    audio = audio.to(dtype)
    shape = (audio.shape[0], audio.shape[1], model.n_dims)

    def eps_fn(z, n):
        return guided_epsilon(model, z.to(dtype), n, audio, s).to(torch.float64)

    if sampler == "ddim":
        return ddim_sample(eps_fn, shape, sched, generator, ddim_steps)
    if sampler != "ddpm":
        raise ValueError(f"unknown sampler {sampler!r}")
    return ddpm_sample(eps_fn, shape, sched, generator)


def sample(
    audio: AudioFeatureSequence,
    model: Denoiser,
    sched: NoiseSchedule,
    stats: NormStats,
    s: float = 1.15,
    seed: int = 0,
    fps: float = 25.0,
    sampler: str = "ddpm",
) -> ExpressionSequence:
    g = torch.Generator().manual_seed(seed)
    a = torch.tensor(audio.values)[None]
    z = sample_batch(model, a, sched, s, g, sampler)[0].numpy()
    if not np.all(np.isfinite(z)):
        raise NumericError("sampled sequence contains NaN/Inf")
    return denormalize(LatentSequence(z, stats, fps))


# -- training loop ----------------------------------------------------------


@dataclass
class TrainState:
    step: int = 0
    history: list = field(default_factory=list)


class WindowSampler:
    """Uniformly sampled fixed-length training windows from aligned sequences."""

    def __init__(self, latents: Sequence[np.ndarray], audios: Sequence[np.ndarray], window: int):
        if not latents:
            raise ValueError("no training sequences")
        self.latents = [np.asarray(z) for z in latents]
        self.audios = [np.asarray(a) for a in audios]
        for z, a in zip(self.latents, self.audios):
            if z.shape[0] != a.shape[0]:
                raise ValueError(f"expression/audio frame mismatch: {z.shape[0]} vs {a.shape[0]}")
        self.window = min(window, min(z.shape[0] for z in self.latents))
        self.starts = [z.shape[0] - self.window + 1 for z in self.latents]

    def draw(self, batch_size: int, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        seq = rng.integers(0, len(self.latents), size=batch_size)
        zs, as_ = [], []
        for k in seq:
            s0 = int(rng.integers(0, self.starts[k]))
            zs.append(self.latents[k][s0: s0 + self.window])
            as_.append(self.audios[k][s0: s0 + self.window])
        return torch.as_tensor(np.stack(zs)), torch.as_tensor(np.stack(as_))


def train(
    model: Denoiser,
    windows: WindowSampler,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    steps: int,
    seed: int = 0,
    lr: float = 1e-4,
    batch_size: int = 32,
    clip_norm: float = 1.0,
    sync_term=None,
    sync_weight: float = 0.0,
    log_every: int = 100,
    on_log: Optional[Callable[[dict], None]] = None,
    state: Optional[TrainState] = None,
) -> TrainState:
    """Adam training; raises :class:`NumericError` on NaN/Inf, leaving the last good weights in place."""
    state = state or TrainState()
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 7])
    gen = torch.Generator().manual_seed(seed)
    model.train()
    running = 0.0
    for i in range(steps):
        z0, audio = windows.draw(batch_size, rng)
        res = training_step(model, z0.to(dtype), audio.to(dtype), sched, guidance, gen, sync_term, sync_weight)
        if not torch.isfinite(res.total):
            raise NumericError(f"loss became non-finite at step {state.step}")
        good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        opt.zero_grad()
        res.total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
        opt.step()
        if not all(torch.all(torch.isfinite(p)) for p in model.parameters()):
            model.load_state_dict(good)
            raise NumericError(f"parameters became non-finite at step {state.step}")
        state.step += 1
        running += res.total.item()
        if log_every and (i + 1) % log_every == 0:
            rec = {"step": state.step, "loss": running / log_every}
            if res.sync is not None:
                rec["sync"] = res.sync.item()
            state.history.append(rec)
            running = 0.0
            if on_log:
                on_log(rec)
    model.eval()
    return state

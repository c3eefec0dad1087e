"""Audio / lip-parameter synchronization encoders.

Two small temporal conv encoders embed a ``W``-frame audio window and the
matching lip-coefficient window; the cosine of the unit embeddings, mapped to
``p = (cos + 1) / 2``, is scored with binary cross-entropy against the
in-sync label. The same encoders give the sync-confidence metric.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

P_EPS = 1e-7


class TemporalEncoder(nn.Module):
    """Two width-3 convs, GELU, mean-pool over the window, linear head."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.conv1 = nn.Conv1d(in_dim, hidden, 3, padding=1)
        self.conv2 = nn.Conv1d(hidden, hidden, 3, padding=1)
        self.head = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.conv1(x.transpose(1, 2)))
        h = F.gelu(self.conv2(h))
        return self.head(h.mean(dim=-1))


class SyncEncoders(nn.Module):
    def __init__(self, audio_dim: int, lip_dim: int, d_sync: int = 64, window: int = 5, hidden: int = 64):
        super().__init__()
        self.window = window
        self.d_sync = d_sync
        self.arch = dict(audio_dim=audio_dim, lip_dim=lip_dim, d_sync=d_sync, window=window, hidden=hidden)
        self.f_a = TemporalEncoder(audio_dim, hidden, d_sync)
        self.f_m = TemporalEncoder(lip_dim, hidden, d_sync)
        # input standardization, fitted on the training corpus
        self.register_buffer("audio_mean", torch.zeros(audio_dim, dtype=torch.float64))
        self.register_buffer("audio_std", torch.ones(audio_dim, dtype=torch.float64))
        self.register_buffer("lip_mean", torch.zeros(lip_dim, dtype=torch.float64))
        self.register_buffer("lip_std", torch.ones(lip_dim, dtype=torch.float64))

    def fit_input_stats(self, audios: Sequence[np.ndarray], lips: Sequence[np.ndarray]) -> None:
        a = np.concatenate(audios)
        m = np.concatenate(lips)
        self.audio_mean.copy_(torch.as_tensor(a.mean(0)))
        self.audio_std.copy_(torch.as_tensor(np.maximum(a.std(0), 1e-6)))
        self.lip_mean.copy_(torch.as_tensor(m.mean(0)))
        self.lip_std.copy_(torch.as_tensor(np.maximum(m.std(0), 1e-6)))

    def _check(self, x: torch.Tensor) -> None:
        if x.shape[-2] != self.window:
            raise ValueError(f"window must have {self.window} frames, got {x.shape[-2]}")

    def raw_audio(self, a: torch.Tensor) -> torch.Tensor:
        self._check(a)
        dt = self.f_a.head.weight.dtype
        return self.f_a(((a - self.audio_mean) / self.audio_std).to(dt))

    def raw_lip(self, m: torch.Tensor) -> torch.Tensor:
        self._check(m)
        dt = self.f_m.head.weight.dtype
        return self.f_m(((m - self.lip_mean) / self.lip_std).to(dt))

    def embed_audio(self, a: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.raw_audio(a), dim=-1, eps=1e-12)

    def embed_lip(self, m: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.raw_lip(m), dim=-1, eps=1e-12)

    def cosine(self, a: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        return (self.embed_audio(a) * self.embed_lip(m)).sum(-1)


def bce_from_cosine(cos: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean BCE with ``p = clamp((cos + 1) / 2, 1e-7, 1 - 1e-7)``."""
    p = ((cos + 1) / 2).clamp(P_EPS, 1 - P_EPS)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def sync_loss(enc: SyncEncoders, audio_window: torch.Tensor, lip_window: torch.Tensor, y) -> torch.Tensor:
    if audio_window.ndim == 2:
        audio_window, lip_window = audio_window[None], lip_window[None]
    y = torch.as_tensor(y).reshape(-1).expand(audio_window.shape[0])
    return bce_from_cosine(enc.cosine(audio_window, lip_window), y)


def sliding_windows(x: torch.Tensor, window: int) -> torch.Tensor:
    """``(..., L, D)`` -> ``(..., L - window + 1, window, D)``."""
    return x.unfold(-2, window, 1).transpose(-1, -2)


def sync_confidence(enc: SyncEncoders, audio: np.ndarray, lip: np.ndarray) -> float:
    """Mean cosine over all sliding windows; in [-1, 1], higher is better."""
    audio = np.ascontiguousarray(audio, dtype=np.float64)
    lip = np.ascontiguousarray(lip, dtype=np.float64)
    if audio.shape[0] != lip.shape[0]:
        raise ValueError(f"audio has {audio.shape[0]} frames, lips {lip.shape[0]}")
    if audio.shape[0] < enc.window:
        raise ValueError(f"sequence shorter than the {enc.window}-frame window")
    with torch.no_grad():
        aw = sliding_windows(torch.as_tensor(audio), enc.window)
        mw = sliding_windows(torch.as_tensor(lip), enc.window)
        return float(enc.cosine(aw, mw).mean().clamp(-1.0, 1.0))


# -- training ---------------------------------------------------------------


@dataclass
class PairSet:
    audio: np.ndarray  # (P, W, D_a)
    lip: np.ndarray  # (P, W, K_lip)
    y: np.ndarray  # (P,)


def make_pairs(
    audios: Sequence[np.ndarray],
    lips: Sequence[np.ndarray],
    window: int,
    rng: np.random.Generator,
    per_sequence: int = 64,
    shift_range: tuple[int, int] = (5, 25),
) -> PairSet:
    """Aligned positives and an equal number of negatives.

    Negatives alternate between a +/-[5, 25]-frame temporal shift within the
    same sequence and a window drawn from a different sequence.
    """
    if len(audios) < 2:
        raise ValueError("need at least 2 sequences to mine cross-sequence negatives")
    A, M, Y = [], [], []
    lo, hi = shift_range
    for k, (a, m) in enumerate(zip(audios, lips)):
        L = a.shape[0]
        if L < window + hi + 1:
            raise ValueError(f"sequence {k} too short ({L} frames) for shifted negatives")
        for j in range(per_sequence):
            s = int(rng.integers(0, L - window + 1))
            A.append(a[s: s + window]); M.append(m[s: s + window]); Y.append(1)
            if j % 2 == 0:
                shift = int(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
                s2 = s + shift
                if not 0 <= s2 <= L - window:
                    s2 = s - shift
                mm = m[s2: s2 + window]
            else:
                other = int(rng.integers(0, len(lips) - 1))
                other += other >= k
                om = lips[other]
                s2 = int(rng.integers(0, om.shape[0] - window + 1))
                mm = om[s2: s2 + window]
            A.append(a[s: s + window]); M.append(mm); Y.append(0)
    return PairSet(np.stack(A), np.stack(M), np.asarray(Y))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with tie correction."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate_auc(enc: SyncEncoders, pairs: PairSet) -> float:
    with torch.no_grad():
        cos = enc.cosine(torch.as_tensor(pairs.audio), torch.as_tensor(pairs.lip)).numpy()
    return roc_auc(cos, pairs.y)


def train_sync(
    audios: Sequence[np.ndarray],
    lips: Sequence[np.ndarray],
    seed: int = 0,
    window: int = 5,
    d_sync: int = 64,
    hidden: int = 64,
    lr: float = 1e-3,
    batch_size: int = 128,
    max_epochs: int = 60,
    patience: int = 5,
    min_delta: float = 1e-3,
    val_fraction: float = 0.2,
    per_sequence: int = 64,
    shuffle_labels: bool = False,
    on_log=None,
) -> tuple[SyncEncoders, dict]:
    """Train until held-out AUC stops improving; returns the best encoders and a summary.

    Sequences are split into train / validation by index so validation pairs
    never share a sequence with training pairs.
    """
    audios = [np.asarray(a, dtype=np.float64) for a in audios]
    lips = [np.asarray(m, dtype=np.float64) for m in lips]
    if len(audios) < 4:
        raise ValueError("need at least 4 sequences (2 train + 2 validation) for negative mining")
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 11])
    order = rng.permutation(len(audios))
    n_val = max(2, int(round(val_fraction * len(audios))))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    if len(tr_idx) < 2:
        raise ValueError("corpus too small for negative mining after the validation split")

    enc = SyncEncoders(audios[0].shape[1], lips[0].shape[1], d_sync, window, hidden).double()
    enc.fit_input_stats([audios[i] for i in tr_idx], [lips[i] for i in tr_idx])
    val = make_pairs([audios[i] for i in val_idx], [lips[i] for i in val_idx], window, rng, per_sequence)
    if shuffle_labels:
        val.y = rng.permutation(val.y)
    opt = torch.optim.Adam(enc.parameters(), lr=lr)

    best_auc, best_state, stale, history = -1.0, None, 0, []
    for epoch in range(max_epochs):
        tr = make_pairs([audios[i] for i in tr_idx], [lips[i] for i in tr_idx], window, rng, per_sequence)
        if shuffle_labels:
            tr.y = rng.permutation(tr.y)
        perm = rng.permutation(len(tr.y))
        enc.train()
        total = 0.0
        for b in range(0, len(perm), batch_size):
            idx = perm[b: b + batch_size]
            loss = bce_from_cosine(
                enc.cosine(torch.as_tensor(tr.audio[idx]), torch.as_tensor(tr.lip[idx])),
                torch.as_tensor(tr.y[idx]),
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        enc.eval()
        auc = evaluate_auc(enc, val)
        history.append({"epoch": epoch, "loss": total / len(perm), "val_auc": auc})
        if on_log:
            on_log(history[-1])
        if auc > best_auc + min_delta:
            best_auc, stale = auc, 0
            best_state = {k: v.detach().clone() for k, v in enc.state_dict().items()}
        else:
            stale += 1
            if stale >= patience:
                break
    enc.load_state_dict(best_state)
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc, {"val_auc": best_auc, "epochs": len(history), "history": history,
                 "val_sequences": sorted(int(i) for i in val_idx)}


def diffusion_sync_term(enc: SyncEncoders, lip_idx: Sequence[int], mean: np.ndarray, std: np.ndarray,
                        n_windows: Optional[int] = None):
    """Build ``sync_term(x0_hat, audio, kept)`` for the diffusion training step.

    The clean estimate is mapped back to coefficient space on the lip columns
    and scored as an in-sync pair against its audio; items whose audio was
    dropped are excluded.
    """
    idx = torch.as_tensor(list(lip_idx), dtype=torch.long)
    mu = torch.as_tensor(np.asarray(mean)[list(lip_idx)])
    sd = torch.as_tensor(np.asarray(std)[list(lip_idx)])

    def term(x0_hat: torch.Tensor, audio: torch.Tensor, kept: torch.Tensor) -> torch.Tensor:
        if not torch.any(kept):
            return x0_hat.sum() * 0.0
        lip = x0_hat.index_select(-1, idx) * sd.to(x0_hat.dtype) + mu.to(x0_hat.dtype)
        lw = sliding_windows(lip[kept], enc.window).reshape(-1, enc.window, len(idx))
        aw = sliding_windows(audio[kept], enc.window).reshape(-1, enc.window, audio.shape[-1])
        if n_windows is not None and lw.shape[0] > n_windows:
            stride = lw.shape[0] // n_windows
            lw, aw = lw[::stride], aw[::stride]
        y = torch.ones(lw.shape[0], dtype=lip.dtype)
        cos = (enc.embed_audio(aw.to(torch.float64)) * enc.embed_lip(lw.to(torch.float64))).sum(-1)
        return bce_from_cosine(cos, y).to(x0_hat.dtype)

    return term

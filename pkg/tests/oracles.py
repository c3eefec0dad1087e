"""Independent reference computations used by the tests."""

from __future__ import annotations

import itertools

import numpy as np
import torch


def finite_difference_check(loss_fn, module: torch.nn.Module, per_group: int = 5, h: float = 1e-6, seed: int = 0):
    """Compare autograd gradients with central differences on sampled entries of every parameter.

    Returns a list of ``(param_name, flat_index, analytic, numeric, rel_err)``.
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad and p.numel() > 0]
    module.zero_grad()
    loss_fn().backward()
    grads = {n: p.grad.detach().clone().reshape(-1) for n, p in params}
    rng = np.random.default_rng(seed)
    rows = []
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            picks = rng.choice(p.numel(), size=min(per_group, p.numel()), replace=False)
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                ana = grads[name][i].item()
                scale = max(abs(ana), abs(num))
                rel = abs(ana - num) / scale if scale > 1e-7 else abs(ana - num)
                rows.append((name, int(i), ana, num, rel))
    return rows


def cumulative_product_loop(betas):
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return out


def delta_two_loops(originals, editeds):
    n = originals[0].shape[1]
    total = [0.0] * n
    count = 0
    for o, e in zip(originals, editeds):
        for f in range(o.shape[0]):
            count += 1
            for i in range(n):
                total[i] += abs(o[f, i] - e[f, i])
    return [t / count for t in total]


def exhaustive_assignment(lip_ratio, eye_ratio, k_lip, k_eye):
    """Disjoint (lip, eye) sets of the given sizes maximizing the summed ratios."""
    n = len(lip_ratio)
    best, best_val = None, -np.inf
    for lip in itertools.combinations(range(n), k_lip):
        rest = [i for i in range(n) if i not in lip]
        for eye in itertools.combinations(rest, k_eye):
            val = sum(lip_ratio[i] for i in lip) + sum(eye_ratio[i] for i in eye)
            if val > best_val + 1e-12:
                best, best_val = (set(lip), set(eye)), val
    return best


def lip_distance_loops(gen, ref, lip):
    total = 0.0
    for f in range(gen.shape[0]):
        total += np.sqrt(sum((gen[f, i] - ref[f, i]) ** 2 for i in lip))
    return total / gen.shape[0]


def compose_forward_chain(z0: float, betas, t: int, n: int, rng: np.random.Generator):
    """Sample z_t by applying the one-step kernels q(z_s | z_{s-1}) for s = 0..t."""
    z = np.full(n, float(z0))
    for s in range(t + 1):
        z = np.sqrt(1.0 - betas[s]) * z + np.sqrt(betas[s]) * rng.standard_normal(n)
    return z


def pearson_per_dim(a: np.ndarray, b: np.ndarray) -> float:
    rs = [np.corrcoef(a[:, j], b[:, j])[0, 1] for j in range(a.shape[1])]
    return float(np.mean(rs))

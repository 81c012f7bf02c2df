"""Fast analytic and brute-force oracle checks, runnable without pytest."""

from __future__ import annotations

import math
from typing import Callable, List, Tuple

import numpy as np
import torch

from .diarization import SegmentList, eder
from .diffusion import NoiseSchedule, SamplerConfig, reverse_sample, score_matching_loss, true_score_gaussian
from .mmd import KernelConfig, lmmd2, mmd2
from .models import ToyScoreNet, grad_check, init_uniform_
from .style import CrossAttention

DTYPE = torch.float64
Check = Tuple[str, bool, str]


def _gaussian_reverse() -> Check:
    sched = NoiseSchedule()
    mean, var = 1.0, 0.25

    def score(x, t, _):
        return true_score_gaussian(x, torch.full_like(x, mean), t, sched, data_var=var)

    gen = torch.Generator().manual_seed(0)
    x = reverse_sample(score, (10_000,), None, sched, SamplerConfig(100), gen)
    m, s = float(x.mean()), float(x.std())
    return "diffusion_gaussian_oracle", abs(m - 1) < 0.05 and abs(s - 0.5) < 0.05, f"mean={m:.4f} std={s:.4f}"


def _score_grad() -> Check:
    gen = torch.Generator().manual_seed(1)
    sched = NoiseSchedule()
    net = init_uniform_(ToyScoreNet(4, 4, hidden=8, t_dim=4, n_blocks=1, schedule=sched), gen)
    x0 = torch.randn(3, 5, 4, generator=gen, dtype=DTYPE)
    mu = torch.randn(3, 5, 4, generator=gen, dtype=DTYPE)
    zs = torch.randn(3, 5, 4, generator=gen, dtype=DTYPE)
    t = torch.tensor([0.2, 0.5, 0.9], dtype=DTYPE)
    z = torch.randn(3, 5, 4, generator=gen, dtype=DTYPE)
    err = grad_check(net, lambda: score_matching_loss(net, x0, mu, zs, t, sched, z=z), generator=gen)
    return "score_loss_gradient", err < 1e-4, f"max_rel_err={err:.2e}"


def _mmd_oracles() -> Check:
    cfg = KernelConfig((1.0,), "fixed")
    hand = float(mmd2([[0.0]], [[1.0]], cfg))
    ok = abs(hand - (2 - 2 * math.exp(-0.5))) < 1e-12
    rng = np.random.default_rng(2)
    S, T = rng.normal(size=(12, 3)), rng.normal(size=(9, 3)) + 0.5
    ok &= float(mmd2(S, S, cfg)) < 1e-12

    def k(a, b):
        return math.exp(-float(((a - b) ** 2).sum()) / 2)

    naive = (
        sum(k(a, b) for a in S for b in S) / len(S) ** 2
        + sum(k(a, b) for a in T for b in T) / len(T) ** 2
        - 2 * sum(k(a, b) for a in S for b in T) / (len(S) * len(T))
    )
    gap = abs(float(mmd2(S, T, cfg)) - naive)
    ok &= gap < 1e-10
    one = abs(float(lmmd2(S, T, np.ones((12, 1)), np.ones((9, 1)), cfg)) - float(mmd2(S, T, cfg)))
    ok &= one < 1e-12
    return "mmd_oracles", bool(ok), f"hand={hand:.15f} naive_gap={gap:.1e} lmmd_c1_gap={one:.1e}"


def _eder_cases() -> Check:
    ref = SegmentList.from_tuples([(0, 2, 0), (2, 6, 3), (6, 10, 0)], 10.0)
    shifted = SegmentList.from_tuples([(0, 3, 0), (3, 7, 3), (7, 10, 0)], 10.0)
    confused = SegmentList.from_tuples([(0, 2, 0), (2, 6, 2), (6, 10, 0)], 10.0)
    vals = (eder(ref, ref), eder(ref, shifted), eder(ref, confused))
    text = " ".join(f"{v:.6f}" for v in vals)
    return "eder_hand_cases", text == "0.000000 0.200000 0.400000", text


def _attention_contract() -> Check:
    gen = torch.Generator().manual_seed(3)
    attn = init_uniform_(CrossAttention(8, 2), gen).requires_grad_(False)
    zc = torch.randn(5, 8, generator=gen, dtype=DTYPE)
    sf = torch.randn(11, 8, generator=gen, dtype=DTYPE) * 3
    out, w = attn(zc, sf, return_weights=True)
    rows = float((w.sum(-1) - 1).abs().max())
    perm = torch.randperm(11, generator=gen)
    inv = float((attn(zc, sf[perm]) - out).abs().max())
    return "attention_contract", rows < 1e-6 and inv < 1e-10, f"row_sum_err={rows:.1e} perm_err={inv:.1e}"


CHECKS: List[Callable[[], Check]] = [_gaussian_reverse, _score_grad, _mmd_oracles, _eder_cases, _attention_contract]


def run_selftest() -> List[Check]:
    out = []
    for fn in CHECKS:
        try:
            out.append(fn())
        except Exception as exc:  # a crash is a failed check, reported not raised
            out.append((fn.__name__.lstrip("_"), False, f"{type(exc).__name__}: {exc}"))
    return out

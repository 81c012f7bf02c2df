"""Gaussian-kernel maximum mean discrepancy and its class-local, multi-layer variants.

Every squared RKHS norm is expanded with the kernel trick; the feature map is
never built.  All estimators are the biased V-statistic (i == j terms kept).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import torch

from .errors import DegenerateBatchError, DomainError, ShapeError

DTYPE = torch.float64
CLASS_WEIGHT_FLOOR = 1e-8


@dataclass(frozen=True)
class KernelConfig:
    """Multi-bandwidth Gaussian kernel.

    With ``bandwidth_mode="fixed"`` the entries of ``bandwidths`` are the
    sigmas.  With ``"median"`` they are multipliers on the median pairwise
    distance of the joint batch, recomputed per call and detached from the
    autograd graph.
    """

    bandwidths: Sequence[float] = field(default_factory=lambda: (0.5, 1.0, 2.0))
    bandwidth_mode: str = "median"

    def __post_init__(self):
        object.__setattr__(self, "bandwidths", tuple(float(b) for b in self.bandwidths))
        if not self.bandwidths:
            raise DomainError("bandwidths must be non-empty")
        if any(b <= 0 for b in self.bandwidths):
            raise DomainError(f"bandwidths must be positive, got {self.bandwidths}")
        if self.bandwidth_mode not in ("fixed", "median"):
            raise DomainError(f"bandwidth_mode must be 'fixed' or 'median', got {self.bandwidth_mode!r}")


def _as2d(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeError(f"expected a (n, d) matrix, got shape {tuple(x.shape)}")
    return x


def sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise squared Euclidean distances, exact (no Gram-matrix trick)."""
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(-1)


def resolve_sigmas(cfg: KernelConfig, *samples: torch.Tensor) -> List[float]:
    if cfg.bandwidth_mode == "fixed":
        return list(cfg.bandwidths)
    joint = torch.cat([_as2d(s).detach() for s in samples], dim=0)
    d2 = sq_dists(joint, joint)
    n = joint.shape[0]
    off = d2[~torch.eye(n, dtype=torch.bool)]
    med = float(torch.quantile(torch.sqrt(off), 0.5)) if off.numel() else 0.0
    if med <= 0.0:
        med = 1.0
    return [b * med for b in cfg.bandwidths]


def _kernel_from_d2(d2: torch.Tensor, sigmas: Sequence[float]) -> torch.Tensor:
    return sum(torch.exp(-d2 / (2.0 * s * s)) for s in sigmas) / len(sigmas)


def gaussian_kernel(x, y, cfg: KernelConfig) -> torch.Tensor:
    """``mean_k exp(-||x - y||^2 / (2 sigma_k^2))`` for two vectors."""
    x = torch.as_tensor(x, dtype=DTYPE).reshape(-1)
    y = torch.as_tensor(y, dtype=DTYPE).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    sigmas = resolve_sigmas(cfg, x[None], y[None])
    d = x - y
    return _kernel_from_d2((d * d).sum(), sigmas)


def kernel_blocks(S, T, cfg: KernelConfig):
    """Return the three Gram blocks ``(K_ss, K_tt, K_st)``."""
    S, T = _as2d(S), _as2d(T)
    if S.shape[0] < 1 or T.shape[0] < 1:
        raise DomainError("both samples must be non-empty")
    if S.shape[1] != T.shape[1]:
        raise ShapeError(f"feature width mismatch: {S.shape[1]} vs {T.shape[1]}")
    sigmas = resolve_sigmas(cfg, S, T)
    return (
        _kernel_from_d2(sq_dists(S, S), sigmas),
        _kernel_from_d2(sq_dists(T, T), sigmas),
        _kernel_from_d2(sq_dists(S, T), sigmas),
    )


def mmd2(S, T, cfg: KernelConfig) -> torch.Tensor:
    """Biased squared MMD between the rows of ``S`` and the rows of ``T``."""
    kss, ktt, kst = kernel_blocks(S, T, cfg)
    return kss.mean() + ktt.mean() - 2.0 * kst.mean()


def _check_soft_labels(W: torch.Tensor, n: int, name: str) -> None:
    if W.ndim != 2 or W.shape[0] != n:
        raise ShapeError(f"{name} must be ({n}, C), got {tuple(W.shape)}")
    if bool((W < 0).any()):
        raise DomainError(f"{name} has negative entries")


def lmmd2(S, T, W_s, W_t, cfg: KernelConfig) -> torch.Tensor:
    """Class-local MMD: per-class weighted MMD averaged over usable classes.

    Each class column of ``W_s`` / ``W_t`` is normalised to sum to one within
    its domain.  Classes whose raw weight mass is below ``CLASS_WEIGHT_FLOOR``
    in either domain are dropped from the average.
    """
    S, T = _as2d(S), _as2d(T)
    W_s = torch.as_tensor(W_s, dtype=DTYPE).detach()
    W_t = torch.as_tensor(W_t, dtype=DTYPE).detach()
    _check_soft_labels(W_s, S.shape[0], "W_s")
    _check_soft_labels(W_t, T.shape[0], "W_t")
    if W_s.shape[1] != W_t.shape[1]:
        raise ShapeError(f"class count mismatch: {W_s.shape[1]} vs {W_t.shape[1]}")
    kss, ktt, kst = kernel_blocks(S, T, cfg)
    mass_s, mass_t = W_s.sum(0), W_t.sum(0)
    terms = []
    for c in range(W_s.shape[1]):
        if mass_s[c] < CLASS_WEIGHT_FLOOR or mass_t[c] < CLASS_WEIGHT_FLOOR:
            continue
        ws = W_s[:, c] / mass_s[c]
        wt = W_t[:, c] / mass_t[c]
        terms.append(ws @ kss @ ws + wt @ ktt @ wt - 2.0 * (ws @ kst @ wt))
    if not terms:
        raise DegenerateBatchError("every class has negligible weight in some domain")
    return torch.stack(terms).mean()


def mlmmd2(S_layers, T_layers, W_s, W_t, cfg: KernelConfig) -> torch.Tensor:
    """Mean of :func:`lmmd2` over paired layers, same class weights on every layer."""
    if len(S_layers) != len(T_layers):
        raise ShapeError(f"layer count mismatch: {len(S_layers)} vs {len(T_layers)}")
    if len(S_layers) < 1:
        raise DomainError("need at least one layer")
    return torch.stack([lmmd2(s, t, W_s, W_t, cfg) for s, t in zip(S_layers, T_layers)]).mean()


def mmmd2(S_layers, T_layers, cfg: KernelConfig) -> torch.Tensor:
    """Multi-layer global MMD (no class weighting)."""
    if len(S_layers) != len(T_layers):
        raise ShapeError(f"layer count mismatch: {len(S_layers)} vs {len(T_layers)}")
    return torch.stack([mmd2(s, t, cfg) for s, t in zip(S_layers, T_layers)]).mean()


def sed_total_loss(ce_loss, mlmmd_value, lambda_weight: float = 0.5):
    """Cross-entropy plus weighted adaptation term."""
    if lambda_weight < 0:
        raise DomainError(f"lambda_weight must be >= 0, got {lambda_weight}")
    return ce_loss + lambda_weight * mlmmd_value

"""Variance-preserving score-based diffusion with a linear noise schedule.

Forward process::

    dX_t = -1/2 beta(t) X_t dt + sqrt(beta(t)) dW_t,    t in [0, 1]

with closed-form marginal ``X_t | X_0 ~ N(mean_coef(t) X_0, lam(t) I)`` where
``mean_coef = exp(-B(t)/2)``, ``lam = 1 - exp(-B(t))`` and ``B`` is the
integrated schedule.  Generation runs the Euler-Maruyama discretisation of the
reverse-time SDE from ``N(0, I)``.

All arithmetic is float64.  Randomness always comes from an explicit
``torch.Generator`` so results are reproducible per seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional, Tuple, Union

import torch

from .errors import DomainError, NumericalError

DTYPE = torch.float64
LAMBDA_FLOOR = 1e-8

TimeLike = Union[float, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear schedule ``beta(t) = beta0 + (beta1 - beta0) t`` on ``[0, 1]``."""

    beta0: float = 0.05
    beta1: float = 20.0

    def __post_init__(self):
        if not (0.0 < self.beta0 <= self.beta1):
            raise DomainError(
                f"need 0 < beta0 <= beta1, got beta0={self.beta0}, beta1={self.beta1}"
            )

    @property
    def terminal_time(self) -> float:
        return 1.0

    def beta(self, t: TimeLike) -> torch.Tensor:
        t = _check_time(t)
        return self.beta0 + (self.beta1 - self.beta0) * t


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 100
    stochastic: bool = True

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise DomainError(f"n_steps must be >= 1, got {self.n_steps}")


def _check_time(t: TimeLike, allow_zero: bool = True) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=DTYPE)
    if torch.isnan(t).any():
        raise DomainError("time is NaN")
    lo_ok = (t >= 0.0) if allow_zero else (t > 0.0)
    if not bool(lo_ok.all()) or not bool((t <= 1.0).all()):
        bound = "[0, 1]" if allow_zero else "(0, 1]"
        raise DomainError(f"time must lie in {bound}, got {t.tolist()}")
    return t


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # per-sample times (B,) against batched matrices (B, ...)
    if v.ndim == 0:
        return v
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


def cum_beta(schedule: NoiseSchedule, t: TimeLike) -> torch.Tensor:
    """Integral of beta over ``[0, t]``, closed form."""
    t = _check_time(t)
    return schedule.beta0 * t + 0.5 * (schedule.beta1 - schedule.beta0) * t * t


def marginal_params(schedule: NoiseSchedule, t: TimeLike) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return ``(mean_coef, lam)`` of the forward marginal at time ``t``."""
    b = cum_beta(schedule, t)
    mean_coef = torch.exp(-0.5 * b)
    lam = -torch.expm1(-b)
    return mean_coef, lam


def forward_sample(
    x0: torch.Tensor,
    t: TimeLike,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    z: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Draw ``x_t ~ q(x_t | x_0)``.

    Returns ``(xt, eps)`` with ``eps = sqrt(lam) z`` so that ``eps`` has
    variance ``lam(t)`` and the conditional score equals ``-eps / lam``.
    Pass ``z`` to replay a fixed standard-normal draw.
    """
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    t = _check_time(t, allow_zero=False)
    mean_coef, lam = marginal_params(schedule, t)
    if z is None:
        z = torch.randn(x0.shape, generator=generator, dtype=DTYPE)
    else:
        z = torch.as_tensor(z, dtype=DTYPE)
    eps = torch.sqrt(_bcast(lam, x0)) * z
    xt = _bcast(mean_coef, x0) * x0 + eps
    return xt, eps


def true_score_gaussian(
    xt: torch.Tensor,
    x0: torch.Tensor,
    t: TimeLike,
    schedule: NoiseSchedule,
    data_var: float = 0.0,
) -> torch.Tensor:
    """Analytic score of ``x_t`` when ``x_0 ~ N(x0, data_var I)``.

    With ``data_var = 0`` this is the conditional score
    ``-(xt - mean_coef x0) / lam``.  A positive ``data_var`` gives the exact
    marginal score for Gaussian data, which is what the reverse-sampler
    oracle tests integrate.
    """
    t = _check_time(t, allow_zero=False)
    xt = torch.as_tensor(xt, dtype=DTYPE)
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    mean_coef, lam = marginal_params(schedule, t)
    mean_coef, lam = _bcast(mean_coef, xt), _bcast(lam, xt)
    var = lam + mean_coef * mean_coef * data_var
    return -(xt - mean_coef * x0) / var


def reverse_step(
    xt: torch.Tensor,
    t: TimeLike,
    score: torch.Tensor,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """One Euler-Maruyama step of the reverse SDE, from ``t`` to ``t - 1/N``."""
    h = _bcast(schedule.beta(t), xt) / cfg.n_steps
    out = xt + h * (0.5 * xt + score)
    if cfg.stochastic:
        z = torch.randn(xt.shape, generator=generator, dtype=DTYPE)
        out = out + torch.sqrt(h) * z
    return out


def reverse_sample(
    score_fn: Callable[[torch.Tensor, float, Any], torch.Tensor],
    shape: Tuple[int, ...],
    conditioning: Any,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Generate ``X_0`` by integrating the reverse SDE from ``X_1 ~ N(0, I)``.

    ``score_fn(x, t, conditioning)`` is called once per step with
    ``t = 1, (N-1)/N, ..., 1/N``.
    """
    n = int(cfg.n_steps)
    x = torch.randn(tuple(shape), generator=generator, dtype=DTYPE)
    for i in range(n, 0, -1):
        t = i / n
        score = score_fn(x, t, conditioning)
        if not torch.isfinite(score).all():
            raise NumericalError(f"score_fn returned non-finite values at step {n - i} (t={t:.6g})")
        x = reverse_step(x, t, score, schedule, cfg, generator)
    return x


def sample_training_time(
    n: int,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    t_min: float = 1e-3,
) -> torch.Tensor:
    """Uniform times on ``(t_min, 1]``; draws with ``lam < LAMBDA_FLOOR`` are redrawn."""
    t = t_min + (1.0 - t_min) * (1.0 - torch.rand(n, generator=generator, dtype=DTYPE))
    while True:
        bad = marginal_params(schedule, t)[1] < LAMBDA_FLOOR
        if not bool(bad.any()):
            return t
        fresh = t_min + (1.0 - t_min) * (1.0 - torch.rand(int(bad.sum()), generator=generator, dtype=DTYPE))
        t = t.clone()
        t[bad] = fresh


def score_matching_loss(
    score_net: Callable[..., torch.Tensor],
    x0: torch.Tensor,
    mu: Any,
    z_s: Any,
    t: TimeLike,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    z: Optional[torch.Tensor] = None,
    weighting: str = "none",
    mask: Optional[torch.Tensor] = None,
    return_prediction: bool = False,
):
    """Denoising score-matching loss ``mean ||s(x_t, mu, t, z_s) + eps / lam||^2``.

    ``weighting="lambda"`` multiplies each sample's squared error by
    ``lam(t)``, which turns the objective into ``||sqrt(lam) s + z||^2`` and
    removes the ``1/lam`` blow-up near ``t = 0``.  ``mask`` of shape
    ``(B, F)`` restricts the mean to valid frames of padded ``(B, F, M)``
    input.  With ``return_prediction`` the result is ``(loss, x_t, score)``.
    """
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    t = _check_time(t, allow_zero=False)
    _, lam = marginal_params(schedule, t)
    if bool((lam < LAMBDA_FLOOR).any()):
        raise DomainError(f"lam(t) below {LAMBDA_FLOOR:g}; redraw t")
    xt, eps = forward_sample(x0, t, schedule, generator, z=z)
    lam_b = _bcast(lam, x0)
    score = score_net(xt, mu, t, z_s)
    resid = score + eps / lam_b
    sq = resid * resid
    if weighting == "lambda":
        sq = sq * lam_b
    elif weighting != "none":
        raise ValueError(f"unknown weighting {weighting!r}")
    if mask is None:
        loss = sq.mean()
    else:
        m = mask.to(DTYPE)[..., None]
        loss = (sq * m).sum() / (m.sum() * sq.shape[-1])
    return (loss, xt, score) if return_prediction else loss

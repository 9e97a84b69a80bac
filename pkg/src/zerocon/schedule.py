"""Noise schedules and the closed-form diffusion step math.

Every function here works on numpy arrays and torch tensors alike: schedule
coefficients are converted to Python floats before they touch the latent, so
the latent's dtype and autograd graph are preserved.

Timesteps are 1-based (``1..T``). ``t = 0`` denotes clean data, with the
convention ``alpha_bar(0) = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("linear", "scaled_linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance coefficients of a discrete diffusion process.

    Arrays are float64 and indexed by ``t - 1``; use :meth:`alpha_bar`,
    :meth:`alpha` and :meth:`beta` for 1-based access.
    """

    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    substep_indices: tuple[int, ...]

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def num_substeps(self) -> int:
        return len(self.substep_indices)

    def check_t(self, t: int, *, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not (lo <= int(t) <= self.T):
            raise ValueError(f"timestep {t} out of range [{lo}, {self.T}]")

    def alpha_bar(self, t: int) -> float:
        self.check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def alpha(self, t: int) -> float:
        self.check_t(t)
        return float(self.alphas[t - 1])

    def beta(self, t: int) -> float:
        self.check_t(t)
        return float(self.betas[t - 1])

    def descending(self) -> list[int]:
        """Selected timesteps from ``T`` down to the first substep."""
        return list(reversed(self.substep_indices))

    def prev_timestep(self, t: int) -> int:
        """The selected timestep that follows ``t`` when denoising (0 after the last)."""
        idx = self.substep_indices.index(t)
        return 0 if idx == 0 else self.substep_indices[idx - 1]

    def with_substeps(self, substeps: int) -> "NoiseSchedule":
        return NoiseSchedule(
            kind=self.kind,
            betas=self.betas,
            alphas=self.alphas,
            alpha_bars=self.alpha_bars,
            substep_indices=_substeps(self.T, substeps),
        )

    def params(self) -> dict:
        """Constructor arguments, suitable for manifests."""
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
            "substeps": self.num_substeps,
        }


def _substeps(T: int, substeps: int) -> tuple[int, ...]:
    if not 1 <= substeps <= T:
        raise ValueError(f"substeps must be in [1, T={T}], got {substeps}")
    idx = np.round(np.arange(1, substeps + 1) * (T / substeps)).astype(int)
    return tuple(int(i) for i in idx)


def make_schedule(
    kind: str = "linear",
    T: int = 200,
    beta_start: float = 1e-4,
    beta_end: float = 0.1,
    substeps: int = 50,
) -> NoiseSchedule:
    """Build a noise schedule.

    ``linear`` spaces the betas evenly; ``scaled_linear`` spaces ``sqrt(beta)``
    evenly and squares, which is the Stable Diffusion convention.
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        kind=kind,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        substep_indices=_substeps(T, substeps),
    )


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Noise clean data straight to step ``t``."""
    _check_shapes(x0, eps)
    sched.check_t(t)
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def one_step_x0(x_t, eps_pred, t: int, sched: NoiseSchedule):
    """Estimate clean data from ``x_t`` and a noise prediction in one jump.

    ``t = 0`` is accepted and returns ``x_t`` unchanged.
    """
    _check_shapes(x_t, eps_pred)
    sched.check_t(t, allow_zero=True)
    ab = sched.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def posterior_mean(x_t, eps_pred, t: int, sched: NoiseSchedule):
    """Mean of the learned reverse transition ``p(x_{t-1} | x_t)`` (standard DDPM form)."""
    _check_shapes(x_t, eps_pred)
    if t == 0:
        raise ValueError("t=0 has no predecessor")
    sched.check_t(t)
    a, ab, b = sched.alpha(t), sched.alpha_bar(t), sched.beta(t)
    return (x_t - (b / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(a)


def ddim_step(x_t, eps_pred, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic DDIM move from ``t`` down to ``t_prev`` (``t_prev = 0`` lands on clean data)."""
    if t_prev >= t:
        raise ValueError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    sched.check_t(t_prev, allow_zero=True)
    return _ddim_move(x_t, eps_pred, t, t_prev, sched)


def ddim_invert_step(x_t, eps_pred, t: int, t_next: int, sched: NoiseSchedule):
    """Deterministic DDIM move from ``t`` up to ``t_next``; exact inverse of :func:`ddim_step`.

    The noise coefficient is taken at ``t_next``, which is what makes the two
    steps mutual inverses under a shared noise prediction.
    """
    if t_next <= t:
        raise ValueError(f"ddim_invert_step needs t_next > t, got t={t}, t_next={t_next}")
    sched.check_t(t_next)
    return _ddim_move(x_t, eps_pred, t, t_next, sched)


def _ddim_move(x, eps, t_from: int, t_to: int, sched: NoiseSchedule):
    # sqrt(ab_to) * one_step_x0 + sqrt(1 - ab_to) * eps, with both coefficients
    # folded in float64 so a float32 latent sees only two roundings per step
    _check_shapes(x, eps)
    sched.check_t(t_from, allow_zero=True)
    ab_from, ab_to = sched.alpha_bar(t_from), sched.alpha_bar(t_to)
    scale = math.sqrt(ab_to / ab_from)
    mix = math.sqrt(1.0 - ab_to) - scale * math.sqrt(1.0 - ab_from)
    return scale * x + mix * eps


def ddpm_step(x_t, eps_pred, t: int, sched: NoiseSchedule, noise=None):
    """Ancestral DDPM sample of ``x_{t-1}``; test baseline only.

    Uses the posterior variance ``beta_tilde``. With ``noise=None`` the mean is returned.
    """
    mean = posterior_mean(x_t, eps_pred, t, sched)
    if noise is None or t == 1:
        return mean
    _check_shapes(x_t, noise)
    var = sched.beta(t) * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t))
    return mean + math.sqrt(var) * noise

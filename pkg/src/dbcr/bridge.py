"""Diffusion-bridge process between cloud-free and cloudy images.

The forward process linearly mixes the clean image ``x0`` into the cloudy
image ``y`` with a monotone coefficient ``alpha[t]``; the reverse update
resamples ``x_{t-s}`` from a clean-image estimate and the current state.
An optional noise scale ``beta[t]`` turns both into their stochastic
counterparts.

All functions are pure and operate on ``torch.Tensor`` inputs of any shape
(broadcasting over batch dimensions is allowed as long as ``x0`` and ``y``
agree).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

SCHEDULE_KINDS = ("sine",)


@dataclass(frozen=True)
class Schedule:
    """Mixing coefficients over ``T + 1`` discrete timesteps.

    ``alpha`` and ``beta`` are stored as float64 tuples so the object is
    hashable and immutable; use :meth:`alpha_at` / :meth:`beta_at` to read.
    """

    T: int
    alpha: tuple[float, ...]
    beta: Optional[tuple[float, ...]] = None
    kind: str = "sine"
    beta_max: Optional[float] = None

    def __post_init__(self):
        if len(self.alpha) != self.T + 1:
            raise ValueError(f"alpha must have T+1={self.T + 1} entries, got {len(self.alpha)}")
        if self.alpha[0] != 0.0 or self.alpha[-1] != 1.0:
            raise ValueError("alpha must start at 0 and end at 1")
        if any(b <= a for a, b in zip(self.alpha, self.alpha[1:])):
            raise ValueError("alpha must be strictly increasing")
        if self.beta is not None:
            if len(self.beta) != self.T + 1:
                raise ValueError("beta must have T+1 entries")
            if self.beta[0] != 0.0 or self.beta[-1] != 0.0:
                raise ValueError("beta must vanish at both endpoints")
            if any(b < 0 for b in self.beta):
                raise ValueError("beta must be nonnegative")

    @property
    def has_beta(self) -> bool:
        return self.beta is not None

    def alpha_at(self, t: int) -> float:
        return self.alpha[self._check_t(t)]

    def beta_at(self, t: int) -> float:
        if self.beta is None:
            return 0.0
        return self.beta[self._check_t(t)]

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return t

    def params(self) -> dict:
        """Serializable parameters sufficient to rebuild the schedule."""
        return {"T": self.T, "kind": self.kind, "beta_max": self.beta_max}


def make_schedule(T: int, kind: str = "sine", sde_beta_max: Optional[float] = None) -> Schedule:
    """Build ``alpha[t] = sin^2(pi t / 2T)`` and optionally ``beta[t] = beta_max sin(pi t / T)``."""
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if sde_beta_max is not None and not sde_beta_max >= 0:
        raise ValueError(f"sde_beta_max must be >= 0, got {sde_beta_max!r}")

    alpha = [math.sin(math.pi * t / (2 * T)) ** 2 for t in range(T + 1)]
    # pin the endpoints; sin(pi/2)**2 is already 1.0 but do not rely on libm
    alpha[0], alpha[T] = 0.0, 1.0

    beta = None
    if sde_beta_max is not None:
        beta = [sde_beta_max * math.sin(math.pi * t / T) for t in range(T + 1)]
        beta[0], beta[T] = 0.0, 0.0
        beta = tuple(beta)
    return Schedule(T=T, alpha=tuple(alpha), beta=beta, kind=kind,
                    beta_max=None if sde_beta_max is None else float(sde_beta_max))


def schedule_from_params(params: dict) -> Schedule:
    return make_schedule(params["T"], params.get("kind", "sine"), params.get("beta_max"))


@dataclass
class BridgeState:
    """An intermediate image ``x`` at timestep ``t``."""

    x: torch.Tensor
    t: int


@dataclass(frozen=True)
class TimestepPlan:
    steps: tuple[int, ...]
    s: int = field(default=1)

    @property
    def n_evals(self) -> int:
        return len(self.steps) - 1


def _check_pair(a: torch.Tensor, b: torch.Tensor, names=("x0", "y")):
    if a.shape != b.shape:
        raise ValueError(f"{names[0]} shape {tuple(a.shape)} != {names[1]} shape {tuple(b.shape)}")


def forward_mix(x0: torch.Tensor, y: torch.Tensor, t: int, sched: Schedule) -> BridgeState:
    """``x_t = (1 - alpha_t) x0 + alpha_t y``; exact at both endpoints."""
    _check_pair(x0, y)
    a = sched.alpha_at(t)
    if a == 0.0:
        x = x0.clone()
    elif a == 1.0:
        x = y.clone()
    else:
        x = (1.0 - a) * x0 + a * y
    return BridgeState(x=x, t=int(t))


def forward_mix_sde(x0: torch.Tensor, y: torch.Tensor, t: int, sched: Schedule,
                    noise: torch.Tensor) -> BridgeState:
    """Forward mix plus ``beta_t * noise``."""
    if not sched.has_beta:
        raise RuntimeError("forward_mix_sde needs a schedule with a beta (noise) component")
    _check_pair(x0, noise, ("x0", "noise"))
    state = forward_mix(x0, y, t, sched)
    b = sched.beta_at(t)
    if b != 0.0:
        state.x = state.x + b * noise
    return state


def _reverse_coeff(t: int, s: int, sched: Schedule) -> float:
    t, s = int(t), int(s)
    if s <= 0:
        raise ValueError(f"step size must be positive, got {s}")
    if s > t:
        raise ValueError(f"step size {s} exceeds timestep {t}")
    a_t = sched.alpha_at(t)
    if a_t == 0.0:
        raise ValueError("reverse step undefined at alpha_t == 0")
    return sched.alpha_at(t - s) / a_t


def reverse_step(x0_hat: torch.Tensor, x_t: torch.Tensor, t: int, s: int,
                 sched: Schedule) -> torch.Tensor:
    """``x_{t-s} = (1 - r) x0_hat + r x_t`` with ``r = alpha_{t-s} / alpha_t``."""
    _check_pair(x0_hat, x_t, ("x0_hat", "x_t"))
    r = _reverse_coeff(t, s, sched)
    if r == 0.0:
        return x0_hat.clone()
    return (1.0 - r) * x0_hat + r * x_t


def reverse_step_sde(x0_hat: torch.Tensor, x_t: torch.Tensor, t: int, s: int,
                     sched: Schedule, noise: torch.Tensor) -> torch.Tensor:
    """Stochastic reverse update; adds ``(beta_t r - beta_{t-s}) * noise``."""
    if not sched.has_beta:
        raise RuntimeError("reverse_step_sde needs a schedule with a beta (noise) component")
    _check_pair(x0_hat, noise, ("x0_hat", "noise"))
    out = reverse_step(x0_hat, x_t, t, s, sched)
    r = _reverse_coeff(t, s, sched)
    c = sched.beta_at(t) * r - sched.beta_at(t - s)
    if c != 0.0:
        out = out + c * noise
    return out


def plan_timesteps(T: int, N: int) -> TimestepPlan:
    """Uniform descending plan ``[T, T-s, ..., s, 0]`` with ``s = T / N``."""
    if N < 1 or N > T:
        raise ValueError(f"NFE count must be in [1, {T}], got {N}")
    if T % N:
        raise ValueError(f"NFE count {N} does not divide T={T}")
    s = T // N
    return TimestepPlan(steps=tuple(range(T, -1, -s)), s=s)

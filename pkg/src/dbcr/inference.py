"""Multi-step reverse sampling from a cloudy image to a cloud-free estimate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .bridge import Schedule, make_schedule, plan_timesteps, reverse_step, reverse_step_sde
from .errors import NumericalError

Restorer = Callable[[torch.Tensor, int, torch.Tensor], torch.Tensor]

DEFAULT_SDE_BETA_MAX = 0.1


@dataclass
class InferenceConfig:
    N: int = 1
    mode: str = "ode"
    seed: int = 0
    beta_max: float = DEFAULT_SDE_BETA_MAX  # used in sde mode when the schedule has no beta

    def validate(self, T: Optional[int] = None):
        if self.mode not in ("ode", "sde"):
            raise ValueError(f"mode must be 'ode' or 'sde', got {self.mode!r}")
        if self.N < 1:
            raise ValueError(f"NFE count must be >= 1, got {self.N}")
        if T is not None and T % self.N:
            raise ValueError(f"NFE count {self.N} does not divide T={T}")


def _as_batch(a) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.asarray(a) if not torch.is_tensor(a) else a)
    if t.dim() == 3:
        return t[None], True
    if t.dim() != 4:
        raise ValueError(f"expected a CHW image or NCHW batch, got shape {tuple(t.shape)}")
    return t, False


def sample(restorer: Restorer, y: torch.Tensor, z: torch.Tensor, sched: Schedule, N: int,
           mode: str = "ode", generator: Optional[torch.Generator] = None,
           trace: Optional[list] = None) -> torch.Tensor:
    """Run the reverse process with ``N`` restorer calls.

    Starts at ``x_T = y``, calls the restorer at each planned ``t > 0`` and
    resamples ``x_{t-s}``. Returns the last clean-image prediction. When
    ``trace`` is a list, every state passed to the restorer is appended.
    """
    plan = plan_timesteps(sched.T, N)
    if mode == "sde" and not sched.has_beta:
        raise RuntimeError("sde sampling needs a schedule with a beta component")
    x_t = y
    x0_hat = None
    for t in plan.steps[:-1]:
        if trace is not None:
            trace.append(x_t.detach().clone())
        x0_hat = restorer(x_t, t, z)
        if not torch.isfinite(x0_hat).all():
            raise NumericalError(f"non-finite restorer output at t={t}", t=t)
        if t - plan.s == 0:
            # the final resample would only reproduce x0_hat
            break
        if mode == "sde":
            noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
            x_t = reverse_step_sde(x0_hat, x_t, t, plan.s, sched, noise)
        else:
            x_t = reverse_step(x0_hat, x_t, t, plan.s, sched)
        if not torch.isfinite(x_t).all():
            raise NumericalError(f"non-finite state at t={t - plan.s}", t=t - plan.s)
    return x0_hat


def _resolve(model, schedule: Optional[Schedule]):
    from .checkpoint import Checkpoint  # avoid import cycle at module load

    if isinstance(model, Checkpoint):
        net = model.network()
        sched = schedule or model.schedule
    else:
        net = model
        if schedule is None:
            raise ValueError("a schedule is required when passing a bare restorer")
        sched = schedule

    if isinstance(net, torch.nn.Module):
        net.eval()
        dtype = next(net.parameters()).dtype

        def restorer(x_t, t, z):
            with torch.no_grad():
                return net(x_t.to(dtype), t, z.to(dtype))
    else:
        restorer = net
    return restorer, sched


def sde_schedule(sched: Schedule, icfg: InferenceConfig) -> Schedule:
    if sched.has_beta:
        return sched
    return make_schedule(sched.T, sched.kind, icfg.beta_max)


def run_inference(y, z, model, icfg: InferenceConfig, *, schedule: Optional[Schedule] = None,
                  trace: Optional[list] = None) -> torch.Tensor:
    """Restore one cloudy image (CHW) or batch (NCHW) with ``icfg.N`` network calls.

    ``model`` is a :class:`~dbcr.checkpoint.Checkpoint`, a network, or any
    callable ``(x_t, t, z) -> x0_hat``; the latter two need ``schedule``.
    """
    restorer, sched = _resolve(model, schedule)
    icfg.validate(sched.T)
    yb, single = _as_batch(y)
    zb, _ = _as_batch(z)
    if zb.shape[0] != yb.shape[0] or zb.shape[2:] != yb.shape[2:]:
        raise ValueError(f"SAR z {tuple(zb.shape)} not aligned with cloudy y {tuple(yb.shape)}")
    gen = None
    if icfg.mode == "sde":
        sched = sde_schedule(sched, icfg)
        gen = torch.Generator().manual_seed(icfg.seed)
    out = sample(restorer, yb, zb, sched, icfg.N, icfg.mode, gen, trace)
    if trace is not None and single:
        trace[:] = [f[0] for f in trace]
    return out[0] if single else out


def batch_inference(pairs: Sequence[tuple], model, icfg: InferenceConfig, *,
                    schedule: Optional[Schedule] = None) -> list[torch.Tensor]:
    """Independent :func:`run_inference` per (y, z) pair, order preserved."""
    if not pairs:
        raise ValueError("batch_inference needs at least one (y, z) pair")
    shape = tuple(np.shape(pairs[0][0]))
    outs = []
    for i, (y, z) in enumerate(pairs):
        if tuple(np.shape(y)) != shape:
            raise ValueError(f"item {i}: shape {tuple(np.shape(y))} differs from {shape}")
        try:
            outs.append(run_inference(y, z, model, icfg, schedule=schedule))
        except (ValueError, NumericalError) as e:
            raise type(e)(f"item {i}: {e}") from e
    return outs

"""Bridge training: sample a timestep, mix, regress the clean image under L1."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import BackboneConfig, DBCRNet
from .bridge import Schedule, forward_mix, forward_mix_sde, make_schedule
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import ImageTriplet, stack_triplets
from .errors import TrainingDivergence
from .inference import InferenceConfig, run_inference
from .metrics import psnr

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    learning_rate: float = 5e-5
    T: int = 1000
    optimizer: str = "adam"
    seed: int = 0
    sde_beta_max: Optional[float] = None
    val_nfe: int = 1

    def validate(self):
        for name in ("epochs", "batch_size", "T", "val_nfe"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.sde_beta_max is not None and self.sde_beta_max < 0:
            raise ValueError("sde_beta_max must be >= 0")


@dataclass
class TrainState:
    model: DBCRNet
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    t_history: list[int] = field(default_factory=list)
    best_val_psnr: float = -math.inf


def init_model(cfg: BackboneConfig, seed: int, dtype=torch.float32) -> DBCRNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = DBCRNet(cfg)
    return net.to(dtype)


def init_state(model_cfg: BackboneConfig, cfg: TrainConfig, dtype=torch.float32) -> TrainState:
    net = init_model(model_cfg, cfg.seed, dtype)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    return TrainState(model=net, optimizer=opt)


def _batch_tensors(batch, dtype):
    if isinstance(batch, ImageTriplet):
        batch = [batch]
    if isinstance(batch, (list, tuple)) and batch and isinstance(batch[0], ImageTriplet):
        batch = stack_triplets(batch)
    return tuple(torch.as_tensor(np.asarray(a) if not torch.is_tensor(a) else a).to(dtype)
                 for a in batch)


def bridge_loss(net: DBCRNet, x0, y, z, t: int, sched: Schedule,
                noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean absolute error of the clean-image prediction at timestep ``t``."""
    if noise is None:
        x_t = forward_mix(x0, y, t, sched).x
    else:
        x_t = forward_mix_sde(x0, y, t, sched, noise).x
    return (net(x_t, t, z) - x0).abs().mean()


def train_step(batch, t: int, state: TrainState, sched: Schedule,
               noise: Optional[torch.Tensor] = None) -> tuple[TrainState, float]:
    """One Adam update on a batch of triplets (or an ``(x0, y, z)`` tensor tuple)."""
    dtype = next(state.model.parameters()).dtype
    x0, y, z = _batch_tensors(batch, dtype)
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss = bridge_loss(state.model, x0, y, z, t, sched, noise)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergence(f"non-finite loss at step {state.step + 1} (t={t})",
                                 step=state.step + 1, t=t)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    state.loss_history.append(value)
    state.t_history.append(int(t))
    return state, value


def evaluate_psnr(model, triplets: Sequence[ImageTriplet], sched: Schedule, N: int = 1) -> float:
    icfg = InferenceConfig(N=N)
    vals = []
    for tri in triplets:
        pred = run_inference(tri.y, tri.z, model, icfg, schedule=sched)
        vals.append(psnr(pred.clamp(0, 1).numpy(), tri.x0))
    return float(np.mean(vals))


def _rng_extra(rng: np.random.Generator, gen: torch.Generator) -> dict:
    return {"numpy_rng": rng.bit_generator.state, "torch_rng": gen.get_state()}


def train_loop(dataset: Sequence[ImageTriplet], cfg: TrainConfig, model_cfg: BackboneConfig, *,
               val: Sequence[ImageTriplet] = (), out_dir: Optional[Path] = None,
               resume: Optional[Path] = None, extra: Optional[dict] = None,
               dtype=torch.float32) -> Checkpoint:
    """Train for ``cfg.epochs`` epochs of ``ceil(len(dataset) / batch_size)`` steps.

    With ``out_dir`` set, writes ``last.ckpt`` each epoch, ``best.ckpt`` on
    validation-PSNR improvement (or every epoch without a validation set)
    and appends ``step<TAB>t<TAB>loss`` lines to ``loss_log.tsv``.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("training dataset is empty")
    sched = make_schedule(cfg.T, "sine", cfg.sde_beta_max)
    state = init_state(model_cfg, cfg, dtype)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.backbone.to_dict() != model_cfg.to_dict() or ck.schedule_params != sched.params():
            raise ValueError(f"{resume}: checkpoint config differs from the run config")
        state.model.load_state_dict(ck.params)
        if ck.optimizer_state is not None:
            state.optimizer.load_state_dict(ck.optimizer_state)
        state.step, state.epoch = ck.step, ck.epoch
        state.loss_history = list(ck.extra.get("loss_history", []))
        state.t_history = list(ck.extra.get("t_history", []))
        state.best_val_psnr = ck.extra.get("best_val_psnr", -math.inf)
        if "numpy_rng" in ck.extra:
            rng.bit_generator.state = ck.extra["numpy_rng"]
            gen.set_state(ck.extra["torch_rng"])

    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "loss_log.tsv", "a" if resume is not None else "w")

    def snapshot():
        meta = {"train_config": asdict(cfg), "loss_history": state.loss_history,
                "t_history": state.t_history, "best_val_psnr": state.best_val_psnr,
                **_rng_extra(rng, gen), **(extra or {})}
        return Checkpoint.from_model(state.model, sched, state.optimizer, step=state.step,
                                     epoch=state.epoch, seed=cfg.seed, extra=meta)

    n = len(dataset)
    try:
        while state.epoch < cfg.epochs:
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
                t = int(rng.integers(0, cfg.T + 1))
                noise = None
                if cfg.sde_beta_max is not None:
                    x0 = batch[0].x0
                    noise = torch.randn((len(batch), *x0.shape), generator=gen, dtype=dtype)
                _, loss = train_step(batch, t, state, sched, noise)
                if log_file is not None:
                    log_file.write(f"{state.step}\t{t}\t{loss:.8g}\n")
            state.epoch += 1
            log_file and log_file.flush()

            improved = True
            if val:
                score = evaluate_psnr(state.model, val, sched, cfg.val_nfe)
                improved = score > state.best_val_psnr
                if improved:
                    state.best_val_psnr = score
                log.info("epoch %d step %d loss %.5f val_psnr %.3f", state.epoch, state.step,
                         state.loss_history[-1], score)
            if out_dir is not None:
                ck = snapshot()
                save_checkpoint(ck, out_dir / "last.ckpt")
                if improved:
                    save_checkpoint(ck, out_dir / "best.ckpt")
    finally:
        if log_file is not None:
            log_file.close()
    return snapshot()

"""Diffusion-bridge cloud removal with SAR-optical attention fusion."""

from .backbone import BackboneConfig, DBCRNet, count_parameters
from .bridge import (Schedule, TimestepPlan, forward_mix, forward_mix_sde, make_schedule,
                     plan_timesteps, reverse_step, reverse_step_sde)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .inference import InferenceConfig, batch_inference, run_inference
from .training import TrainConfig, train_loop, train_step

__version__ = "0.1.0"

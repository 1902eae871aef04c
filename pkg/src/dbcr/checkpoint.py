"""Checkpoint persistence: a text header followed by a flat tensor blob.

File layout::

    DBCR-CKPT <format_version>\\n
    <single-line JSON header>\\n
    <raw little-endian tensor bytes, concatenated in header order>

The header carries the backbone config, schedule parameters, a tensor
index (name, shape, dtype, offset, nbytes), optimizer hyperparameters,
training counters, seed provenance, the config hash and a blob sha256.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone import BackboneConfig, DBCRNet
from .bridge import Schedule, schedule_from_params
from .errors import CheckpointError

FORMAT_VERSION = 1
MAGIC = "DBCR-CKPT"

_DTYPES = {
    torch.float32: "<f4", torch.float64: "<f8", torch.float16: "<f2",
    torch.int64: "<i8", torch.int32: "<i4", torch.uint8: "|u1", torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def config_hash(backbone: dict, schedule: dict) -> str:
    payload = json.dumps({"backbone": backbone, "schedule": schedule}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    backbone: BackboneConfig
    schedule_params: dict
    params: dict[str, torch.Tensor]
    optimizer_state: Optional[dict] = None
    step: int = 0
    epoch: int = 0
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)
    _net: Optional[DBCRNet] = field(default=None, repr=False, compare=False)

    @property
    def config_hash(self) -> str:
        return config_hash(self.backbone.to_dict(), self.schedule_params)

    @property
    def schedule(self) -> Schedule:
        return schedule_from_params(self.schedule_params)

    def network(self, dtype=torch.float32) -> DBCRNet:
        """Build (once) and return the network with these parameters, in eval mode."""
        if self._net is None or next(self._net.parameters()).dtype != dtype:
            net = DBCRNet(self.backbone)
            net.load_state_dict(self.params)
            self._net = net.to(dtype).eval()
        return self._net

    @classmethod
    def from_model(cls, net: DBCRNet, schedule: Schedule, optimizer=None, **kw) -> "Checkpoint":
        params = {k: v.detach().clone() for k, v in net.state_dict().items()}
        opt = optimizer.state_dict() if optimizer is not None else None
        return cls(backbone=net.cfg, schedule_params=schedule.params(), params=params,
                   optimizer_state=opt, **kw)


def _flatten_optimizer(state: dict):
    tensors, slots = {}, {}
    for idx, slot in state["state"].items():
        entry = {}
        for key, val in slot.items():
            if torch.is_tensor(val):
                name = f"optim.{idx}.{key}"
                tensors[name] = val
                entry[key] = {"tensor": name}
            else:
                entry[key] = {"value": val}
        slots[str(idx)] = entry
    return tensors, {"state": slots, "param_groups": state["param_groups"]}


def _unflatten_optimizer(meta: dict, tensors: dict) -> dict:
    state = {}
    for idx, entry in meta["state"].items():
        state[int(idx)] = {k: tensors[v["tensor"]] if "tensor" in v else v["value"]
                           for k, v in entry.items()}
    # JSON turns tuples such as Adam's betas into lists
    groups = [{k: tuple(v) if k == "betas" else v for k, v in g.items()} for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    tensors = {f"param.{k}": v for k, v in ckpt.params.items()}
    opt_meta = None
    if ckpt.optimizer_state is not None:
        opt_tensors, opt_meta = _flatten_optimizer(ckpt.optimizer_state)
        tensors.update(opt_tensors)
    extra = dict(ckpt.extra)
    for k, v in list(extra.items()):
        if torch.is_tensor(v):
            tensors[f"extra.{k}"] = v
            extra[k] = {"tensor": f"extra.{k}"}

    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"cannot serialize tensor {name} of dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        index.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype],
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)

    header = {
        "format_version": FORMAT_VERSION,
        "backbone": ckpt.backbone.to_dict(),
        "schedule": ckpt.schedule_params,
        "config_hash": ckpt.config_hash,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "optimizer": opt_meta,
        "extra": extra,
        "tensors": index,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(f"{MAGIC} {FORMAT_VERSION}\n".encode())
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            magic = f.readline().decode(errors="replace").split()
            if len(magic) != 2 or magic[0] != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file")
            if int(magic[1]) != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported format version {magic[1]}")
            header = json.loads(f.readline())
            blob = f.read()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    missing = {"backbone", "schedule", "config_hash", "tensors", "blob_sha256"} - set(header)
    if missing:
        raise CheckpointError(f"{path}: header lacks {sorted(missing)}")

    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointError(f"{path}: tensor blob checksum mismatch")
    expected = config_hash(header["backbone"], header["schedule"])
    if expected != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash {header['config_hash']} does not match contents ({expected})")

    tensors = {}
    for e in header["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(_TORCH_DTYPES[e["dtype"]])

    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    opt = _unflatten_optimizer(header["optimizer"], tensors) if header["optimizer"] else None
    extra = {k: tensors[v["tensor"]] if isinstance(v, dict) and set(v) == {"tensor"} else v
             for k, v in header["extra"].items()}
    return Checkpoint(
        backbone=BackboneConfig(**header["backbone"]), schedule_params=header["schedule"],
        params=params, optimizer_state=opt, step=header["step"], epoch=header["epoch"],
        seed=header["seed"], extra=extra,
    )

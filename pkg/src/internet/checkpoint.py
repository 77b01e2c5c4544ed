"""Single-file checkpoint container.

Layout::

    b"INTNCKPT"                  8-byte magic
    uint64 little-endian         length of the JSON header in bytes
    JSON header (utf-8)          format version, config + hash, iteration,
                                 tensor table, free-form metadata
    payload                      float32 little-endian, tensors back to back

The tensor table maps ``group -> name -> {shape, offset, count}`` where
offsets count float32 elements from the start of the payload. Groups are
``modality_transfer``, ``feature_extractor``, ``motion_head`` for a full
model, ``student`` for a distilled one, and ``optimizer.<name>`` for
optimiser moments.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, CheckpointShapeMismatch, ResumeMismatch

MAGIC = b"INTNCKPT"
FORMAT_VERSION = 1
MODEL_GROUPS = ("modality_transfer", "feature_extractor", "motion_head", "student")


@dataclass
class Checkpoint:
    groups: dict
    config: dict
    config_hash: str
    iteration: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def is_student(self):
        return "student" in self.groups

    @property
    def has_transfer(self):
        return "modality_transfer" in self.groups

    def parameter_count(self, groups=MODEL_GROUPS):
        return sum(t.numel() for g in groups for t in self.groups.get(g, {}).values())

    def check_resume(self, config_hash):
        if config_hash != self.config_hash:
            raise ResumeMismatch(f"checkpoint config hash {self.config_hash} != current {config_hash}")


def _payload(groups):
    table, chunks, offset = {}, [], 0
    for g in sorted(groups):
        table[g] = {}
        for name in sorted(groups[g]):
            t = groups[g][name].detach().cpu()
            arr = t.to(torch.float32).numpy().astype("<f4", copy=False).ravel()
            table[g][name] = {"shape": list(t.shape), "offset": offset, "count": int(arr.size)}
            chunks.append(arr.tobytes())
            offset += arr.size
    return table, b"".join(chunks)


def save_checkpoint(path, ckpt):
    table, payload = _payload(ckpt.groups)
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "iteration": ckpt.iteration,
        "tensors": table,
        "meta": ckpt.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(payload)
    tmp.replace(path)
    return path


def read_header(path):
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    return header, 16 + n


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    header, start = read_header(path)
    data = np.frombuffer(path.read_bytes()[start:], dtype="<f4")
    groups = {}
    for g, entries in header["tensors"].items():
        groups[g] = {}
        for name, e in entries.items():
            arr = data[e["offset"]: e["offset"] + e["count"]]
            if arr.size != e["count"]:
                raise CheckpointError(f"{path}: truncated payload at {g}.{name}")
            groups[g][name] = torch.from_numpy(arr.astype(np.float32)).reshape(e["shape"])
    return Checkpoint(groups, header["config"], header["config_hash"], header["iteration"], header.get("meta", {}))


def load_group(module, tensors, group):
    """``load_state_dict`` with shape errors mapped to ``CheckpointShapeMismatch``."""
    own = module.state_dict()
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    if missing or extra:
        raise CheckpointShapeMismatch(f"group {group}: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in tensors.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise CheckpointShapeMismatch(f"{group}.{k}: checkpoint {tuple(v.shape)} vs model {tuple(own[k].shape)}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in tensors.items()})


def optimizer_groups(name, optimizer):
    """Split an optimiser state into float tensors and JSON-able scalars."""
    sd = optimizer.state_dict()
    tensors, scalars = {}, {"param_groups": sd["param_groups"], "state": {}}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            if torch.is_tensor(v) and k != "step":
                tensors[f"{pid}.{k}"] = v
            else:
                scalars["state"].setdefault(str(pid), {})[k] = float(v)
    return {f"optimizer.{name}": tensors}, scalars


def restore_optimizer(optimizer, tensors, scalars):
    state = {}
    for key, v in tensors.items():
        pid, k = key.split(".", 1)
        state.setdefault(int(pid), {})[k] = v.clone()
    for pid, st in scalars["state"].items():
        for k, v in st.items():
            state.setdefault(int(pid), {})[k] = torch.tensor(v)
    optimizer.load_state_dict({"state": state, "param_groups": scalars["param_groups"]})

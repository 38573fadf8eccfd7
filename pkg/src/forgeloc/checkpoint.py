"""Checkpoint container.

A checkpoint is a NumPy ``.npz`` archive:

* ``param/<name>`` -- one array per state-dict entry, stored as little-endian
  float32 (``<f4``) with its original shape;
* ``__kind__`` -- which model the file holds (``fingerprint``, ``fusion``,
  ``detector``);
* ``__config__`` -- JSON echo of the configuration used to build and train it.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import MissingPrerequisiteError, ValidationError


def save_checkpoint(path: str | Path, kind: str, module: nn.Module, config: dict) -> Path:
    path = Path(path)
    arrays = {f"param/{k}": v.detach().cpu().numpy().astype("<f4") for k, v in module.state_dict().items()}
    arrays["__kind__"] = np.array(kind)
    arrays["__config__"] = np.array(json.dumps(config, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path, kind: str | None = None):
    """Return ``(state_dict, config)``."""
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(f"missing checkpoint {path}")
    with np.load(path, allow_pickle=False) as z:
        found = str(z["__kind__"])
        if kind is not None and found != kind:
            raise ValidationError(f"{path} holds a {found} checkpoint, expected {kind}")
        config = json.loads(str(z["__config__"]))
        state = {k[len("param/"):]: torch.from_numpy(z[k].astype(np.float32)) for k in z.files if k.startswith("param/")}
    return state, config


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def write_loss_csv(path: str | Path, history) -> Path:
    path = Path(path)
    path.write_text("step,loss\n" + "".join(f"{s},{l!r}\n" for s, l in history))
    return path

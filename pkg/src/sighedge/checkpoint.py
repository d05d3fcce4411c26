"""
Checkpoint file: magic, header length, JSON header, float64 little-endian parameters.

    b"SGHCKPT1" | uint64 LE header length | UTF-8 JSON header | flat parameter vector

The header stores the model name, its options, the feature width, the parameter
layout, and any extra metadata (p0, market config) needed to evaluate the model.
"""
from __future__ import annotations

import json
import struct

import numpy as np
from torch import nn

from .baselines import build_model
from .errors import ConfigError
from .training import flatten_params, param_index, set_flat_params

MAGIC = b"SGHCKPT1"


def save_checkpoint(path, model: nn.Module, name: str, options: dict, d_feat: int, meta: dict | None = None) -> None:
    header = {
        "model": name,
        "options": options,
        "d_feat": d_feat,
        "params": [[n, off, list(shape)] for n, off, shape in param_index(model)],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    flat = flatten_params(model).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    body = data[16 + n:]
    if len(body) % 8:
        raise ConfigError(f"checkpoint {path} is truncated")
    return header, np.frombuffer(body, dtype="<f8").copy()


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    """Rebuild the model described in the header and load its parameters."""
    header, flat = read_checkpoint(path)
    model = build_model(header["model"], header["options"], header["d_feat"])
    layout = [[n, off, list(shape)] for n, off, shape in param_index(model)]
    if layout != header["params"]:
        raise ConfigError(f"checkpoint {path} layout does not match model {header['model']!r}")
    set_flat_params(model, flat)
    return model, header

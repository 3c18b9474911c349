"""Binary checkpoint format shared by every model.

Layout (little-endian):
    magic   8 bytes  b"ADVCKPT\\0"
    version u32
    config  u32 byte length, then UTF-8 JSON (includes the model kind)
    count   u32 number of tensors
    tensors in declaration order, each:
        u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
        prod(dims) float64 values in row-major order
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"ADVCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, state: dict, config: dict):
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, value in state.items():
            arr = np.asarray(value, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def read_checkpoint(path) -> tuple:
    """Returns (config dict, ordered name -> array)."""
    data = Path(path).read_bytes()
    try:
        return _parse(data, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc


def _parse(data: bytes, path) -> tuple:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n,) = take("<I")
    config = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = take("<I")
    state = OrderedDict()
    for _ in range(count):
        (n,) = take("<I")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        state[name] = arr.astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return config, state


def save_model(path, model, kind: str):
    config = {"kind": kind, "model": model.config.to_dict()}
    write_checkpoint(path, model.state_dict(), config)


def load_model(path):
    """Rebuild an ASR model, critic or LM from a checkpoint."""
    from .asr import AsrConfig, AsrModel
    from .clm import ClmConfig, Critic
    from .rnnlm import LmConfig, RnnLm

    config, state = read_checkpoint(path)
    kinds = {"asr": (AsrConfig, AsrModel), "clm": (ClmConfig, Critic), "lm": (LmConfig, RnnLm)}
    if config.get("kind") not in kinds:
        raise CheckpointError(f"{path}: unknown model kind {config.get('kind')!r}")
    cfg_cls, model_cls = kinds[config["kind"]]
    try:
        model = model_cls(cfg_cls(**config["model"]), np.random.default_rng(0))
        model.load_state_dict(state)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: checkpoint does not match its model ({exc})") from exc
    return model

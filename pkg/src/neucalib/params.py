"""Named-parameter store: init, tape binding, and binary serialization.

Parameters are plain float64 arrays in an insertion-ordered dict; every
training step binds them onto a fresh tape. The on-disk format (magic
``NCLP``) is name-length/name/shape/data records, little-endian, written
in dict order so identical runs produce identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ConfigError

PARAMS_MAGIC = b"NCLP"
PARAMS_VERSION = 1

ParamDict = dict[str, np.ndarray]
BoundParams = dict[str, Tensor]


def bind(tape: Tape, params: ParamDict) -> BoundParams:
    """Create tracked leaves for every parameter on the given tape."""
    return {name: tape.parameter(value) for name, value in params.items()}


def gradients(bound: BoundParams) -> ParamDict:
    """Collect gradients after backward(); missing ones become zeros."""
    out = {}
    for name, tensor in bound.items():
        g = tensor.grad
        out[name] = np.zeros_like(tensor.value) if g is None else g
    return out


def save_params(params: ParamDict, path) -> None:
    parts = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path) -> ParamDict:
    blob = Path(path).read_bytes()
    if blob[:4] != PARAMS_MAGIC:
        raise ConfigError(f"bad parameter file magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != PARAMS_VERSION:
        raise ConfigError(f"unsupported parameter file version {version}")
    off = 12
    params: ParamDict = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        arr = np.frombuffer(blob, "<f8", rows * cols, off).reshape(rows, cols).copy()
        off += 8 * rows * cols
        params[name] = arr
    if off != len(blob):
        raise ConfigError(f"parameter file has {len(blob) - off} trailing bytes")
    return params


def check_shapes(params: ParamDict, template: ParamDict) -> None:
    """Loaded parameters must exactly mirror the configured model."""
    missing = set(template) - set(params)
    extra = set(params) - set(template)
    if missing or extra:
        raise ConfigError(
            f"parameter names do not match config (missing {sorted(missing)}, "
            f"unexpected {sorted(extra)})")
    for name, value in template.items():
        if params[name].shape != value.shape:
            raise ConfigError(
                f"parameter {name!r} has shape {params[name].shape}, "
                f"config implies {value.shape}")

"""Versioned little-endian binary checkpoints.

Layout::

    b"UTCK"  u16 version=1  u8 float width (4|8)  3 x u32 input shape
    u32 n_layers, then per layer: u8 type code + arguments
        conv2d: 5 x u32 (filters, kh, kw, sh, sw)   dense: u32 units
        dropout: f64 rate                            others: nothing
    u32 n_arrays, then per parameter array (declaration order):
        u8 ndim, ndim x u32 dims, raw values
    u32 metadata length + UTF-8 JSON (sorted keys)
    u32 n_extra, then per extra array: u16 name length, name, u8 float width,
        u8 ndim, dims, raw values

The metadata/extra sections carry preset info, training history and
optimizer state for resuming; plain inference checkpoints leave them empty.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from ..errors import ScanFormatError
from .layers import layer_from_spec
from .model import Sequential

MAGIC = b"UTCK"
VERSION = 1
_CODES = {"conv2d": 1, "dense": 2, "relu": 3, "dropout": 4, "flatten": 5, "softmax": 6}
_KINDS = {v: k for k, v in _CODES.items()}


class CheckpointError(ScanFormatError):
    pass


def _dtype_for(width):
    return {4: np.dtype("<f4"), 8: np.dtype("<f8")}[width]


def _write_array(out, arr, dtype):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    out.write(struct.pack("<B", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(arr.tobytes())


def _read(buf, fmt):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def _read_array(buf, dtype):
    (ndim,) = _read(buf, "<B")
    dims = _read(buf, f"<{ndim}I") if ndim else ()
    count = int(np.prod(dims)) if dims else 1
    raw = buf.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise CheckpointError("truncated array payload")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def dump_checkpoint(model: Sequential, metadata=None, extras=None) -> bytes:
    out = io.BytesIO()
    width = model.dtype.itemsize
    dtype = _dtype_for(width)
    out.write(MAGIC)
    out.write(struct.pack("<HB3I", VERSION, width, *model.input_shape))
    specs = model.specs()
    out.write(struct.pack("<I", len(specs)))
    for kind, *args in specs:
        out.write(struct.pack("<B", _CODES[kind]))
        if kind == "conv2d":
            out.write(struct.pack("<5I", *args))
        elif kind == "dense":
            out.write(struct.pack("<I", *args))
        elif kind == "dropout":
            out.write(struct.pack("<d", *args))
    arrays = model.param_arrays()
    out.write(struct.pack("<I", len(arrays)))
    for arr in arrays:
        _write_array(out, arr, dtype)
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.write(struct.pack("<I", len(meta)))
    out.write(meta)
    extras = extras or {}
    out.write(struct.pack("<I", len(extras)))
    for name in sorted(extras):
        arr = np.asarray(extras[name])
        w = 4 if arr.dtype == np.float32 else 8
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", w))
        _write_array(out, arr, _dtype_for(w))
    return out.getvalue()


def load_checkpoint_bytes(data: bytes):
    """Returns ``(model, metadata, extras)``."""
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, width, h, w, c = _read(buf, "<HB3I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if width not in (4, 8):
        raise CheckpointError(f"bad float width {width}")
    (n_layers,) = _read(buf, "<I")
    specs = []
    for _ in range(n_layers):
        (code,) = _read(buf, "<B")
        kind = _KINDS.get(code)
        if kind is None:
            raise CheckpointError(f"unknown layer code {code}")
        if kind == "conv2d":
            specs.append((kind, *_read(buf, "<5I")))
        elif kind == "dense":
            specs.append((kind, *_read(buf, "<I")))
        elif kind == "dropout":
            specs.append((kind, *_read(buf, "<d")))
        else:
            specs.append((kind,))
    dtype = _dtype_for(width)
    model = Sequential([layer_from_spec(s) for s in specs], (h, w, c), seed=0, dtype=dtype.newbyteorder("="))
    (n_arrays,) = _read(buf, "<I")
    arrays = [_read_array(buf, dtype) for _ in range(n_arrays)]
    model.set_weights(arrays)
    (meta_len,) = _read(buf, "<I")
    metadata = json.loads(buf.read(meta_len).decode("utf-8"))
    (n_extra,) = _read(buf, "<I")
    extras = {}
    for _ in range(n_extra):
        (name_len,) = _read(buf, "<H")
        name = buf.read(name_len).decode("utf-8")
        (w_extra,) = _read(buf, "<B")
        extras[name] = _read_array(buf, _dtype_for(w_extra))
    return model, metadata, extras


def save_checkpoint(path, model, metadata=None, extras=None) -> None:
    data = dump_checkpoint(model, metadata, extras)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())

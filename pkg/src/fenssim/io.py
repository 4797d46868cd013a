"""Binary model files.

FP32 layout (magic ``FENS1``)::

    magic | u32 len, utf-8 descriptor | u32 tensor count
    per tensor: u32 len, utf-8 name | u32 ndim | ndim x u32 dims | f32 data

The quantised layout (magic ``FENSQ1``) is identical except that each
tensor's data is a f32 scale followed by int8 codes.  All integers and
reals are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .numerics import ParamSet
from .quantize import QuantizedTensor

MAGIC = b"FENS1"
MAGIC_Q = b"FENSQ1"


class FormatError(ValueError):
    pass


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u32(len(b)) + b


def encode_params(params: ParamSet, descriptor: str) -> bytes:
    out = [MAGIC, _str(descriptor), _u32(len(params))]
    for name, v in params.items():
        v = np.asarray(v)
        out += [_str(name), _u32(v.ndim)] + [_u32(s) for s in v.shape]
        out.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return b"".join(out)


def encode_quantized(qparams: dict, descriptor: str) -> bytes:
    out = [MAGIC_Q, _str(descriptor), _u32(len(qparams))]
    for name, q in qparams.items():
        out += [_str(name), _u32(len(q.shape))] + [_u32(s) for s in q.shape]
        out.append(struct.pack("<f", q.scale))
        out.append(np.ascontiguousarray(q.values, dtype=np.int8).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated model file")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def shape(self) -> tuple:
        return tuple(self.u32() for _ in range(self.u32()))


def decode(buf: bytes):
    """Returns ``(descriptor, params, quantized)``."""
    if buf.startswith(MAGIC_Q):
        quantized, r = True, _Reader(buf[len(MAGIC_Q) :])
    elif buf.startswith(MAGIC):
        quantized, r = False, _Reader(buf[len(MAGIC) :])
    else:
        raise FormatError("not a FENS model file")
    descriptor = r.str()
    params = {}
    for _ in range(r.u32()):
        name = r.str()
        shape = r.shape()
        size = int(np.prod(shape, dtype=np.int64))
        if quantized:
            scale = struct.unpack("<f", r.take(4))[0]
            vals = np.frombuffer(r.take(size), dtype=np.int8).reshape(shape).copy()
            params[name] = QuantizedTensor(shape, float(scale), vals)
        else:
            params[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last tensor")
    return descriptor, params, quantized


def save(path, params, descriptor: str) -> None:
    quantized = bool(params) and all(isinstance(v, QuantizedTensor) for v in params.values())
    data = encode_quantized(params, descriptor) if quantized else encode_params(params, descriptor)
    Path(path).write_bytes(data)


def load(path):
    return decode(Path(path).read_bytes())


def mlp_descriptor(arch) -> str:
    return "mlp:" + "-".join(str(a) for a in arch)


def parse_mlp_descriptor(desc: str) -> tuple:
    if not desc.startswith("mlp:"):
        raise FormatError(f"not an MLP descriptor: {desc!r}")
    return tuple(int(a) for a in desc[4:].split("-"))

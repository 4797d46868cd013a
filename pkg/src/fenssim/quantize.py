"""Symmetric per-tensor INT8 post-training quantisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import FLOAT, NonFiniteError, ParamSet

QMAX = 127
FP32_BYTES = 4
SCALE_BYTES = 4


@dataclass
class QuantizedTensor:
    shape: tuple
    scale: float
    values: np.ndarray  # int8 in [-127, 127]

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        self.values = np.asarray(self.values, dtype=np.int8)
        if self.values.size and self.values.min() < -QMAX:
            raise ValueError("-128 is not a valid symmetric code")


QuantizedParamSet = dict  # name -> QuantizedTensor, ordered like the source


def quantize_tensor(x: np.ndarray) -> QuantizedTensor:
    x = np.asarray(x, dtype=FLOAT)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("cannot quantise non-finite values")
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    # scale is stored as float32 on the wire; use that exact value here too
    scale = float(FLOAT(amax / QMAX)) if amax > 0 else 1.0
    q = np.clip(np.rint(x.astype(np.float64) / scale), -QMAX, QMAX).astype(np.int8)
    return QuantizedTensor(tuple(x.shape), scale, q)


def dequantize_tensor(q: QuantizedTensor) -> np.ndarray:
    return (q.values.astype(np.float64) * q.scale).astype(FLOAT).reshape(q.shape)


def quantize_params(params: ParamSet) -> QuantizedParamSet:
    return {k: quantize_tensor(v) for k, v in params.items()}


def dequantize(qparams: QuantizedParamSet) -> ParamSet:
    return {k: dequantize_tensor(q) for k, q in qparams.items()}


def is_quantized(p) -> bool:
    return bool(p) and all(isinstance(v, QuantizedTensor) for v in p.values())


def payload_bytes(p) -> int:
    """Protocol bytes for shipping ``p``.

    FP32 sets cost 4 bytes per scalar; quantised sets cost 1 byte per
    scalar plus a 4-byte scale per tensor.  Names and headers are free.
    """
    total = 0
    for v in p.values():
        if isinstance(v, QuantizedTensor):
            total += v.values.size + SCALE_BYTES
        else:
            total += int(np.asarray(v).size) * FP32_BYTES
    return total

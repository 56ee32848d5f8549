"""Affine uniform quantization shared by the engine, estimator and calibrator.

Codes are unsigned integers in ``[0, 2**bits - 1]``; a real value ``v`` maps
to ``round((v - offset) / scale)`` and back to ``scale * code + offset``.
Rounding is half-away-from-zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_BITS = 2
MAX_BITS = 8


def check_bits(bits: int) -> int:
    if not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bitwidth must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")
    return int(bits)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    offset: float
    bits: int

    def __post_init__(self):
        check_bits(self.bits)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale!r}")
        if not np.isfinite(self.offset):
            raise ValueError(f"offset must be finite, got {self.offset!r}")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def clip_lo(self) -> float:
        return self.offset

    @property
    def clip_hi(self) -> float:
        return self.offset + self.scale * self.qmax

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "offset": float(self.offset), "bits": int(self.bits)}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), float(d["offset"]), int(d["bits"]))


@dataclass(frozen=True)
class QuantTensor:
    codes: np.ndarray
    params: QuantParams

    @property
    def shape(self) -> tuple:
        return self.codes.shape


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantile_range(values, q: float) -> tuple[float, float]:
    """Empirical ``(q, 1 - q)`` quantiles, linear interpolation at rank ``q*(n-1)``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot fit quantization parameters to an empty tensor")
    if not 0.0 <= q < 0.5:
        raise ValueError(f"quantile q must lie in [0, 0.5), got {q!r}")
    if q == 0.0:
        return float(v.min()), float(v.max())
    lo, hi = np.quantile(v, [q, 1.0 - q], method="linear")
    return float(lo), float(hi)


def params_from_range(lo: float, hi: float, bits: int) -> QuantParams:
    """Grid spanning ``[lo, hi]``; a degenerate range gets scale 1 anchored at ``lo``."""
    bits = check_bits(bits)
    if not hi > lo:
        return QuantParams(1.0, float(lo), bits)
    return QuantParams((hi - lo) / ((1 << bits) - 1), float(lo), bits)


def fit_params(tensor, bits: int, q: float = 0.0) -> QuantParams:
    lo, hi = quantile_range(tensor, q)
    return params_from_range(lo, hi, bits)


def quantize_codes(values, params: QuantParams) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    codes = round_half_away((v - params.offset) / params.scale)
    return np.clip(codes, 0, params.qmax).astype(np.int64)


def quantize(values, params: QuantParams) -> QuantTensor:
    return QuantTensor(quantize_codes(values, params), params)


def dequantize(qt: QuantTensor) -> np.ndarray:
    return dequantize_codes(qt.codes, qt.params)


def dequantize_codes(codes, params: QuantParams) -> np.ndarray:
    return params.scale * np.asarray(codes, dtype=np.float64) + params.offset


def in_range_mask(values, params: QuantParams) -> np.ndarray:
    """Where the straight-through gradient of ``quantize`` is 1."""
    v = np.asarray(values)
    return (v >= params.clip_lo) & (v <= params.clip_hi)

"""
Quantizer Module (quantizer.py)

Row-wise quantization math for embedding rows. Each row gets its own scale:
INT8 rows are stored as round(row / scale) clamped to [-128, 127], FP16 rows as
16-bit floats of row / scale, FP32 rows as they are. Both nearest and
stochastic rounding are available; stochastic rounding is unbiased.

The functions here are pure given an explicit random source. The vectorised
`*_rows` forms take a (rows x dim) matrix with one scale per row and are what
the embedding store calls; the single-row forms wrap them.
"""

import enum
import logging
import os
from typing import Optional, Tuple, Union

import numpy as np

from errors import FormatError, NumericError

# Configure logging
logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(module)s - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(os.environ.get("LOG_LEVEL", "INFO").upper())
    logger.propagate = False

FP16_MAX = 65504.0  # largest finite 16-bit float


class PrecisionTier(enum.IntEnum):
    """Precision class of a row. The value is the tag written into the extra word."""
    FP32 = 0
    FP16 = 1
    INT8 = 2

    @property
    def bits(self) -> int:
        return {PrecisionTier.FP32: 32, PrecisionTier.FP16: 16, PrecisionTier.INT8: 8}[self]

    @property
    def int_range(self) -> Tuple[int, int]:
        """[I_min, I_max] = [-2^(b-1), 2^(b-1) - 1]."""
        b = self.bits
        return -(2 ** (b - 1)), 2 ** (b - 1) - 1

    @property
    def dtype(self) -> np.dtype:
        return {
            PrecisionTier.FP32: np.dtype(np.float32),
            PrecisionTier.FP16: np.dtype(np.float16),
            PrecisionTier.INT8: np.dtype(np.int8),
        }[self]


class ScalePolicy(str, enum.Enum):
    # scale = e_abs_max / I_max; the largest coordinate maps exactly onto 127
    SYMMETRIC = "symmetric"
    # scale = e_abs_max / (I_max - I_min);
    # the largest coordinate maps to ~255 and is clamped
    BYTE_RANGE = "byte_range"


class RoundingMode:
    """Nearest (round-half-to-even) or stochastic rounding with a seedable generator."""

    NEAREST = "nearest"
    STOCHASTIC = "stochastic"

    def __init__(self, kind: str = NEAREST, seed: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        if kind not in (self.NEAREST, self.STOCHASTIC):
            raise ValueError(f"Unknown rounding mode '{kind}'")
        self.kind = kind
        self.rng = rng if rng is not None else np.random.default_rng(seed)

    @classmethod
    def nearest(cls) -> "RoundingMode":
        return cls(cls.NEAREST)

    @classmethod
    def stochastic(cls, seed: Optional[int] = None) -> "RoundingMode":
        return cls(cls.STOCHASTIC, seed=seed)

    @property
    def is_stochastic(self) -> bool:
        return self.kind == self.STOCHASTIC

    def round_to_int(self, x: np.ndarray) -> np.ndarray:
        if not self.is_stochastic:
            return np.rint(x)
        floor = np.floor(x)
        # floor(x) with probability ceil(x) - x, ceil(x) otherwise
        return floor + (self.rng.random(x.shape) < (x - floor))

    def round_to_fp16(self, x: np.ndarray) -> np.ndarray:
        near = x.astype(np.float16)
        if not self.is_stochastic:
            return near
        near_f = near.astype(np.float64)
        above = near_f > x
        lo = np.where(above, np.nextafter(near, np.float16(-np.inf)), near)
        hi = np.where(above, near, np.nextafter(near, np.float16(np.inf)))
        lo_f = lo.astype(np.float64)
        hi_f = hi.astype(np.float64)
        gap = hi_f - lo_f
        p_hi = np.divide(x - lo_f, gap, out=np.zeros_like(x), where=gap > 0)
        out = np.where(self.rng.random(x.shape) < p_hi, hi, lo).astype(np.float16)
        # exactly representable values need no draw
        return np.where(near_f == x, near, out)

    def __repr__(self) -> str:
        return f"RoundingMode({self.kind!r})"


def payload_nbytes(tier: PrecisionTier, dim: int) -> int:
    return PrecisionTier(tier).dtype.itemsize * dim


def _as_matrix(rows: Union[np.ndarray, list]) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def compute_scales(rows: np.ndarray, tier: PrecisionTier,
                   policy: ScalePolicy = ScalePolicy.SYMMETRIC) -> np.ndarray:
    """One scale per row. All-zero rows get scale 0 at every tier."""
    rows = _as_matrix(rows)
    if not np.all(np.isfinite(rows)):
        raise NumericError("Cannot compute a scale for a row with non-finite values")
    tier = PrecisionTier(tier)
    abs_max = np.abs(rows).max(axis=1) if rows.shape[1] else np.zeros(rows.shape[0])
    nonzero = abs_max > 0

    if tier == PrecisionTier.INT8:
        i_min, i_max = tier.int_range
        denominator = i_max if ScalePolicy(policy) == ScalePolicy.SYMMETRIC else i_max - i_min
        return abs_max / denominator
    if tier == PrecisionTier.FP16:
        # scale 1 unless the row would overflow the 16-bit float range
        return np.where(nonzero, np.maximum(1.0, abs_max / FP16_MAX), 0.0)
    return np.where(nonzero, 1.0, 0.0)


def quantize_rows(rows: np.ndarray, tier: PrecisionTier, scales: np.ndarray,
                  rounding: Optional[RoundingMode] = None) -> np.ndarray:
    """Quantize each row with its scale; returns an int8 / float16 / float32 payload matrix."""
    tier = PrecisionTier(tier)
    if tier == PrecisionTier.FP32:
        return np.array(rows, dtype=np.float32, ndmin=2)

    rows = _as_matrix(rows)
    rounding = rounding or RoundingMode.nearest()
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 1)
    scaled = np.divide(rows, scales, out=np.zeros_like(rows), where=scales > 0)

    if tier == PrecisionTier.INT8:
        i_min, i_max = tier.int_range
        return np.clip(rounding.round_to_int(scaled), i_min, i_max).astype(np.int8)
    return rounding.round_to_fp16(np.clip(scaled, -FP16_MAX, FP16_MAX))


def dequantize_rows(payload: np.ndarray, tier: PrecisionTier, scales: np.ndarray) -> np.ndarray:
    tier = PrecisionTier(tier)
    payload = np.asarray(payload)
    if payload.dtype != tier.dtype:
        raise FormatError(f"{tier.name} payload must be {tier.dtype}, got {payload.dtype}")
    if payload.ndim == 1:
        payload = payload[None, :]
    if tier == PrecisionTier.FP32:
        return payload.astype(np.float64)
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 1)
    return payload.astype(np.float64) * scales


# --- Single-row forms ---
def compute_scale(row: np.ndarray, tier: PrecisionTier,
                  policy: ScalePolicy = ScalePolicy.SYMMETRIC) -> float:
    return float(compute_scales(np.asarray(row, dtype=np.float64)[None, :], tier, policy)[0])


def quantize_row(row: np.ndarray, tier: PrecisionTier, scale: float,
                 mode: Optional[RoundingMode] = None) -> np.ndarray:
    return quantize_rows(np.asarray(row)[None, :], tier, np.array([scale]), mode)[0]


def dequantize_row(payload: np.ndarray, tier: PrecisionTier, scale: float) -> np.ndarray:
    return dequantize_rows(np.asarray(payload)[None, :], tier, np.array([scale]))[0]

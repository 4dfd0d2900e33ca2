from __future__ import annotations

import math

from dataclasses import dataclass
from typing import Union

import numpy as np

from modules.errors import EncodeOutOfBand, OverflowDetected


def floor_strict(x: float) -> int:
    """Largest integer strictly smaller than ``x``, so integer arguments map down by one."""
    k = math.floor(x)
    return k - 1 if k == x else k


@dataclass(frozen=True)
class QuantizerSpec:
    """
    Saturating uniform quantizer.

    Attributes
    ----------------
    delta: :class:`float`
        Sensitivity, the distance between two adjacent levels.
    q_sat: :class:`int`
        Saturation value, the largest level magnitude the quantizer emits.
    """

    delta: float
    q_sat: int

    def __post_init__(self):
        if not self.delta > 0 or not math.isfinite(self.delta):
            raise ValueError(f"Quantizer sensitivity must be positive and finite, got {self.delta}")
        if self.q_sat < 1:
            raise ValueError(f"Quantizer saturation must be at least 1, got {self.q_sat}")

    @property
    def band(self) -> float:
        """Edge of the unsaturated band, (q_sat + 1/2)Δ."""
        return (self.q_sat + 0.5) * self.delta


@dataclass(frozen=True)
class QuantizedValue:
    level: int
    spec: QuantizerSpec

    @property
    def reconstruct(self) -> float:
        return self.level * self.spec.delta


@dataclass(frozen=True)
class SignedResidue:
    residue: int
    modulus: int


def quantize(spec: QuantizerSpec, x: float) -> QuantizedValue:
    """
    Quantize a real number.

    Values above the band saturate to ``q_sat``, values at or below its negative
    saturate to ``-q_sat``, everything else maps to ``floor_strict(x/Δ + 1/2)``.

    Parameters
    ----------------
    spec: :class:`QuantizerSpec`
        The quantizer.
    x: :class:`float`
        Finite input.

    Returns
    -------
    :class:`QuantizedValue`
        The level together with the spec that produced it.
    """
    if not math.isfinite(x):
        raise ValueError(f"Cannot quantize non-finite value {x}")

    if x > spec.band:
        level = spec.q_sat
    elif x <= -spec.band:
        level = -spec.q_sat
    else:
        # x/Δ can round past the band edge at the boundary itself
        level = max(-spec.q_sat, min(spec.q_sat, floor_strict(x / spec.delta + 0.5)))

    return QuantizedValue(level=level, spec=spec)


def quantize_vector(spec: QuantizerSpec, v) -> np.ndarray:
    """Element-wise :func:`quantize`, returns an integer array of the same shape."""
    values = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("Cannot quantize non-finite values")

    scaled = values / spec.delta + 0.5
    inner = np.floor(scaled)
    inner = np.where(inner == scaled, inner - 1, inner)
    inner = np.clip(inner, -spec.q_sat, spec.q_sat)

    levels = np.where(values > spec.band, spec.q_sat, np.where(values <= -spec.band, -spec.q_sat, inner))
    return levels.astype(np.int64)


def quantize_matrix(spec: QuantizerSpec, m) -> np.ndarray:
    return quantize_vector(spec, np.atleast_2d(np.asarray(m, dtype=float)))


def is_saturated(spec: QuantizerSpec, x: float) -> bool:
    return abs(quantize(spec, x).level) == spec.q_sat


def encode_signed(n: int, z: Union[int, np.integer]) -> SignedResidue:
    """
    Map a signed integer into Z_N, negatives wrapping to the top third.

    Raises
    ------
    :class:`EncodeOutOfBand`
        If |z| >= N/3.
    """
    z = int(z)
    if 3 * abs(z) >= n:
        raise EncodeOutOfBand(f"|{z}| is outside the encodable band of N={n}")

    return SignedResidue(residue=z % n, modulus=n)


def decode_signed(n: int, residue: int) -> int:
    """
    Inverse of :func:`encode_signed`.

    Raises
    ------
    :class:`OverflowDetected`
        If the decoded magnitude lands in the middle third of Z_N, which only happens
        when a homomorphic result outgrew the key.
    """
    if not 0 <= residue < n:
        raise ValueError(f"Residue {residue} is not in [0, {n})")

    value = residue - n if 2 * residue > n else residue
    if 3 * abs(value) >= n:
        raise OverflowDetected(f"Decoded value {value} is in the overflow band of N={n}")

    return value

"""Angle-delay channel matrix (ADCM) fingerprints.

H = V^H @ H_sf @ F maps a space-frequency channel onto angle-of-arrival rows
and delay-tap columns.  Both transforms are unitary, so energy is kept.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def _dft(k: int) -> np.ndarray:
    idx = np.arange(k)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / k) / np.sqrt(k)


def unitary_dft(K: int) -> np.ndarray:
    """[F]_{i,j} = exp(-j 2 pi i j / K) / sqrt(K)."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    return _dft(K).copy()


@lru_cache(maxsize=None)
def _shifted(l: int) -> np.ndarray:
    i = np.arange(l)[:, None]
    j = np.arange(l)[None, :]
    return np.exp(-2j * np.pi * i * (j - l // 2) / l) / np.sqrt(l)


def shifted_dft(L: int) -> np.ndarray:
    """[V]_{i,j} = exp(-j 2 pi i (j - L/2) / L) / sqrt(L); needs even L."""
    if L < 1 or L % 2:
        raise ValueError(f"L must be a positive even number, got {L}")
    return _shifted(L).copy()


@dataclass
class Fingerprint:
    entries: np.ndarray  # complex (L, K)
    position: tuple[float, float] | None = None
    domain_label: int | None = None


@dataclass
class RealFingerprintTensor:
    values: np.ndarray  # (..., 2, L, K): real parts then imaginary parts
    scale: float

    def to_complex(self) -> np.ndarray:
        return (self.values[..., 0, :, :] + 1j * self.values[..., 1, :, :]) * self.scale


def adcm(channels: np.ndarray) -> np.ndarray:
    """Batched transform of (..., L, K) space-frequency channels."""
    channels = np.asarray(channels)
    if channels.ndim < 2:
        raise ValueError(f"expected (..., L, K) channels, got shape {channels.shape}")
    L, K = channels.shape[-2:]
    return _shifted_checked(L).conj().T @ channels @ _dft(K)


def _shifted_checked(L: int) -> np.ndarray:
    if L % 2:
        raise ValueError(f"L must be even, got {L}")
    return _shifted(L)


def inverse_adcm(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H)
    L, K = H.shape[-2:]
    return _shifted_checked(L) @ H @ _dft(K).conj().T


def to_adcm(channel, domain_label: int | None = None) -> Fingerprint:
    """Fingerprint of a :class:`~dynaloc.channel_sim.ChannelMatrix` (or a bare array)."""
    entries = getattr(channel, "entries", channel)
    position = getattr(channel, "position", None)
    entries = np.asarray(entries)
    if entries.ndim != 2:
        raise ValueError(f"expected an (L, K) matrix, got shape {entries.shape}")
    return Fingerprint(adcm(entries), position, domain_label)


def to_real_tensor(H, scale: float) -> RealFingerprintTensor:
    """Stack real and imaginary parts as two channels, divided by ``scale``."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    entries = np.asarray(getattr(H, "entries", H))
    return RealFingerprintTensor(np.stack([entries.real, entries.imag], axis=-3) / scale, float(scale))


def mean_frobenius_norm(H: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(np.asarray(H), axis=(-2, -1))))

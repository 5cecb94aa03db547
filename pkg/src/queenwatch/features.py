"""Differential features, z-score scaling and the audio band-energy scalar.

Feature order is fixed everywhere: 0 = dT, 1 = dH, 2 = dP, 3 = audio RMS.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateFeature, DimensionMismatch, EmptySignal, RateTooLow

FEATURE_NAMES = ("dT", "dH", "dP", "audio")
FEATURE_KEYS = ("t", "h", "p", "a")
ENV_MASK = (0, 1, 2)
ALL_MASK = (0, 1, 2, 3)

BAND_LO_HZ = 200.0
BAND_HI_HZ = 700.0


def parse_mask(text) -> tuple:
    """'t,h,p' -> (0, 1, 2). Accepts an iterable of indices as well."""
    if isinstance(text, str):
        keys = [k.strip().lower() for k in text.split(",") if k.strip()]
        try:
            idx = sorted({FEATURE_KEYS.index(k[0]) for k in keys})
        except ValueError:
            raise ValueError(f"unknown feature key in {text!r}; use t,h,p,a") from None
    else:
        idx = sorted(set(int(i) for i in text))
    if not idx or idx[0] < 0 or idx[-1] > 3:
        raise ValueError(f"invalid feature subset {text!r}")
    return tuple(idx)


def mask_label(mask) -> str:
    return "+".join(FEATURE_NAMES[i] for i in mask)


def mask_to_bits(mask) -> int:
    return sum(1 << i for i in mask)


def bits_to_mask(bits: int) -> tuple:
    return tuple(i for i in range(4) if bits >> i & 1)


@dataclass(frozen=True)
class FeatureVector:
    values: tuple
    mask: tuple = ENV_MASK

    def __post_init__(self):
        if len(self.values) != len(self.mask):
            raise DimensionMismatch(f"{len(self.values)} values for mask {self.mask}")

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype or float)


def compute_differentials(s, mask=ENV_MASK) -> FeatureVector:
    full = (s.t_in - s.t_out, s.h_in - s.h_out, s.p_in - s.p_out,
            s.audio_rms if s.audio_rms is not None else math.nan)
    return FeatureVector(tuple(full[i] for i in mask), tuple(mask))


def differentials_from_env(env: Sequence[float], audio=None, mask=ENV_MASK) -> tuple:
    """Same as compute_differentials, from a raw (t_in, t_out, h_in, h_out, p_in, p_out) tuple."""
    t_in, t_out, h_in, h_out, p_in, p_out = env
    full = (t_in - t_out, h_in - h_out, p_in - p_out,
            audio if audio is not None else math.nan)
    return tuple(full[i] for i in mask)


def feature_matrix(dataset, mask=ENV_MASK) -> np.ndarray:
    if 3 in mask and not dataset.has_audio:
        raise DimensionMismatch("audio feature requested but samples carry no audio_rms")
    X = np.empty((len(dataset), len(mask)))
    for r, s in enumerate(dataset):
        X[r] = compute_differentials(s, mask).values
    return X


@dataclass(frozen=True)
class ScalerParams:
    mean: tuple
    std: tuple

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise DimensionMismatch("mean/std length differ")
        for i, s in enumerate(self.std):
            if not s > 0:
                raise DegenerateFeature(i)

    def __len__(self):
        return len(self.mean)


def fit_scaler(X) -> ScalerParams:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ValueError("need at least two rows to fit a scaler")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    for i, s in enumerate(std):
        # relative test so a constant column with float noise in its mean still counts
        if not s > 1e-12 * max(1.0, abs(mean[i])):
            raise DegenerateFeature(i)
    return ScalerParams(tuple(float(m) for m in mean), tuple(float(s) for s in std))


def apply_scaler(v, p: ScalerParams):
    """Standardize a FeatureVector, a single row or a whole matrix."""
    if isinstance(v, FeatureVector):
        if len(v.values) != len(p):
            raise DimensionMismatch(f"{len(v.values)} features, scaler has {len(p)}")
        z = tuple((x - m) / s for x, m, s in zip(v.values, p.mean, p.std))
        return FeatureVector(z, v.mask)
    X = np.asarray(v, dtype=float)
    if X.shape[-1] != len(p):
        raise DimensionMismatch(f"{X.shape[-1]} features, scaler has {len(p)}")
    return (X - np.asarray(p.mean)) / np.asarray(p.std)


def invert_scaler(z, p: ScalerParams):
    Z = np.asarray(z, dtype=float)
    return Z * np.asarray(p.std) + np.asarray(p.mean)


def rms_band_energy(frames, rate: float, lo: float = BAND_LO_HZ, hi: float = BAND_HI_HZ) -> float:
    """RMS of the part of the signal whose spectrum lies in [lo, hi] Hz.

    Computed from the one-sided magnitude spectrum of the whole window so that a
    full-band call returns the ordinary RMS (Parseval).
    """
    if rate <= 2.0 * hi:
        raise RateTooLow(f"rate {rate} Hz cannot represent {hi} Hz")
    x = np.asarray(frames, dtype=float)
    if x.size == 0:
        raise EmptySignal("no samples")
    n = x.size
    spec = np.fft.rfft(x)
    power = np.abs(spec) ** 2
    power[1:] *= 2.0
    if n % 2 == 0:
        power[-1] /= 2.0  # Nyquist bin is not mirrored
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    band = (freqs >= lo) & (freqs <= hi)
    return float(math.sqrt(power[band].sum()) / n)

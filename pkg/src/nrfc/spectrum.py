"""Radially binned power spectra of feature planes.

Diagnoses what the codec preserves: per-channel 2D FFT power is averaged
over channels and accumulated into radial frequency bins running from DC to
the Nyquist rate 0.5 (cycles per sample). The high-frequency ratio and the
profile distance are the two derived statistics used for reporting and for
comparing re-headed against backbone-only reconstructions.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import InputError

N_BINS = 32
HIGH_CUTOFF = 0.25


def _as_plane(plane) -> np.ndarray:
    if isinstance(plane, torch.Tensor):
        plane = plane.detach().numpy()
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim == 2:
        plane = plane[None]
    if plane.ndim != 3:
        raise InputError("plane must be [C, H, W] or [H, W]",
                         shape=tuple(plane.shape))
    if not np.isfinite(plane).all():
        raise InputError("plane contains non-finite values")
    return plane


def radial_spectrum(plane, n_bins: int = N_BINS
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Channel-averaged radial power profile.

    Returns (centers, power): bin centers in cycles/sample over (0, 0.5]
    and total spectral power per bin. Frequencies beyond 0.5 (the square's
    corners) fold into the last bin. Parseval holds: power.sum() equals the
    mean over channels of sum(x^2).
    """

    plane = _as_plane(plane)
    c, h, w = plane.shape
    spec = np.fft.fft2(plane)
    power = (spec.real ** 2 + spec.imag ** 2).mean(axis=0) / (h * w)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    edges = np.linspace(0.0, 0.5, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, radius.ravel(), side="right") - 1,
                  0, n_bins - 1)
    binned = np.bincount(idx, weights=power.ravel(), minlength=n_bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, binned


def high_frequency_ratio(plane, cutoff: float = HIGH_CUTOFF,
                         n_bins: int = N_BINS) -> float:
    """Fraction of total spectral power above ``cutoff`` cycles/sample."""

    centers, power = radial_spectrum(plane, n_bins=n_bins)
    total = power.sum()
    if total <= 0:
        return 0.0
    return float(power[centers > cutoff].sum() / total)


def spectrum_distance(plane_a, plane_b, n_bins: int = N_BINS) -> float:
    """L1 distance between unit-normalized radial profiles; 0 means the two
    planes distribute their energy identically across frequency."""

    _, pa = radial_spectrum(plane_a, n_bins=n_bins)
    _, pb = radial_spectrum(plane_b, n_bins=n_bins)
    na = pa / pa.sum() if pa.sum() > 0 else pa
    nb = pb / pb.sum() if pb.sum() > 0 else pb
    return float(np.abs(na - nb).sum())


__all__ = ["radial_spectrum", "high_frequency_ratio", "spectrum_distance",
           "N_BINS", "HIGH_CUTOFF"]

"""Frequency-domain tools: radial power spectra, denoising-stage decomposition,
and the closed-form frequency response of the optimal linear denoiser."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class RadialSpectrum:
    """Radially binned 2-D power spectrum. freqs in cycles/pixel, ascending."""

    freqs: np.ndarray
    mean_power: np.ndarray
    counts: np.ndarray
    spatial_energy: float

    def binned_total(self) -> float:
        return float((self.mean_power * self.counts).sum())


@dataclass
class WienerCurve:
    freqs: np.ndarray
    response: np.ndarray
    alpha_bar: float


@dataclass
class Transition:
    t_from: int
    t_to: int
    stage: str  # "initial" or "final"
    band_change: np.ndarray  # per-bin |delta mean power|
    low_band_change: float


@dataclass
class StageDecomposition:
    initial: RadialSpectrum | None
    final: RadialSpectrum | None
    transitions: list[Transition]
    empty_stages: list[str]
    cut: int

    def mean_low_band_change(self, stage: str) -> float:
        vals = [tr.low_band_change for tr in self.transitions if tr.stage == stage]
        return float(np.mean(vals)) if vals else float("nan")


def radial_spectrum(raster: np.ndarray) -> RadialSpectrum:
    """Power |FFT|^2 binned by radial frequency about the zero-frequency center.

    Power is scaled by 1/N so the binned total equals the spatial-domain
    energy (Parseval). Bin b collects samples with round(r * max(H,W)) == b.
    """
    arr = np.asarray(raster, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D raster, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("raster holds non-finite values")
    h, w = arr.shape
    power = np.abs(np.fft.fft2(arr)) ** 2 / arr.size
    fy = np.fft.fftfreq(h)
    fx = np.fft.fftfreq(w)
    r = np.hypot(fy[:, None], fx[None, :])
    scale = max(h, w)
    idx = np.round(r * scale).astype(np.int64)
    nbins = int(idx.max()) + 1
    sums = np.bincount(idx.ravel(), weights=power.ravel(), minlength=nbins)
    counts = np.bincount(idx.ravel(), minlength=nbins)
    keep = counts > 0
    return RadialSpectrum(
        freqs=np.arange(nbins)[keep] / scale,
        mean_power=sums[keep] / counts[keep],
        counts=counts[keep],
        spatial_energy=float((arr**2).sum()),
    )


def average_spectra(spectra: list[RadialSpectrum]) -> RadialSpectrum:
    base = spectra[0]
    for s in spectra[1:]:
        if not np.array_equal(s.freqs, base.freqs):
            raise ValueError("spectra computed on different frequency grids")
    return RadialSpectrum(
        freqs=base.freqs,
        mean_power=np.mean([s.mean_power for s in spectra], axis=0),
        counts=base.counts,
        spatial_energy=float(np.mean([s.spatial_energy for s in spectra])),
    )


def stage_decompose(
    snapshots: list[tuple[int, np.ndarray]],
    decode_fn: Callable[[np.ndarray], np.ndarray],
    cut: int = 500,
    low_band: float = 0.1,
) -> StageDecomposition:
    """Split a denoising trajectory at `cut` and measure per-band spectral change.

    snapshots: (timestep, latent) pairs in sampling order (descending t).
    decode_fn maps a latent snapshot to a single-channel map. Timesteps
    above the cut form the initial stage, the rest the final stage; each
    consecutive-pair transition is assigned to the stage of its destination
    timestep.
    """
    if not snapshots:
        raise ValueError("empty trajectory")
    specs = []
    for t, z in snapshots:
        decoded = np.asarray(decode_fn(z), dtype=np.float64)
        specs.append((int(t), radial_spectrum(decoded)))

    initial = [sp for t, sp in specs if t > cut]
    final = [sp for t, sp in specs if t <= cut]
    empty = [name for name, group in (("initial", initial), ("final", final)) if not group]

    transitions = []
    for (t0, s0), (t1, s1) in zip(specs[:-1], specs[1:]):
        n = min(len(s0.mean_power), len(s1.mean_power))
        change = np.abs(s0.mean_power[:n] - s1.mean_power[:n])
        low = s0.freqs[:n] <= low_band
        transitions.append(
            Transition(
                t_from=t0,
                t_to=t1,
                stage="final" if t1 <= cut else "initial",
                band_change=change,
                low_band_change=float(change[low].mean()) if low.any() else float("nan"),
            )
        )

    return StageDecomposition(
        initial=average_spectra(initial) if initial else None,
        final=average_spectra(final) if final else None,
        transitions=transitions,
        empty_stages=empty,
        cut=cut,
    )


def wiener_response(alpha_bar: float, freqs: np.ndarray) -> WienerCurve:
    """Closed-form optimal linear denoiser response under a 1/f^2 signal spectrum:
    H(f) = a / (a + (1 - a) f^2) with a the surviving signal fraction."""
    if not 0.0 < alpha_bar <= 1.0:
        raise ValueError(f"alpha_bar must be in (0,1], got {alpha_bar}")
    f = np.asarray(freqs, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequencies must be >= 0")
    resp = alpha_bar / (alpha_bar + (1.0 - alpha_bar) * f**2)
    return WienerCurve(freqs=f, response=resp, alpha_bar=alpha_bar)


def wiener_response_exact(
    alpha_bar: float, freqs: np.ndarray, signal_power: np.ndarray, noise_variance: float = 1.0
) -> WienerCurve:
    """Exact form given a measured signal power spectrum and white-noise variance."""
    if not 0.0 < alpha_bar <= 1.0:
        raise ValueError(f"alpha_bar must be in (0,1], got {alpha_bar}")
    f = np.asarray(freqs, dtype=np.float64)
    p = np.asarray(signal_power, dtype=np.float64)
    if f.shape != p.shape:
        raise ValueError("frequency grid and power spectrum shapes differ")
    resp = alpha_bar * p / (alpha_bar * p + (1.0 - alpha_bar) * noise_variance)
    return WienerCurve(freqs=f, response=resp, alpha_bar=alpha_bar)


def normalize_curve(curve: WienerCurve) -> WienerCurve:
    """Max-normalized copy, for plotting families of curves on one axis."""
    peak = curve.response.max()
    return WienerCurve(
        freqs=curve.freqs,
        response=curve.response / peak if peak > 0 else curve.response,
        alpha_bar=curve.alpha_bar,
    )

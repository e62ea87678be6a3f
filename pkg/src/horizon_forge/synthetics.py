"""Synthetic layered seismic volumes with exactly known, optionally faulted horizons."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .volume_io import HorizonGrid, Volume


def ricker_wavelet(peak_hz: float, dt_ms: float, half_len: int) -> np.ndarray:
    """Ricker wavelet sampled at ``2 * half_len + 1`` points centred on t=0."""
    if peak_hz <= 0:
        raise ValueError("peak frequency must be positive")
    t = np.arange(-half_len, half_len + 1) * dt_ms / 1000.0
    a = (np.pi * peak_hz * t) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


@dataclass(frozen=True)
class Layer:
    """Interface at ``depth`` samples, undulating with amplitude ``relief`` samples."""

    depth: float
    reflectivity: float
    relief: float = 0.0
    wavelength_il: float = 80.0
    wavelength_xl: float = 60.0
    phase: float = 0.0


@dataclass(frozen=True)
class Fault:
    """Vertical fault through (il0, xl0)-(il1, xl1); columns right of it drop by ``throw`` samples.

    "Right" means a positive cross product of the strike direction with the
    vector to the column.
    """

    il0: float
    xl0: float
    il1: float
    xl1: float
    throw: int

    def side(self, il: np.ndarray, xl: np.ndarray) -> np.ndarray:
        cross = (self.il1 - self.il0) * (xl - self.xl0) - (self.xl1 - self.xl0) * (il - self.il0)
        return cross > 0


def _default_layers() -> tuple[Layer, ...]:
    return (
        Layer(14, 0.6, 2.0, 90, 70, 0.3),
        Layer(31, -0.5, 3.0, 70, 90, 1.1),
        Layer(48, 1.0, 4.0, 80, 60, 0.0),
        Layer(65, -0.7, 3.0, 60, 80, 2.0),
        Layer(80, 0.5, 2.0, 100, 50, 0.7),
    )


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple[int, int, int] = (96, 96, 96)
    dt_ms: float = 4.0
    peak_hz: float = 25.0
    layers: tuple[Layer, ...] = field(default_factory=_default_layers)
    target_layer_index: int = 2
    faults: tuple[Fault, ...] = (Fault(0, 30, 95, 70, 5),)
    noise_std: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        n_il, n_xl, n_t = self.dims
        if min(self.dims) < 1:
            raise ValueError(f"dims must be positive, got {self.dims}")
        if self.dt_ms <= 0:
            raise ValueError("dt_ms must be positive")
        if not 0 <= self.target_layer_index < len(self.layers):
            raise ValueError("target_layer_index out of range")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        for f in self.faults:
            if abs(f.throw) >= n_t / 4:
                raise ValueError(f"fault throw {f.throw} must stay below n_t/4 = {n_t / 4}")
        k = layer_surface(self, self.target_layer_index)
        if k.min() < 3 or k.max() > n_t - 1 - 3:
            raise ValueError("target surface must stay at least 3 samples inside the volume")


def layer_surface(spec: SynthSpec, index: int) -> np.ndarray:
    """Integer sample index of interface ``index`` per (il, xl) column, faults applied."""
    n_il, n_xl, _ = spec.dims
    il, xl = np.meshgrid(np.arange(n_il), np.arange(n_xl), indexing="ij")
    ly = spec.layers[index]
    surf = ly.depth + ly.relief * np.sin(2 * np.pi * il / ly.wavelength_il + ly.phase) \
        * np.cos(2 * np.pi * xl / ly.wavelength_xl + 0.5 * ly.phase)
    k = np.rint(surf).astype(np.int64)
    for f in spec.faults:
        k = k + np.where(f.side(il, xl), f.throw, 0)
    return k


def generate(spec: SynthSpec = SynthSpec()) -> tuple[Volume, HorizonGrid]:
    """Amplitude volume and exact target-layer horizon (ms)."""
    spec.validate()
    n_il, n_xl, n_t = spec.dims
    refl = np.zeros(spec.dims)
    cols_il, cols_xl = np.meshgrid(np.arange(n_il), np.arange(n_xl), indexing="ij")
    for idx, ly in enumerate(spec.layers):
        k = layer_surface(spec, idx)
        inside = (k >= 0) & (k < n_t)
        np.add.at(refl, (cols_il[inside], cols_xl[inside], k[inside]), ly.reflectivity)
    period_samples = 1000.0 / spec.peak_hz / spec.dt_ms
    wav = ricker_wavelet(spec.peak_hz, spec.dt_ms, int(np.ceil(3 * period_samples)))
    amps = fftconvolve(refl, wav[None, None, :], mode="same", axes=2)
    # fftconvolve leaves ~1e-16 residue where the trace should be exactly zero
    amps[np.abs(amps) < 1e-12] = 0.0
    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.seed)
        amps = amps + rng.normal(0.0, spec.noise_std, size=amps.shape)
    truth = layer_surface(spec, spec.target_layer_index) * spec.dt_ms
    return Volume(amps.astype(np.float32), spec.dt_ms), HorizonGrid(truth.astype(np.float64))


def flat_spec(n: int = 32, depth: int = 25, **kw) -> SynthSpec:
    """Single flat interface, no faults, no noise; handy for construction checks."""
    base = dict(dims=(n, n, 64), layers=(Layer(depth, 1.0),), target_layer_index=0, faults=(),
                noise_std=0.0)
    base.update(kw)
    return SynthSpec(**base)

"""Shoebox room simulation with the image-source method.

Image amplitudes are ``beta**n_reflections / distance``; arrivals are placed
with a Hann-windowed sinc fractional-delay kernel. To keep long reverberant
responses cheap, image delays are first binned on a grid ``oversample``
times finer than the sample period, and the grid is then filtered with the
kernel sampled at the same resolution. Delay quantisation is therefore
``1 / (2 * oversample)`` samples at worst.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve


class GeometryError(ValueError):
    pass


class UnreachableT60(ValueError):
    pass


class SilentSignalError(ValueError):
    pass


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple[float, float, float] = (3.6, 8.2, 2.4)
    t60: float = 0.3
    speed_of_sound: float = 343.0
    sample_rate: int = 16000
    absorption_model: str = "calibrated"

    def __post_init__(self):
        if any(d <= 0 for d in self.dimensions):
            raise GeometryError(f"room dimensions must be positive: {self.dimensions}")
        if self.t60 < 0:
            raise ValueError("t60 must be non-negative")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dimensions
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dimensions
        return 2 * (lx * ly + lx * lz + ly * lz)

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > margin) and np.all(p < np.asarray(self.dimensions) - margin))


@dataclass(frozen=True)
class ArrayGeometry:
    mic_positions: tuple[tuple[float, float, float], ...]

    @classmethod
    def ula(cls, n_mics: int = 16, spacing: float = 0.15, first_x: float = 0.575,
            y: float = 7.0, z: float = 1.2) -> "ArrayGeometry":
        return cls(tuple((first_x + i * spacing, y, z) for i in range(n_mics)))

    @property
    def positions(self) -> np.ndarray:
        return np.asarray(self.mic_positions, dtype=float)

    def __len__(self):
        return len(self.mic_positions)

    def validate(self, room: RoomSpec) -> None:
        pos = self.positions
        for p in pos:
            if not room.contains(p):
                raise GeometryError(f"microphone {tuple(p)} is not strictly inside the room")
        if len({tuple(p) for p in pos}) != len(pos):
            raise GeometryError("microphone positions must be distinct")


@dataclass
class Scene:
    room: RoomSpec
    array: ArrayGeometry
    source_position: tuple[float, float, float]
    source_signal: np.ndarray = field(repr=False)
    snr_db: float = math.inf
    seed: int = 0

    def validate(self) -> None:
        self.array.validate(self.room)
        if not self.room.contains(self.source_position):
            raise GeometryError(f"source {self.source_position} is not strictly inside the room")
        if not np.any(np.asarray(self.source_signal) != 0):
            raise SilentSignalError("source signal has zero energy")


# ---------------------------------------------------------------------------

def _sinc_kernel(taps: int, oversample: int) -> np.ndarray:
    half = taps // 2
    t = np.arange(-half * oversample, half * oversample + 1) / oversample
    window = 0.5 * (1 + np.cos(2 * np.pi * t / taps))
    return np.sinc(t) * window


def _axis_images(src: float, length: float, order: int):
    n = np.arange(-order, order + 1)
    pos = np.concatenate([2 * n * length + src, 2 * n * length - src])
    refl = np.concatenate([np.abs(n) + np.abs(n), np.abs(n - 1) + np.abs(n)])
    return pos, refl


def reflection_coefficient(room: RoomSpec) -> float:
    """Uniform wall pressure-reflection coefficient realising ``room.t60``.

    ``calibrated`` (default) bisects on the coefficient until the image-source
    energy decay of a reference source/microphone pair has the requested
    Schroeder T60. ``eyring`` inverts ``T60 = k V / (-S ln(1 - a))`` and
    ``sabine`` inverts ``T60 = k V / (S a)``; both ignore the slow axial
    decay of shoebox rooms and overshoot the target by 10-80%.
    """
    if room.t60 == 0:
        return 0.0
    k = 24 * math.log(10) / room.speed_of_sound
    if room.absorption_model == "calibrated":
        return _calibrated_beta(tuple(room.dimensions), room.t60, room.speed_of_sound, room.sample_rate)
    if room.absorption_model == "sabine":
        alpha = k * room.volume / (room.surface * room.t60)
        if alpha > 1:
            raise UnreachableT60(f"T60={room.t60}s needs absorption {alpha:.3f} > 1 under Sabine")
    elif room.absorption_model == "eyring":
        alpha = 1 - math.exp(-k * room.volume / (room.surface * room.t60))
    else:
        raise ValueError(f"unknown absorption model {room.absorption_model!r}")
    return math.sqrt(1 - alpha)


def _image_cloud(dims, source, mic, max_dist):
    """Distances and reflection counts of all images within ``max_dist`` of ``mic``."""
    orders = [math.ceil(max_dist / (2 * d)) + 1 for d in dims]
    axes = [_axis_images(source[i], dims[i], orders[i]) for i in range(3)]
    d2 = ((axes[0][0] - mic[0])[:, None, None] ** 2 + (axes[1][0] - mic[1])[None, :, None] ** 2
          + (axes[2][0] - mic[2])[None, None, :] ** 2)
    refl = axes[0][1][:, None, None] + axes[1][1][None, :, None] + axes[2][1][None, None, :]
    keep = d2 < max_dist ** 2
    return np.sqrt(d2[keep]), refl[keep]


_N_REFERENCE = 15


@functools.lru_cache(maxsize=64)
def _calibrated_beta(dims, t60, c, fs) -> float:
    dims_a = np.asarray(dims)
    # fixed reference pairs spread over the room; the median of their decays is matched
    ref = np.random.default_rng(0).uniform(0.1, 0.9, size=(_N_REFERENCE, 2, 3)) * dims_a
    length = int(math.ceil(t60 * fs))
    clouds = [_image_cloud(dims, s, m, length / fs * c) for s, m in ref]

    def single(dist, refl, beta):
        h = _render_images(dist[None], (beta ** refl / dist)[None], length, c, fs)[0]
        try:
            return schroeder_t60(h, fs)
        except ValueError:
            # either the decay never reaches -25 dB, or it drops through the whole fit range at once
            edc = energy_decay_curve(h)
            return math.inf if edc[-1] > 10 ** -2.5 else 0.0

    def measured(beta):
        return float(np.median([single(d, r, beta) for d, r in clouds]))
    lo, hi = 1e-6, 1.0 - 1e-9
    if measured(lo) > t60:
        raise UnreachableT60(f"T60={t60}s is shorter than the decay of an almost fully absorbent room")
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if measured(mid) > t60:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _render_images(dists, amps, length, c, fs, taps=81, oversample=32) -> np.ndarray:
    """Place image arrivals (one row of distances/amplitudes per microphone) on a sampled response."""
    half = taps // 2
    kernel = _sinc_kernel(taps, oversample)
    grid_len = (length + half) * oversample + 1
    grid = np.zeros((len(dists), grid_len))
    for m, (dist, amp) in enumerate(zip(dists, amps)):
        idx = np.rint(dist / c * fs * oversample).astype(np.int64)
        ok = idx < grid_len
        grid[m] = np.bincount(idx[ok], weights=amp[ok], minlength=grid_len)[:grid_len]
    full = fftconvolve(grid, kernel[None, :], axes=1)
    # full[:, j] holds sum_i grid[i] * kernel[j - i]; sample n sits at j = (n + half) * oversample
    return full[:, (np.arange(length) + half) * oversample]


def rir_length(room: RoomSpec, max_distance: float, taps: int = 81) -> int:
    direct = math.ceil(max_distance / room.speed_of_sound * room.sample_rate) + taps // 2 + 1
    return max(math.ceil(room.t60 * room.sample_rate), direct)


def simulate_rirs(room: RoomSpec, source, mics, length: int | None = None, taps: int = 81,
                  oversample: int = 32) -> np.ndarray:
    """Impulse responses from ``source`` to every row of ``mics``; shape ``(n_mics, length)``."""
    source = np.asarray(source, dtype=float)
    mics = np.atleast_2d(np.asarray(mics, dtype=float))
    for p in (source, *mics):
        if not room.contains(p):
            raise GeometryError(f"point {tuple(p)} is on or outside a wall")
    beta = reflection_coefficient(room)
    c, fs = room.speed_of_sound, room.sample_rate
    if length is None:
        length = rir_length(room, float(np.max(np.linalg.norm(mics - source, axis=1))), taps)
    max_dist = length / fs * c
    dists, amps = [], []
    for mic in mics:
        if beta == 0:
            dist, refl = np.array([np.linalg.norm(source - mic)]), np.array([0])
        else:
            dist, refl = _image_cloud(room.dimensions, source, mic, max_dist)
        dists.append(dist)
        amps.append(beta ** refl / dist)
    return _render_images(dists, amps, length, c, fs, taps, oversample)


def simulate_rir(room: RoomSpec, source, mic, **kw) -> np.ndarray:
    return simulate_rirs(room, source, [mic], **kw)[0]


def schroeder_t60(h: np.ndarray, fs: int, fit_range=(-5.0, -25.0), guard: int | None = 40) -> float:
    """Reverberation time from the backward-integrated energy decay curve (T20 fit).

    Integration starts ``guard`` samples after the strongest arrival so that a
    dominant direct path does not swallow the start of the fit range. Pass
    ``guard=None`` to integrate the whole response. A response that holds less
    than -60 dB of its energy after the guard has already decayed and gives 0.
    """
    h = np.asarray(h, dtype=float)
    if guard is not None:
        total = np.sum(h ** 2)
        h = h[int(np.argmax(np.abs(h))) + guard:]
        if np.sum(h ** 2) <= 1e-6 * total:
            return 0.0
    return _schroeder_from_energy(h ** 2, fs, fit_range)


def _schroeder_from_energy(e: np.ndarray, fs: int, fit_range=(-5.0, -25.0)) -> float:
    energy = np.cumsum(e[::-1])[::-1]
    edc = 10 * np.log10(energy / energy[0] + 1e-300)
    hi, lo = fit_range
    i0 = int(np.argmax(edc <= hi))
    i1 = int(np.argmax(edc <= lo))
    if i1 <= i0:
        raise ValueError("decay curve does not span the fit range")
    t = np.arange(i0, i1) / fs
    slope, _ = np.polyfit(t, edc[i0:i1], 1)
    return -60.0 / slope


def energy_decay_curve(h: np.ndarray) -> np.ndarray:
    energy = np.cumsum((np.asarray(h, dtype=float) ** 2)[::-1])[::-1]
    return energy / energy[0]


def add_noise(clean: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise per channel, scaled so each channel hits ``snr_db`` exactly."""
    if math.isinf(snr_db) and snr_db > 0:
        return clean.copy()
    noise = rng.standard_normal(clean.shape)
    p_sig = np.mean(clean ** 2, axis=0)
    p_noise = np.mean(noise ** 2, axis=0)
    scale = np.sqrt(p_sig / (10 ** (snr_db / 10)) / p_noise)
    return clean + noise * scale


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> np.ndarray:
    e = noisy - clean
    return 10 * np.log10(np.mean(clean ** 2, axis=0) / np.mean(e ** 2, axis=0))


def render_scene(scene: Scene, rirs: np.ndarray | None = None, return_clean: bool = False):
    """Microphone signals ``(samples, n_mics)`` for a scene: ``h_m * s + e_m``.

    Each column is the source convolved with that microphone's response,
    truncated to the source length, plus noise drawn from ``scene.seed``.
    """
    scene.validate()
    s = np.asarray(scene.source_signal, dtype=float)
    if rirs is None:
        rirs = simulate_rirs(scene.room, scene.source_position, scene.array.positions)
    clean = fftconvolve(rirs, s[None, :], axes=1)[:, :len(s)].T
    noisy = add_noise(clean, scene.snr_db, np.random.default_rng(scene.seed))
    return (noisy, clean) if return_clean else noisy


def window_signal(x: np.ndarray, window_ms: float = 320.0, sample_rate: int = 16000) -> list[np.ndarray]:
    """Split ``(samples, channels)`` into consecutive non-overlapping rectangular windows."""
    n = int(round(window_ms * sample_rate / 1000))
    count = len(x) // n
    if count == 0:
        raise ValueError(f"signal of {len(x)} samples is shorter than one {n}-sample window")
    return [x[i * n:(i + 1) * n] for i in range(count)]

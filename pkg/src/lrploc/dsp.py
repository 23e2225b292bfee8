"""STFT, GCC-PHAT time-delay estimation and signal correlation time."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window


class SilentSignalError(ValueError):
    pass


@dataclass
class Spectrogram:
    frames: np.ndarray  # (n_frames, nfft // 2 + 1), complex
    nfft: int
    hop: int
    sample_rate: int

    @property
    def times(self) -> np.ndarray:
        return (np.arange(len(self.frames)) * self.hop + self.nfft / 2) / self.sample_rate

    @property
    def freqs(self) -> np.ndarray:
        return np.fft.rfftfreq(self.nfft, 1 / self.sample_rate)

    def magnitude_db(self, floor: float = 1e-12) -> np.ndarray:
        return 20 * np.log10(np.abs(self.frames) + floor)


def stft(x: np.ndarray, nfft: int = 512, hop: int = 128, window: str = "hann",
         sample_rate: int = 16000) -> Spectrogram:
    """One-sided STFT without padding: ``floor((L - nfft) / hop) + 1`` frames."""
    x = np.asarray(x, dtype=float)
    if len(x) < nfft:
        raise ValueError(f"signal of {len(x)} samples is shorter than nfft={nfft}")
    w = get_window(window, nfft)
    frames = sliding_window_view(x, nfft)[::hop] * w
    return Spectrogram(np.fft.rfft(frames, axis=1), nfft, hop, sample_rate)


@dataclass
class GccCurve:
    lags: np.ndarray
    values: np.ndarray

    @property
    def peak_lag(self) -> int:
        return int(self.lags[np.argmax(self.values)])


def gcc_phat(x1: np.ndarray, x2: np.ndarray, maxlag: int, delta_rel: float = 1e-12) -> GccCurve:
    """Phase-transform weighted cross-correlation over lags ``-maxlag..maxlag``.

    A positive peak lag means ``x2`` lags ``x1``.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape:
        raise ValueError("signals must have equal length")
    if len(x1) < 2 * maxlag:
        raise ValueError(f"signals of {len(x1)} samples too short for maxlag={maxlag}")
    if not np.any(x1) or not np.any(x2):
        raise SilentSignalError("GCC-PHAT is undefined for an all-zero signal")
    n = 1 << int(math.ceil(math.log2(2 * len(x1))))
    cross = np.fft.rfft(x2, n) * np.conj(np.fft.rfft(x1, n))
    mag = np.abs(cross)
    cc = np.fft.irfft(cross / (mag + delta_rel * mag.max()), n)
    values = np.concatenate([cc[-maxlag:], cc[:maxlag + 1]]) if maxlag > 0 else cc[:1]
    return GccCurve(np.arange(-maxlag, maxlag + 1), values)


def autocorrelation(s: np.ndarray) -> np.ndarray:
    """Biased autocorrelation for lags ``0..len(s)-1``."""
    s = np.asarray(s, dtype=float)
    n = 1 << int(math.ceil(math.log2(2 * len(s))))
    spec = np.fft.rfft(s, n)
    return np.fft.irfft(spec * np.conj(spec), n)[:len(s)]


def signal_correlation_time(s: np.ndarray, threshold_db: float = -3.0, power: bool = False) -> int:
    """Width in samples of the autocorrelation main lobe above ``threshold_db``.

    The threshold is applied to the normalised autocorrelation as an
    amplitude ratio, ``10**(dB/20)`` (~0.708 at -3 dB), or as a power
    ratio ``10**(dB/10)`` when ``power`` is set. The width counts the
    integer lags of the contiguous lobe around lag 0, so it is always odd.
    """
    r = autocorrelation(s)
    if r[0] <= 0:
        raise SilentSignalError("signal correlation time is undefined for a silent signal")
    r = r / r[0]
    thr = 10 ** (threshold_db / (10 if power else 20))
    below = np.nonzero(r < thr)[0]
    half = int(below[0]) - 1 if len(below) else len(r) - 1
    return 2 * half + 1


def tdoa_samples(source, mic1, mic2, c: float = 343.0, fs: int = 16000) -> float:
    """Direct-path delay of ``mic2`` relative to ``mic1`` in samples."""
    source = np.asarray(source, dtype=float)
    return (np.linalg.norm(source - np.asarray(mic2)) - np.linalg.norm(source - np.asarray(mic1))) / c * fs


def centered_pairs(n_mics: int, spacing: float, pair_spacings=(0.15, 0.45, 0.75)) -> dict[float, tuple[int, int]]:
    """Microphone index pairs symmetric about the array midpoint, one per requested spacing."""
    pairs = {}
    for d in pair_spacings:
        steps = int(round(d / spacing))
        if abs(steps * spacing - d) > 1e-6 or (n_mics - 1 - steps) % 2 or steps >= n_mics:
            raise ValueError(f"spacing {d} m cannot be centred on a {n_mics}-mic array with pitch {spacing} m")
        lo = (n_mics - 1 - steps) // 2
        pairs[d] = (lo, lo + steps)
    return pairs


def max_lag_for(spacing: float, c: float = 343.0, fs: int = 16000, margin: int = 2) -> int:
    return int(math.ceil(spacing / c * fs)) + margin


def is_anomalous(estimate: float, truth: float, sct: float) -> bool:
    return abs(estimate - truth) > sct / 2


@dataclass
class TdoaStats:
    """TDoA estimates for one signal source (microphones or a relevance store)."""

    spacing: float
    pair: tuple[int, int]
    estimates: np.ndarray
    truths: np.ndarray
    sct: np.ndarray

    @property
    def anomalous(self) -> np.ndarray:
        return np.abs(self.estimates - self.truths) > self.sct / 2

    @property
    def p_a(self) -> float:
        return float(np.mean(self.anomalous)) if len(self.estimates) else float("nan")


def evaluate_tdoa(signals: np.ndarray, sources: np.ndarray, mic_positions: np.ndarray, sct: np.ndarray,
                  spacings=(0.15, 0.45, 0.75), c: float = 343.0, fs: int = 16000,
                  margin: int = 2) -> dict[float, TdoaStats]:
    """GCC-PHAT TDoA per example for the centred microphone pair of each spacing.

    ``signals`` is ``(examples, samples, mics)``; ``sources`` the matching
    source positions; ``sct`` the signal correlation time (samples) of the
    recording behind each example. Examples whose selected channels are
    silent count as anomalous.
    """
    mic_positions = np.asarray(mic_positions, dtype=float)
    pitch = float(np.linalg.norm(mic_positions[1] - mic_positions[0]))
    pairs = centered_pairs(len(mic_positions), pitch, spacings)
    out = {}
    for d, (i, j) in pairs.items():
        maxlag = max_lag_for(d, c, fs, margin)
        est = np.empty(len(signals))
        truth = np.empty(len(signals))
        for e, (x, src) in enumerate(zip(signals, sources)):
            truth[e] = tdoa_samples(src, mic_positions[i], mic_positions[j], c, fs)
            try:
                est[e] = gcc_phat(x[:, i], x[:, j], maxlag).peak_lag
            except SilentSignalError:
                est[e] = np.inf
        out[d] = TdoaStats(d, (i, j), est, truth, np.asarray(sct, dtype=float))
    return out

"""Time-domain and time-frequency primitives.

All arithmetic is double precision. The STFT uses a square-root periodic Hann
window for both analysis and synthesis, so with ``hop = win / 4`` the squared
windows overlap-add to the constant ``win / (2 * hop)`` and inversion is exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

DEFAULT_SR = 16000


class ConfigurationError(ValueError):
    """Inconsistent configuration (sample rates, shapes, ranges)."""


class InputError(ValueError):
    """Malformed or out-of-contract input data."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ConfigurationError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains NaN or Inf")

    def __len__(self):
        return self.samples.shape[0]


def sqrt_hann(n: int) -> np.ndarray:
    """Square root of the periodic Hann window of length ``n``."""
    if n < 2 or n % 2:
        raise InputError(f"window length must be even and >= 2, got {n}")
    k = np.arange(n)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)
    # clip tiny negative rounding at k=0 before the square root
    return np.sqrt(np.clip(hann, 0.0, 1.0))


@dataclass
class StftConfig:
    win_len: int = 512
    hop_len: int = 128
    fft_len: int = 512
    window: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.win_len % self.hop_len:
            raise ConfigurationError("hop_len must divide win_len")
        if self.fft_len < self.win_len:
            raise ConfigurationError("fft_len must be >= win_len")
        if self.window is None:
            self.window = sqrt_hann(self.win_len)
        self.window = np.asarray(self.window, dtype=np.float64)
        if self.window.shape != (self.win_len,):
            raise ConfigurationError("window length must equal win_len")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def ola_gain(self) -> float:
        # sum over overlapping frames of window**2; constant for sqrt-Hann with win/hop >= 2
        return float(np.sum(self.window ** 2) / self.hop_len)

    def padding(self, n: int) -> tuple[int, int]:
        """(head, tail) zero padding so every sample sits under win/hop frames."""
        head = self.win_len - self.hop_len
        tail = self.win_len - self.hop_len
        rem = (head + n + tail - self.win_len) % self.hop_len
        if rem:
            tail += self.hop_len - rem
        return head, tail

    def n_frames(self, n: int) -> int:
        head, tail = self.padding(n)
        return (head + n + tail - self.win_len) // self.hop_len + 1


@dataclass
class ComplexSpectrogram:
    frames: np.ndarray  # (T, F) complex
    config: StftConfig
    origin_len: int

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != self.config.n_bins:
            raise ConfigurationError(
                f"expected (T, {self.config.n_bins}) frames, got {self.frames.shape}")

    @property
    def shape(self):
        return self.frames.shape


def _as_array(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    return np.asarray(w, dtype=np.float64)


def _frame_matrix(padded: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Frames of ``padded`` along the last axis: (..., T, win_len) strided view."""
    view = np.lib.stride_tricks.sliding_window_view(padded, cfg.win_len, axis=-1)
    return view[..., ::cfg.hop_len, :]


def stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """STFT of real signals along the last axis; returns (..., T, F) complex."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n == 0:
        raise InputError("cannot analyse an empty waveform")
    head, tail = cfg.padding(n)
    pad = [(0, 0)] * (x.ndim - 1) + [(head, tail)]
    frames = _frame_matrix(np.pad(x, pad), cfg) * cfg.window
    return np.fft.rfft(frames, n=cfg.fft_len, axis=-1)


def _overlap_add(frames: np.ndarray, cfg: StftConfig, n: int) -> np.ndarray:
    """Overlap-add (..., T, win_len) frames and crop to the original ``n`` samples."""
    head, tail = cfg.padding(n)
    total = head + n + tail
    out = np.zeros(frames.shape[:-2] + (total,))
    hop = cfg.hop_len
    # win/hop interleaved phases; each phase has non-overlapping frames
    ratio = cfg.win_len // hop
    for r in range(ratio):
        sel = frames[..., r::ratio, :]
        k = sel.shape[-2]
        if k == 0:
            continue
        start = r * hop
        flat = sel.reshape(sel.shape[:-2] + (k * cfg.win_len,))
        out[..., start:start + k * cfg.win_len] += flat
    return out[..., head:head + n]


def istft_array(S: np.ndarray, cfg: StftConfig, n: int) -> np.ndarray:
    """Inverse of :func:`stft_array` for a signal of original length ``n``."""
    if cfg.n_frames(n) != S.shape[-2]:
        raise InputError(f"{S.shape[-2]} frames cannot reconstruct {n} samples")
    frames = np.fft.irfft(S, n=cfg.fft_len, axis=-1)[..., :cfg.win_len] * cfg.window
    return _overlap_add(frames, cfg, n) / cfg.ola_gain


def stft_adjoint(G: np.ndarray, cfg: StftConfig, n: int) -> np.ndarray:
    """Gradient w.r.t. the time signal given ``G = dL/dRe + i dL/dIm`` of the STFT."""
    G = np.array(G, dtype=np.complex128)
    # Re(sum_k G_k e^{+i2pi km/N}) over the one-sided spectrum, via irfft
    G[..., 1:cfg.fft_len // 2] *= 0.5
    frames = np.fft.irfft(G, n=cfg.fft_len, axis=-1)[..., :cfg.win_len] * cfg.fft_len
    return _overlap_add(frames * cfg.window, cfg, n)


def istft_adjoint(g: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Gradient w.r.t. (Re, Im) of the spectrogram given ``dL/dx`` of the iSTFT output."""
    g = np.asarray(g, dtype=np.float64)
    n = g.shape[-1]
    head, tail = cfg.padding(n)
    pad = [(0, 0)] * (g.ndim - 1) + [(head, tail)]
    frames = _frame_matrix(np.pad(g, pad), cfg) * cfg.window / cfg.ola_gain
    G = np.fft.rfft(frames, n=cfg.fft_len, axis=-1) / cfg.fft_len
    G[..., 1:cfg.fft_len // 2] *= 2.0
    # irfft ignores the imaginary parts of DC and Nyquist
    G[..., 0] = G[..., 0].real
    if cfg.fft_len % 2 == 0:
        G[..., -1] = G[..., -1].real
    return G


def stft(w: Waveform, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or StftConfig()
    x = _as_array(w)
    return ComplexSpectrogram(stft_array(x, cfg), cfg, x.shape[-1])


def istft(s: ComplexSpectrogram, out_len: int | None = None,
          sample_rate: int = DEFAULT_SR) -> Waveform:
    if out_len is None:
        out_len = s.origin_len
    if out_len > s.origin_len:
        raise InputError(f"out_len {out_len} exceeds reconstructable span {s.origin_len}")
    x = istft_array(s.frames, s.config, s.origin_len)
    return Waveform(x[:out_len], sample_rate)


def convolve_trunc_first(a, b) -> Waveform | np.ndarray:
    """First ``len(a)`` samples of the linear convolution ``a * b``.

    Accepts :class:`Waveform` or arrays; returns the same kind as ``a``.
    Filters longer than 128 taps go through the FFT.
    """
    if isinstance(a, Waveform) and isinstance(b, Waveform) and a.sample_rate != b.sample_rate:
        raise ConfigurationError(
            f"sample rate mismatch: {a.sample_rate} vs {b.sample_rate}")
    x, h = _as_array(a), _as_array(b)
    if x.size == 0 or h.size == 0:
        raise InputError("convolution operands must be non-empty")
    n = x.shape[-1]
    h = h[:n]
    if h.shape[-1] > 128:
        y = fftconvolve(x, h)[:n]
    else:
        y = np.convolve(x, h)[:n]
    if isinstance(a, Waveform):
        return Waveform(y, a.sample_rate)
    return y


def signal_std(w) -> float:
    x = _as_array(w)
    if x.size == 0:
        raise InputError("std of an empty signal")
    return float(np.std(x))

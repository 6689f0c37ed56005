"""Impulse responses: statistical RTFs, shoebox image-source rooms, relative RIRs."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.signal import butter, sosfilt

from .signal import ConfigurationError, InputError, Waveform, DEFAULT_SR

SPEED_OF_SOUND = 343.0
KERNEL_TAPS = 81
# cutoff of the fractional-delay lowpass, as a fraction of Nyquist
KERNEL_CUTOFF = 1.0
_LUT_OVERSAMPLE = 512
# image-source reflections carry a spurious DC build-up removed by this high-pass
HIGHPASS_HZ = 50.0
CALIBRATION_HORIZON = 1.5
MIN_DISTANCE, MAX_DISTANCE = 0.75, 2.5


@dataclass
class StatisticalRtfParams:
    t60_s: float
    drr_db: float
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        if not self.t60_s > 0:
            raise InputError(f"t60_s must be positive, got {self.t60_s}")
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")


@dataclass
class Rir:
    taps: Waveform
    kind: str  # statistical | simulated_full | simulated_direct | relative
    meta: dict = field(default_factory=dict)

    @property
    def samples(self) -> np.ndarray:
        return self.taps.samples

    @property
    def sample_rate(self) -> int:
        return self.taps.sample_rate


@dataclass
class RoomSpec:
    length_m: float
    width_m: float
    height_m: float
    src_pos: tuple
    mic_pos: tuple
    t60_s: float
    sample_rate: int = DEFAULT_SR
    # overrides the calibrated absorption when set; 1.0 gives an anechoic room
    absorption: float | None = None

    def __post_init__(self):
        dims = np.array([self.length_m, self.width_m, self.height_m], dtype=float)
        if np.any(dims <= 0.2):
            raise ConfigurationError(f"room dimensions too small: {dims}")
        src = np.asarray(self.src_pos, dtype=float)
        mic = np.asarray(self.mic_pos, dtype=float)
        for name, p in (("source", src), ("microphone", mic)):
            if p.shape != (3,) or np.any(p < 0.1) or np.any(p > dims - 0.1):
                raise ConfigurationError(f"{name} position {p} violates the 0.1 m wall margin")
        if self.t60_s <= 0:
            raise ConfigurationError("t60_s must be positive")
        d = float(np.linalg.norm(src - mic))
        if not MIN_DISTANCE - 1e-9 <= d <= MAX_DISTANCE + 1e-9:
            raise ConfigurationError(f"source-microphone distance {d:.3f} m outside "
                                     f"[{MIN_DISTANCE}, {MAX_DISTANCE}] m")

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length_m, self.width_m, self.height_m], dtype=float)

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.src_pos, self.mic_pos)))


def decay_rate(t60_s: float, sample_rate: int) -> float:
    """Per-sample amplitude decay so that energy falls 60 dB after ``t60_s``."""
    return 3.0 * math.log(10.0) / (t60_s * sample_rate)


def sample_statistical_rtf(p: StatisticalRtfParams, rng: np.random.Generator) -> Rir:
    """Unit impulse followed by an exponentially decaying Gaussian tail.

    The tail gain is solved from the realised noise so that the
    direct-to-tail energy ratio equals ``p.drr_db`` exactly.
    """
    fs = p.sample_rate
    L = int(round(p.t60_s * fs))
    if L < 1:
        raise InputError(f"tail length {L} < 1 sample for t60={p.t60_s}s at {fs} Hz")
    lam = decay_rate(p.t60_s, fs)
    n = np.arange(1, L + 1)
    tail = rng.standard_normal(L) * np.exp(-lam * n)
    tail_energy = float(tail @ tail)
    gamma = math.sqrt(10.0 ** (-p.drr_db / 10.0) / tail_energy)
    taps = np.empty(L + 1)
    taps[0] = 1.0
    taps[1:] = gamma * tail
    meta = {"t60_s": p.t60_s, "drr_db": p.drr_db, "gamma": gamma, "decay_rate": lam}
    return Rir(Waveform(taps, fs), "statistical", meta)


def measure_drr(r: Rir | np.ndarray, direct_len: int | None = None,
                sample_rate: int = DEFAULT_SR) -> float:
    """Direct-to-reverberant ratio in dB; ``inf`` when the tail is silent.

    For simulated responses the direct part defaults to +-2.5 ms around the peak.
    """
    if isinstance(r, Rir):
        h, fs, kind = r.samples, r.sample_rate, r.kind
    else:
        h, fs, kind = np.asarray(r, dtype=float), sample_rate, "statistical"
    if direct_len is None and kind.startswith("simulated"):
        half = int(round(0.0025 * fs))
        peak = int(np.argmax(np.abs(h)))
        lo, hi = max(peak - half, 0), peak + half + 1
        e_dir = float(h[lo:hi] @ h[lo:hi])
        e_tail = float(h @ h) - e_dir
    else:
        direct_len = 1 if direct_len is None else direct_len
        if direct_len < 1:
            raise InputError("direct_len must be >= 1")
        e_dir = float(h[:direct_len] @ h[:direct_len])
        e_tail = float(h[direct_len:] @ h[direct_len:])
    if e_tail <= 0.0:
        return math.inf
    return 10.0 * math.log10(e_dir / e_tail)


def _kernel_lut(taps: int, cutoff: float, oversample: int) -> np.ndarray:
    half = taps // 2
    x = np.arange(-(half + 1) * oversample, (half + 1) * oversample + 1) / oversample
    win = np.where(np.abs(x) <= half + 0.5, 0.5 + 0.5 * np.cos(np.pi * x / (half + 0.5)), 0.0)
    return cutoff * np.sinc(cutoff * x) * win


_LUT = _kernel_lut(KERNEL_TAPS, KERNEL_CUTOFF, _LUT_OVERSAMPLE)


@numba.njit(cache=True)
def _render_images(out, src, mic, dims, beta, max_dist, fs, c, lut, oversample, half, direct_only):
    n_out = out.shape[0]
    nmax = np.empty(3, dtype=np.int64)
    for a in range(3):
        nmax[a] = int(math.ceil(max_dist / (2.0 * dims[a]))) + 1
    lut_center = (lut.shape[0] - 1) // 2
    count = 0
    for nx in range(-nmax[0], nmax[0] + 1):
        for px in range(2):
            ix = (1 - 2 * px) * src[0] + 2 * nx * dims[0]
            ox = abs(nx - px) + abs(nx)
            dx = ix - mic[0]
            for ny in range(-nmax[1], nmax[1] + 1):
                for py in range(2):
                    iy = (1 - 2 * py) * src[1] + 2 * ny * dims[1]
                    oy = abs(ny - py) + abs(ny)
                    dy = iy - mic[1]
                    dxy2 = dx * dx + dy * dy
                    if dxy2 > max_dist * max_dist:
                        continue
                    for nz in range(-nmax[2], nmax[2] + 1):
                        for pz in range(2):
                            order = ox + oy + abs(nz - pz) + abs(nz)
                            if direct_only and order > 0:
                                continue
                            iz = (1 - 2 * pz) * src[2] + 2 * nz * dims[2]
                            dz = iz - mic[2]
                            d = math.sqrt(dxy2 + dz * dz)
                            if d > max_dist:
                                continue
                            if order > 0 and beta == 0.0:
                                continue
                            gain = beta ** order / (4.0 * math.pi * d)
                            tau = d / c * fs
                            n0 = int(math.floor(tau))
                            frac = tau - n0
                            for k in range(-half, half + 1):
                                t = n0 + k
                                if t < 0 or t >= n_out:
                                    continue
                                # kernel evaluated at (t - tau) = k - frac, linear LUT interpolation
                                pos = (k - frac) * oversample + lut_center
                                i0 = int(math.floor(pos))
                                w = pos - i0
                                out[t] += gain * ((1.0 - w) * lut[i0] + w * lut[i0 + 1])
                            count += 1
    return count


@numba.njit(cache=True)
def _image_energy_histogram(src, mic, dims, max_dist, c, bin_s, n_bins):
    """Energy 1/(4 pi d)^2 of every image, binned by (reflection order, arrival time)."""
    nmax = np.empty(3, dtype=np.int64)
    for a in range(3):
        nmax[a] = int(math.ceil(max_dist / (2.0 * dims[a]))) + 1
    max_order = 2 * (nmax[0] + nmax[1] + nmax[2]) + 3
    hist = np.zeros((max_order + 1, n_bins))
    for nx in range(-nmax[0], nmax[0] + 1):
        for px in range(2):
            dx = (1 - 2 * px) * src[0] + 2 * nx * dims[0] - mic[0]
            ox = abs(nx - px) + abs(nx)
            for ny in range(-nmax[1], nmax[1] + 1):
                for py in range(2):
                    dy = (1 - 2 * py) * src[1] + 2 * ny * dims[1] - mic[1]
                    oy = abs(ny - py) + abs(ny)
                    dxy2 = dx * dx + dy * dy
                    if dxy2 > max_dist * max_dist:
                        continue
                    for nz in range(-nmax[2], nmax[2] + 1):
                        for pz in range(2):
                            dz = (1 - 2 * pz) * src[2] + 2 * nz * dims[2] - mic[2]
                            d = math.sqrt(dxy2 + dz * dz)
                            if d > max_dist:
                                continue
                            b = int(d / c / bin_s)
                            if b >= n_bins:
                                continue
                            order = ox + oy + abs(nz - pz) + abs(nz)
                            hist[order, b] += 1.0 / (16.0 * math.pi * math.pi * d * d)
    return hist


def _fit_decay_t60(energy: np.ndarray, bin_s: float, lo_db=-5.0, hi_db=-35.0) -> float:
    edc = np.cumsum(energy[::-1])[::-1]
    edc_db = 10.0 * np.log10(edc / edc[0] + 1e-300)
    idx = np.nonzero((edc_db <= lo_db) & (edc_db >= hi_db))[0]
    if idx.size < 2:
        return 0.0
    slope, _ = np.polyfit(idx * bin_s, edc_db[idx], 1)
    return -60.0 / slope if slope < 0 else math.inf


def calibrate_absorption(spec: RoomSpec, lo: float = 1e-3, hi: float = 0.9,
                         bin_s: float = 0.002, iters: int = 40) -> float:
    """Uniform wall absorption whose Schroeder T60 matches ``spec.t60_s``.

    Sabine's formula overestimates the decay time of image-source shoeboxes,
    so the absorption is found by bisection on the binned image energies.
    """
    # a horizon beyond the rendered length keeps long targets reachable: a
    # truncated decay curve bends down and caps the fitted T60
    horizon_s = max(rir_length(spec) / spec.sample_rate, CALIBRATION_HORIZON * spec.t60_s)
    max_dist = horizon_s * SPEED_OF_SOUND
    n_bins = int(math.ceil(horizon_s / bin_s))
    hist = _image_energy_histogram(np.asarray(spec.src_pos, float), np.asarray(spec.mic_pos, float),
                                   spec.dims, max_dist, SPEED_OF_SOUND, bin_s, n_bins)
    orders = np.arange(hist.shape[0])[:, None]

    def t60_at(alpha):
        return _fit_decay_t60(np.sum((1.0 - alpha) ** orders * hist, axis=0), bin_s)

    target = spec.t60_s
    if not t60_at(hi) <= target <= t60_at(lo):
        raise ConfigurationError(
            f"T60={target}s unreachable with absorption in [{lo}, {hi}] for room {spec.dims}")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if t60_at(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def rir_length(spec: RoomSpec) -> int:
    fs = spec.sample_rate
    direct = spec.distance / SPEED_OF_SOUND * fs
    return max(int(round(1.1 * spec.t60_s * fs)), int(math.ceil(direct)) + KERNEL_TAPS)


def simulate_room(spec: RoomSpec, rng: np.random.Generator | None = None) -> tuple[Rir, Rir]:
    """Image-source simulation of a shoebox room with uniform wall absorption.

    Returns the full response and its direct-path-only counterpart, rendered
    with the same fractional-delay kernel and of equal length. ``rng`` is
    accepted for interface symmetry; the simulation itself is deterministic.
    """
    dims = spec.dims
    if spec.absorption is None:
        alpha = calibrate_absorption(spec)
    else:
        alpha = float(spec.absorption)
        if not 0.0 < alpha <= 1.0:
            raise ConfigurationError(f"absorption {alpha} outside (0, 1]")
    beta = math.sqrt(1.0 - alpha)
    fs = spec.sample_rate
    n = rir_length(spec)
    max_dist = (n + KERNEL_TAPS // 2) / fs * SPEED_OF_SOUND
    src = np.asarray(spec.src_pos, dtype=float)
    mic = np.asarray(spec.mic_pos, dtype=float)
    half = KERNEL_TAPS // 2

    h_sim = np.zeros(n)
    n_images = _render_images(h_sim, src, mic, dims, beta, max_dist, float(fs), SPEED_OF_SOUND,
                              _LUT, _LUT_OVERSAMPLE, half, False)
    h_dir = np.zeros(n)
    _render_images(h_dir, src, mic, dims, beta, max_dist, float(fs), SPEED_OF_SOUND,
                   _LUT, _LUT_OVERSAMPLE, half, True)
    # reflections only, so the direct path stays a plain fractional delay
    sos = butter(2, HIGHPASS_HZ, "highpass", fs=fs, output="sos")
    h_sim = h_dir + sosfilt(sos, h_sim - h_dir)
    meta = {
        "t60_s": spec.t60_s,
        "absorption": alpha,
        "source_mic_distance_m": spec.distance,
        "direct_delay_samples": spec.distance / SPEED_OF_SOUND * fs,
        "n_images": int(n_images),
    }
    return (Rir(Waveform(h_sim, fs), "simulated_full", dict(meta)),
            Rir(Waveform(h_dir, fs), "simulated_direct", dict(meta)))


def relative_rir(h_sim: Rir, h_dir: Rir, reg: float = 1e-8) -> Rir:
    """Correction filter mapping the direct path onto the full response.

    Spectral division on a zero-padded grid, truncated to ``len(h_sim)``.
    Bins where ``|H_dir|`` falls below ``reg * max|H_dir|`` are clamped so the
    filter gain stays bounded; the clamped fraction is reported in ``meta``.
    """
    a, b = h_sim.samples, h_dir.samples
    if a.shape != b.shape or h_sim.sample_rate != h_dir.sample_rate:
        raise ConfigurationError("h_sim and h_dir must share length and sample rate")
    n = a.shape[0]
    nfft = 1 << int(math.ceil(math.log2(2 * n)))
    A = np.fft.rfft(a, nfft)
    B = np.fft.rfft(b, nfft)
    mag2 = np.abs(B) ** 2
    peak2 = float(mag2.max())
    if peak2 == 0.0:
        raise InputError("h_dir is identically zero")
    floor2 = (reg ** 2) * peak2
    clamped = mag2 < floor2
    H = A * np.conj(B) / np.maximum(mag2, floor2)
    h = np.fft.irfft(H, nfft)[:n]
    meta = dict(h_sim.meta)
    meta["clamped_fraction"] = float(clamped.mean())
    # nulls deeper than the floor over more than 1% of the band
    meta["numerical_warning"] = bool(clamped.mean() > 0.01)
    if meta["numerical_warning"]:
        warnings.warn(f"relative RIR: {clamped.mean():.1%} of bins clamped", RuntimeWarning)
    return Rir(Waveform(h, h_sim.sample_rate), "relative", meta)


def schroeder_t60(h: np.ndarray, sample_rate: int, lo_db: float = -5.0, hi_db: float = -35.0) -> float:
    """Broadband T60 from a line fit to the Schroeder energy decay curve."""
    e = np.asarray(h, dtype=float) ** 2
    edc = np.cumsum(e[::-1])[::-1]
    edc_db = 10.0 * np.log10(edc / edc[0] + 1e-300)
    idx = np.nonzero((edc_db <= lo_db) & (edc_db >= hi_db))[0]
    if idx.size < 2:
        raise InputError("decay curve does not span the fit range")
    t = idx / sample_rate
    slope, _ = np.polyfit(t, edc_db[idx], 1)
    return -60.0 / slope


def sample_room(rng: np.random.Generator, length_range=(5.0, 10.0), width_range=(5.0, 10.0),
                height_range=(3.0, 4.0), t60_range=(0.2, 1.3), dist_range=(MIN_DISTANCE, MAX_DISTANCE),
                z_range=(1.0, 2.0), wall_margin=0.5, sample_rate: int = DEFAULT_SR) -> RoomSpec:
    """Random shoebox with source and microphone at talker/array heights.

    Keeping both away from surfaces means no reflection lands inside the
    interpolation kernel's pre-ringing ahead of the direct path. The distance
    is snapped to a whole number of samples.
    """
    dims = np.array([rng.uniform(*length_range), rng.uniform(*width_range),
                     rng.uniform(*height_range)])
    t60 = rng.uniform(*t60_range)
    lo = np.array([wall_margin, wall_margin, z_range[0]])
    hi = np.array([dims[0] - wall_margin, dims[1] - wall_margin, min(z_range[1], dims[2] - 0.1)])
    while True:
        mic = rng.uniform(lo, hi)
        d = rng.uniform(*dist_range)
        # whole-sample direct delay: h_dir is then a scaled unit impulse and
        # dividing by its spectrum is exact (mic moves by at most c / (2 fs))
        d = round(d * sample_rate / SPEED_OF_SOUND) * SPEED_OF_SOUND / sample_rate
        v = rng.standard_normal(3)
        src = mic + d * v / np.linalg.norm(v)
        if np.all(src >= lo) and np.all(src <= hi) and dist_range[0] <= d <= dist_range[1]:
            break
    return RoomSpec(float(dims[0]), float(dims[1]), float(dims[2]), tuple(src), tuple(mic),
                    float(t60), sample_rate)

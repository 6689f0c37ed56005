"""Toy corpus: quasi-speech sources, reverberant noisy mixtures, WAV and manifest I/O."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import butter, lfilter, sosfilt

from .rir import RoomSpec, sample_room, simulate_room
from .signal import DEFAULT_SR, ConfigurationError, InputError, Waveform, convolve_trunc_first

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class WavFormatError(ValueError):
    pass


# ---------------------------------------------------------------- sources

def _resonator(fc: float, bw: float, fs: int) -> tuple[np.ndarray, np.ndarray]:
    r = math.exp(-math.pi * bw / fs)
    a = np.array([1.0, -2.0 * r * math.cos(2.0 * math.pi * fc / fs), r * r])
    # unity gain at the centre frequency (approximately)
    b = np.array([1.0 - r])
    return b, a


def _voiced(n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    f0_start = rng.uniform(80.0, 300.0)
    f0_end = np.clip(f0_start * rng.uniform(0.8, 1.25), 80.0, 300.0)
    f0 = np.linspace(f0_start, f0_end, n)
    phase = 2.0 * math.pi * np.cumsum(f0) / fs
    n_harm = int(4000.0 // f0_start)
    src = np.zeros(n)
    for k in range(1, n_harm + 1):
        src += np.cos(k * phase) / k
    # three resonances drifting linearly, filtered in 10 ms blocks with carried state
    spans = [(300.0, 900.0), (900.0, 2500.0), (2300.0, 3500.0)]
    out = src
    block = fs // 100
    for lo, hi in spans:
        c0, c1 = rng.uniform(lo, hi, size=2)
        bw = rng.uniform(60.0, 120.0)
        y = np.empty(n)
        zi = np.zeros(2)
        for s in range(0, n, block):
            e = min(s + block, n)
            fc = c0 + (c1 - c0) * (s / max(n - 1, 1))
            b, a = _resonator(fc, bw, fs)
            # direct form II transposed state is reused across coefficient changes
            y[s:e], zi = lfilter(b, a, out[s:e], zi=zi)
        out = y
    return out


def _unvoiced(n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    sos = butter(2, [rng.uniform(2000.0, 3500.0), 7000.0], "bandpass", fs=fs, output="sos")
    return sosfilt(sos, rng.standard_normal(n))


def _envelope(n: int, fs: int) -> np.ndarray:
    ramp = min(int(0.015 * fs), n // 2)
    env = np.ones(n)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[n - ramp:] = r[::-1]
    return env


def generate_source(dur_s: float, rng: np.random.Generator, sample_rate: int = DEFAULT_SR) -> Waveform:
    """One quasi-speech utterance: voiced and unvoiced segments separated by silences."""
    fs = sample_rate
    n = int(round(dur_s * fs))
    x = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.2) * fs)
    while pos < n:
        seg = int(rng.uniform(0.15, 0.45) * fs)
        e = min(pos + seg, n)
        v = _voiced(e - pos, fs, rng)
        x[pos:e] = v / (np.max(np.abs(v)) + 1e-12) * rng.uniform(0.5, 1.0) * _envelope(e - pos, fs)
        pos = e
        if rng.uniform() < 0.5 and pos < n:
            seg = int(rng.uniform(0.04, 0.12) * fs)
            e = min(pos + seg, n)
            u = _unvoiced(e - pos, fs, rng)
            x[pos:e] = u / (np.max(np.abs(u)) + 1e-12) * rng.uniform(0.1, 0.3) * _envelope(e - pos, fs)
            pos = e
        pos += int(rng.uniform(0.08, 0.3) * fs)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= 0.5 / peak
    return Waveform(x, fs)


def generate_toy_sources(n: int, dur_s: float, rng: np.random.Generator,
                         sample_rate: int = DEFAULT_SR) -> list[Waveform]:
    if n < 1:
        raise InputError("need at least one source")
    return [generate_source(dur_s, rng, sample_rate) for _ in range(n)]


def silence_fraction(x, frame: int = 512, threshold_db: float = -40.0) -> float:
    """Fraction of non-overlapping frames more than 40 dB below the loudest frame."""
    x = np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=float)
    k = x.shape[0] // frame
    e = np.sum(x[:k * frame].reshape(k, frame) ** 2, axis=1)
    e_db = 10.0 * np.log10(e + 1e-20)
    return float(np.mean(e_db < e_db.max() + threshold_db))


# ---------------------------------------------------------------- mixtures

@dataclass
class MixtureSpec:
    snr_db: float
    room: RoomSpec
    seed: int = 0

    def __post_init__(self):
        if not 5.0 <= self.snr_db <= 25.0:
            raise ConfigurationError(f"snr_db {self.snr_db} outside [5, 25]")


def lowpass_noise(n: int, rng: np.random.Generator, cutoff_hz: float = 2000.0,
                  sample_rate: int = DEFAULT_SR) -> np.ndarray:
    b, a = butter(1, cutoff_hz, "lowpass", fs=sample_rate)
    return lfilter(b, a, rng.standard_normal(n))


def synthesize_mixture(x: Waveform, spec: MixtureSpec, rng: np.random.Generator | None = None):
    """Reverberate ``x`` in ``spec.room``, add noise at ``spec.snr_db``.

    Returns ``(y, reference, meta)`` where the reference is ``x`` through the
    direct path only; both share one peak normalisation factor.
    """
    if not np.any(x.samples):
        raise InputError("cannot mix a silent source")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    h_sim, h_dir = simulate_room(spec.room)
    reverberant = convolve_trunc_first(x.samples, h_sim.samples)
    reference = convolve_trunc_first(x.samples, h_dir.samples)
    v = lowpass_noise(len(x), rng, sample_rate=x.sample_rate)
    v *= math.sqrt(float(reverberant @ reverberant) / (float(v @ v) * 10.0 ** (spec.snr_db / 10.0)))
    y = reverberant + v
    scale = 0.9 / float(np.max(np.abs(y)))
    meta = {
        "snr_db": spec.snr_db,
        "t60_s": spec.room.t60_s,
        "scale": scale,
        "noise": v * scale,
        "reverberant": reverberant * scale,
        "absorption": h_sim.meta["absorption"],
        "distance_m": spec.room.distance,
    }
    return Waveform(y * scale, x.sample_rate), Waveform(reference * scale, x.sample_rate), meta


def measured_snr(reverberant: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(float(reverberant @ reverberant) / float(noise @ noise))


# ---------------------------------------------------------------- WAV I/O

def read_wav(path) -> Waveform:
    """Read PCM16 or float32 WAV; multichannel files yield their first channel."""
    path = Path(path)
    try:
        fs, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError / struct errors on bad headers
        raise WavFormatError(f"{path}: {exc}") from exc
    if data.ndim == 2:
        log.info("%s: %d channels, using the first", path, data.shape[1])
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(fs))


def write_wav(path, w: Waveform, pcm16: bool = False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = w.samples.astype(np.float32)
    wavfile.write(path, w.sample_rate, data)


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestRow:
    utt_id: str
    mixture_path: str
    reference_path: str | None = None
    input_snr_db: float | None = None
    t60_s: float | None = None
    split: str = "train"


@dataclass
class Manifest:
    rows: list = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [r.utt_id for r in self.rows]
        if len(ids) != len(set(ids)):
            raise ConfigurationError("duplicate utt_id in manifest")

    def __len__(self):
        return len(self.rows)

    def split(self, name: str) -> "Manifest":
        return Manifest([r for r in self.rows if r.split == name], self.root)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def load_mixtures(self) -> list[Waveform]:
        return [read_wav(self.resolve(r.mixture_path)) for r in self.rows]


def write_manifest(path, manifest: Manifest):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in manifest.rows:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_manifest(path) -> Manifest:
    """JSON-lines manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(ManifestRow(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ConfigurationError(f"{path}:{ln}: bad manifest row ({exc})") from exc
    return Manifest(rows, path.parent)


def _make_utterance(args):
    split, idx, seed, dur_s, snr_range, out_dir, sample_rate = args
    rng = np.random.default_rng([seed, SPLITS.index(split), idx])
    x = generate_source(dur_s, rng, sample_rate)
    while True:
        room = sample_room(rng, sample_rate=sample_rate)
        spec = MixtureSpec(float(rng.uniform(*snr_range)), room, seed)
        try:
            y, ref, meta = synthesize_mixture(x, spec, rng)
            break
        except ConfigurationError as exc:
            log.warning("%s_%04d: %s; room resampled", split, idx, exc)
    utt_id = f"{split}_{idx:04d}"
    mix_rel = Path(split) / "mix" / f"{utt_id}.wav"
    ref_rel = Path(split) / "ref" / f"{utt_id}.wav"
    write_wav(Path(out_dir) / mix_rel, y)
    write_wav(Path(out_dir) / ref_rel, ref)
    return ManifestRow(utt_id, str(mix_rel), str(ref_rel),
                       measured_snr(meta["reverberant"], meta["noise"]), spec.room.t60_s, split)


def build_dataset(out_dir, counts: dict, seed: int = 0, dur_s: float = 4.0,
                  snr_range=(5.0, 25.0), sample_rate: int = DEFAULT_SR, jobs: int = 1,
                  manifest_name: str = "manifest.jsonl") -> Manifest:
    """Generate train/val/test mixtures and references plus a manifest.

    Every utterance draws from its own ``(seed, split, index)`` stream, so the
    output does not depend on ``jobs``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(split, i, seed, dur_s, snr_range, str(out_dir), sample_rate)
             for split in SPLITS for i in range(int(counts.get(split, 0)))]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_make_utterance, tasks))
    else:
        rows = [_make_utterance(t) for t in tasks]
    manifest = Manifest(rows, out_dir)
    write_manifest(out_dir / manifest_name, manifest)
    return manifest

"""Evaluation metrics against the direct-path reference.

``si_sdr_metric`` projects the *estimate onto the reference* (the usual
definition). The training loss in :mod:`unsup_dereverb.losses` instead
rescales the estimate; the two are deliberately different functions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import firwin, resample_poly

from .data import Manifest, read_wav
from .signal import InputError, Waveform

log = logging.getLogger(__name__)

SI_SDR_CAP_DB = 100.0
SNR_BUCKETS = ((5.0, 10.0), (10.0, 15.0), (15.0, 20.0), (20.0, 25.0))

# eSTOI constants
ESTOI_FS = 10000
FRAME = 256
HOP = 128
NFFT = 512
N_BANDS = 15
MIN_FREQ = 150.0
SEGMENT = 30          # frames, 384 ms at 10 kHz with a 128-sample hop
DYN_RANGE_DB = 40.0
TAPS_PER_PHASE = 64


class TooShortError(InputError):
    pass


def _samples(w) -> np.ndarray:
    return np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)


def si_sdr_metric(est, ref) -> float:
    """SI-SDR in dB with the target ``(<est, ref> / ||ref||^2) ref``; capped at +100 dB."""
    s_hat, s = _samples(est), _samples(ref)
    if s_hat.shape != s.shape:
        raise InputError(f"length mismatch: {s_hat.shape} vs {s.shape}")
    ss = float(s @ s)
    if ss == 0.0:
        raise InputError("reference signal is all zeros")
    target = (float(s_hat @ s) / ss) * s
    err = s_hat - target
    te, ee = float(target @ target), float(err @ err)
    if ee == 0.0 or te >= ee * 10.0 ** (SI_SDR_CAP_DB / 10.0):
        return SI_SDR_CAP_DB
    if te == 0.0:
        return -SI_SDR_CAP_DB
    return max(10.0 * math.log10(te / ee), -SI_SDR_CAP_DB)


# ---------------------------------------------------------------- eSTOI

def _third_octave_matrix() -> np.ndarray:
    f = np.linspace(0, ESTOI_FS, NFFT + 1)[: NFFT // 2 + 1]
    k = np.arange(N_BANDS, dtype=float)
    lo = MIN_FREQ * 2.0 ** ((2 * k - 1) / 6)
    hi = MIN_FREQ * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((N_BANDS, f.size))
    for i in range(N_BANDS):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


_OBM = _third_octave_matrix()
_WIN = np.hanning(FRAME + 2)[1:-1]


def resample_to_10k(x: np.ndarray, fs: int) -> np.ndarray:
    """Polyphase resampling with a Kaiser-windowed sinc of 64 taps per phase."""
    if fs == ESTOI_FS:
        return x
    g = math.gcd(ESTOI_FS, fs)
    up, down = ESTOI_FS // g, fs // g
    n_taps = TAPS_PER_PHASE * up + 1
    h = firwin(n_taps, 1.0 / max(up, down), window=("kaiser", 8.0)) * up
    return resample_poly(x, up, down, window=h)


def _frames(x: np.ndarray) -> np.ndarray:
    starts = np.arange(0, x.shape[0] - FRAME, HOP)
    if starts.size == 0:
        return np.zeros((0, FRAME))
    return x[starts[:, None] + np.arange(FRAME)] * _WIN


def _overlap_add(frames: np.ndarray) -> np.ndarray:
    out = np.zeros((frames.shape[0] - 1) * HOP + FRAME) if frames.shape[0] else np.zeros(0)
    for i, fr in enumerate(frames):
        out[i * HOP:i * HOP + FRAME] += fr
    return out


def _remove_silent(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames more than 40 dB below the loudest reference frame, then re-synthesise."""
    xf, yf = _frames(x), _frames(y)
    if xf.shape[0] == 0:
        raise TooShortError("signal shorter than one analysis frame")
    e = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = e > e.max() - DYN_RANGE_DB
    return _overlap_add(xf[keep]), _overlap_add(yf[keep])


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x), n=NFFT, axis=1)          # (T, F)
    return np.sqrt(_OBM @ (np.abs(spec) ** 2).T)              # (J, T)


def _normalise(a: np.ndarray, axis: int) -> np.ndarray:
    a = a - a.mean(axis=axis, keepdims=True)
    n = np.linalg.norm(a, axis=axis, keepdims=True)
    return np.divide(a, n, out=np.zeros_like(a), where=n > 0)


def estoi(est, ref, sample_rate: int = 16000) -> float:
    """Extended STOI of ``est`` against the clean ``ref``; a scalar in [-1, 1]."""
    y, x = _samples(est), _samples(ref)
    if isinstance(ref, Waveform):
        sample_rate = ref.sample_rate
    if x.shape != y.shape:
        raise InputError(f"length mismatch: {y.shape} vs {x.shape}")
    if not np.any(x):
        raise InputError("reference signal is all zeros")
    x, y = resample_to_10k(x, sample_rate), resample_to_10k(y, sample_rate)
    x, y = _remove_silent(x, y)
    X, Y = _band_envelopes(x), _band_envelopes(y)
    n_frames = X.shape[1]
    if n_frames < SEGMENT:
        raise TooShortError(f"only {n_frames} active frames, need {SEGMENT} (384 ms)")
    total = 0.0
    for m in range(SEGMENT, n_frames + 1):
        xs = _normalise(_normalise(X[:, m - SEGMENT:m], 1), 0)
        ys = _normalise(_normalise(Y[:, m - SEGMENT:m], 1), 0)
        total += float(np.sum(xs * ys)) / SEGMENT
    return total / (n_frames - SEGMENT + 1)


# ---------------------------------------------------------------- set evaluation

@dataclass
class EvalRecord:
    utt_id: str
    si_sdr_db: float
    estoi: float
    input_snr_db: float | None
    which_net: str


@dataclass
class EvalSummary:
    records: list
    mean_si_sdr_db: float
    mean_estoi: float
    buckets: dict          # (lo, hi) -> (count, mean si-sdr, mean estoi)
    missing: list          # utt_ids skipped for missing references


def snr_bucket(snr: float | None):
    if snr is None:
        return None
    for lo, hi in SNR_BUCKETS:
        # the top bucket is closed so 25 dB is included
        if lo <= snr < hi or (hi == SNR_BUCKETS[-1][1] and snr == hi):
            return (lo, hi)
    return None


def bucket_means(records: list) -> dict:
    outside = [r.utt_id for r in records if snr_bucket(r.input_snr_db) is None]
    if outside:
        log.warning("%d utterance(s) without an input SNR in [5, 25] dB left unbucketed", len(outside))
    out = {}
    for b in SNR_BUCKETS:
        sel = [r for r in records if snr_bucket(r.input_snr_db) == b]
        if sel:
            out[b] = (len(sel), float(np.mean([r.si_sdr_db for r in sel])),
                      float(np.mean([r.estoi for r in sel])))
    return out


def evaluate_set(enhancer, manifest: Manifest, by_snr_buckets: bool = False,
                 which_net: str = "student", split: str | None = "test") -> EvalSummary:
    """Score ``enhancer(Waveform) -> Waveform`` on every row with a reference.

    Pass ``enhancer=None`` to score the unprocessed mixtures.
    """
    rows = manifest.split(split).rows if split and any(r.split == split for r in manifest.rows) else manifest.rows
    if not rows:
        log.warning("empty manifest: nothing to evaluate")
    records, missing = [], []
    for row in rows:
        ref_path = manifest.resolve(row.reference_path)
        if ref_path is None or not ref_path.exists():
            log.warning("%s: reference missing, skipped", row.utt_id)
            missing.append(row.utt_id)
            continue
        y = read_wav(manifest.resolve(row.mixture_path))
        ref = read_wav(ref_path)
        est = y if enhancer is None else enhancer(y)
        records.append(EvalRecord(row.utt_id, si_sdr_metric(est, ref), estoi(est, ref),
                                  row.input_snr_db, which_net if enhancer is not None else "mixture"))
    mean_sdr = float(np.mean([r.si_sdr_db for r in records])) if records else math.nan
    mean_stoi = float(np.mean([r.estoi for r in records])) if records else math.nan
    buckets = bucket_means(records) if by_snr_buckets else {}
    return EvalSummary(records, mean_sdr, mean_stoi, buckets, missing)


def write_report(path, summary: EvalSummary) -> str:
    """CSV of per-utterance records; returns a JSON-style summary block."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["utt_id,si_sdr_db,estoi,input_snr_db,net"]
    for r in summary.records:
        snr = "" if r.input_snr_db is None else repr(float(r.input_snr_db))
        lines.append(f"{r.utt_id},{r.si_sdr_db!r},{r.estoi!r},{snr},{r.which_net}")
    path.write_text("\n".join(lines) + "\n")
    block = ["{", f'  "count": {len(summary.records)},',
             f'  "mean_si_sdr_db": {summary.mean_si_sdr_db!r},',
             f'  "mean_estoi": {summary.mean_estoi!r},']
    if summary.buckets:
        block.append('  "buckets": {')
        top = SNR_BUCKETS[-1]
        items = [f'    "[{lo:g},{hi:g}{"]" if (lo, hi) == top else ")"}": '
                 f'{{"count": {n}, "si_sdr_db": {s!r}, "estoi": {e!r}}}'
                 for (lo, hi), (n, s, e) in summary.buckets.items()]
        block.append(",\n".join(items))
        block.append("  },")
    block.append(f'  "missing": {len(summary.missing)}')
    block.append("}")
    return "\n".join(block)


def read_report(path) -> list[EvalRecord]:
    out = []
    with open(path) as f:
        next(f)
        for line in f:
            u, s, e, snr, net = line.rstrip("\n").split(",")
            out.append(EvalRecord(u, float(s), float(e), float(snr) if snr else None, net))
    return out

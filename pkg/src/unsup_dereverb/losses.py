"""Reconstruction losses with analytic gradients w.r.t. the time-domain estimate.

The SI-SDR term here rescales the *estimate* onto the reference (``beta * est``);
the evaluation metric in :mod:`unsup_dereverb.metrics` projects onto the
reference instead. They are different functions on purpose.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .signal import ConfigurationError, InputError, StftConfig, stft_adjoint, stft_array

# relative floor on the residual energy; exact reconstruction gives about -80 dB
FLOOR_REL = 1e-8


@dataclass
class LossReport:
    total: float
    si_sdr_se: float
    mag: float
    distill: float = math.nan
    aux: float = math.nan


def _check_pair(est: np.ndarray, ref: np.ndarray):
    if est.shape != ref.shape:
        raise InputError(f"estimate {est.shape} and reference {ref.shape} differ in shape")


def si_sdr_se_loss(est: np.ndarray, ref: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative SI-SDR with the estimate scaled by ``beta = <est, ref> / <est, est>``.

    Returns the loss and its gradient with respect to ``est`` (``beta``
    depends on ``est`` and is differentiated through).
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_pair(est, ref)
    uu = float(ref @ ref)
    if uu == 0.0:
        raise InputError("reference signal is all zeros")
    floor = FLOOR_REL * uu
    ee = float(est @ est)
    if ee == 0.0:
        warnings.warn("zero estimate: SI-SDR scale undefined, using beta = 0", RuntimeWarning)
        return 0.0, np.zeros_like(est)
    eu = float(est @ ref)
    beta = eu / ee
    resid = beta * est - ref
    rr = float(resid @ resid)
    if rr <= floor:
        return -10.0 * math.log10(uu / floor), np.zeros_like(est)
    value = 10.0 * math.log10(rr / uu)
    # with beta optimal, ||beta*est - ref||^2 = uu - eu^2/ee
    d_rr = -2.0 * eu / ee * ref + 2.0 * eu * eu / (ee * ee) * est
    grad = (10.0 / math.log(10.0)) / rr * d_rr
    return value, grad


def mag_loss(est: np.ndarray, ref: np.ndarray, cfg: StftConfig | None = None) -> tuple[float, np.ndarray]:
    """Mean absolute difference of STFT magnitudes over all T x F bins."""
    cfg = cfg or StftConfig()
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_pair(est, ref)
    S = stft_array(est, cfg)
    R = stft_array(ref, cfg)
    mag_s = np.abs(S)
    diff = mag_s - np.abs(R)
    count = diff.size
    value = float(np.sum(np.abs(diff)) / count)
    # d|S|/d(Re, Im) = S / |S|; subgradient 0 where |S| == 0 or the magnitudes tie
    unit = np.divide(S, mag_s, out=np.zeros_like(S), where=mag_s > 0)
    G = np.sign(diff) * unit / count
    return value, stft_adjoint(G, cfg, est.shape[-1])


def rec_loss(est: np.ndarray, ref: np.ndarray, cfg: StftConfig | None = None) -> tuple[LossReport, np.ndarray]:
    v_sdr, g_sdr = si_sdr_se_loss(est, ref)
    v_mag, g_mag = mag_loss(est, ref, cfg)
    return LossReport(v_sdr + v_mag, v_sdr, v_mag), g_sdr + g_mag


def stage1_loss(est: np.ndarray, y: np.ndarray, cfg: StftConfig | None = None) -> tuple[LossReport, np.ndarray]:
    """Reverberant-target objective: reconstruct the observed mixture ``y``."""
    return rec_loss(est, y, cfg)


def stage2_loss(est: np.ndarray, teacher_target: np.ndarray, y: np.ndarray, omega: float = 1.2,
                cfg: StftConfig | None = None) -> tuple[LossReport, np.ndarray]:
    """Distillation towards the teacher output plus ``omega`` times the mixture term.

    ``teacher_target`` is a plain array, so no gradient can reach the teacher.
    """
    if not omega > 0:
        raise ConfigurationError(f"omega must be positive, got {omega}")
    rep_d, g_d = rec_loss(est, teacher_target, cfg)
    rep_a, g_a = rec_loss(est, y, cfg)
    rep = LossReport(
        total=rep_d.total + omega * rep_a.total,
        si_sdr_se=rep_d.si_sdr_se + omega * rep_a.si_sdr_se,
        mag=rep_d.mag + omega * rep_a.mag,
        distill=rep_d.total,
        aux=rep_a.total,
    )
    return rep, g_d + omega * g_a

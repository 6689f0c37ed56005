"""Context MLPs for complex spectral estimation, with hand-written backprop.

Two layouts share one fully-connected ReLU stack:

* ``arch="frame"``: one row per frame. The row holds the real/imaginary parts
  (and optionally log magnitudes) of the frames ``t - context - lookback ...
  t + context``; the ``2F`` linear outputs are real/imaginary parts for frame t.
* ``arch="patch"``: one row per time-frequency bin, with weights shared across
  frequency. The row holds log magnitudes over the same frame window and
  ``+-band`` neighbouring bins, plus the bin's normalised frequency; the two
  outputs are the real/imaginary parts of a complex mask for that bin.

Inputs are divided by the utterance's RMS magnitude. Optional ``memory``
features add, for each decay coefficient ``a``, the log of a recursive average
of strictly-past frame powers, ``S[t] = a S[t-1] + (1 - a) |X[t-1]|^2``, which
summarises the reverberant tail beyond the explicit window.

The outputs are read as either the estimate itself (``output="mapping"``,
rescaled by the RMS) or a complex ratio mask on the input bin
(``output="mask"``). With ``residual`` they are a correction to the identity.
Every variant is gain-equivariant and maps an all-zero input to zero.
"""
from __future__ import annotations

import itertools
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .signal import ComplexSpectrogram, ConfigurationError

log = logging.getLogger(__name__)

_TAPE_IDS = itertools.count()


@dataclass
class ModelConfig:
    freq_bins: int = 257
    context: int = 3
    hidden: int = 256
    n_layers: int = 2
    residual: bool = True
    output: str = "mapping"
    log_mag: bool = False
    memory: tuple = ()
    arch: str = "frame"
    lookback: int = 0
    band: int = 1

    def __post_init__(self):
        self.memory = tuple(float(a) for a in self.memory)
        if self.arch not in ("frame", "patch"):
            raise ConfigurationError(f"arch must be 'frame' or 'patch', got {self.arch!r}")
        if self.arch == "patch" and self.output != "mask":
            raise ConfigurationError("the patch layout predicts masks: set output='mask'")
        if self.lookback < 0 or self.band < 0:
            raise ConfigurationError("lookback and band must be >= 0")
        if not all(0.0 < a < 1.0 for a in self.memory):
            raise ConfigurationError("memory decay coefficients must lie in (0, 1)")
        if self.output not in ("mapping", "mask"):
            raise ConfigurationError(f"output must be 'mapping' or 'mask', got {self.output!r}")
        if self.context < 0:
            raise ConfigurationError("context must be >= 0")
        if self.hidden < 1 or self.n_layers < 1:
            raise ConfigurationError("hidden and n_layers must be >= 1")
        if self.freq_bins < 1:
            raise ConfigurationError("freq_bins must be >= 1")

    @property
    def window(self) -> range:
        """Frame offsets seen by each output frame."""
        return range(-self.context - self.lookback, self.context + 1)

    @property
    def in_dim(self) -> int:
        n = len(self.window)
        if self.arch == "patch":
            return n * (2 * self.band + 1) + len(self.memory) + 1
        per_frame = (3 if self.log_mag else 2) * self.freq_bins
        return n * per_frame + len(self.memory) * self.freq_bins

    @property
    def out_dim(self) -> int:
        return 2 if self.arch == "patch" else 2 * self.freq_bins

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden] * self.n_layers + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class ParamSet:
    tensors: "OrderedDict[str, np.ndarray]"
    step_count: int = 0
    # bumped on every in-place update so stale tapes can be detected
    version: int = field(default=0, compare=False)

    def copy(self) -> "ParamSet":
        return ParamSet(OrderedDict((k, v.copy()) for k, v in self.tensors.items()), self.step_count)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    tensors = OrderedDict()
    for i, (fan_in, fan_out) in enumerate(cfg.layer_shapes()):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        tensors[f"b{i}"] = np.zeros(fan_out)
    return ParamSet(tensors)


def check_params(theta: ParamSet, cfg: ModelConfig):
    shapes = cfg.layer_shapes()
    if len(theta.tensors) != 2 * len(shapes):
        raise ConfigurationError("parameter count does not match the model config")
    for i, (a, b) in enumerate(shapes):
        if theta[f"W{i}"].shape != (a, b) or theta[f"b{i}"].shape != (b,):
            raise ConfigurationError(f"layer {i} shape mismatch: expected ({a}, {b})")


@dataclass
class Tape:
    tape_id: int
    params_id: int
    params_version: int
    cfg: ModelConfig
    scale: np.ndarray          # (B,) output gain (mapping mode)
    inputs: np.ndarray         # (B, T, F) input spectrogram (mask mode)
    acts: list                 # inputs to each linear layer, (rows, dim); ReLU outputs after the first
    shape: tuple               # (B, T, F)
    used: bool = False


LOG_MAG_FLOOR = 1e-4


def _memory_features(P: np.ndarray, decays) -> list:
    """Log recursive averages of strictly-past frame power P (B, T, F)."""
    out = []
    past = np.concatenate([np.zeros_like(P[:, :1]), P[:, :-1]], axis=1)
    for a in decays:
        S = lfilter([1.0 - a], [1.0, -a], past, axis=1)
        out.append(np.log10(S + LOG_MAG_FLOOR))
    return out


def _features(X: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, T, F) normalised input -> (rows, in_dim); frames beyond the edges count as silent."""
    B, T, F = X.shape
    P = np.abs(X) ** 2
    lo, hi = -cfg.window.start, cfg.window.stop - 1
    if cfg.arch == "patch":
        k = cfg.band
        L = np.log10(np.pad(P, ((0, 0), (lo, hi), (k, k))) + LOG_MAG_FLOOR)
        cols = [L[:, lo + dt:lo + dt + T, k + df:k + df + F]
                for dt in cfg.window for df in range(-k, k + 1)]
        cols += _memory_features(P, cfg.memory)
        cols.append(np.linspace(-1.0, 1.0, F))
        # feature-major storage: each column is filled contiguously; BLAS takes the transposed view
        out = np.empty((cfg.in_dim, B, T, F))
        for j, c in enumerate(cols):
            out[j] = c
        return out.reshape(cfg.in_dim, B * T * F).T
    Xp = np.pad(X, ((0, 0), (lo, hi), (0, 0)))
    parts = [Xp.real, Xp.imag]
    if cfg.log_mag:
        parts.append(np.log10(np.abs(Xp) ** 2 + LOG_MAG_FLOOR))
    per_frame = np.concatenate(parts, axis=-1)
    cols = [per_frame[:, lo + dt:lo + dt + T] for dt in cfg.window]
    cols += _memory_features(P, cfg.memory)
    return np.concatenate(cols, axis=-1).reshape(B * T, cfg.in_dim)


def _rms(X: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(np.abs(X) ** 2, axis=(1, 2)))


def forward_batch(theta: ParamSet, X: np.ndarray, cfg: ModelConfig) -> tuple[np.ndarray, Tape]:
    """Map a (B, T, F) complex batch to an estimate of the same shape."""
    if X.ndim == 2:
        X = X[None]
    B, T, F = X.shape
    if F != cfg.freq_bins:
        raise ConfigurationError(f"input has {F} bins, model expects {cfg.freq_bins}")
    # an all-zero input stays zero: normalise by 1, scale the output by 0
    scale = _rms(X)
    Xn = X / np.where(scale > 0, scale, 1.0)[:, None, None]
    h = _features(Xn, cfg)
    acts = [h]
    n_lin = cfg.n_layers + 1
    for i in range(n_lin):
        h = h @ theta[f"W{i}"]
        h += theta[f"b{i}"]
        if i < n_lin - 1:
            np.maximum(h, 0.0, out=h)
            acts.append(h)
    if cfg.arch == "patch":
        out = h.reshape(B, T, F, 2)
        O = out[..., 0] + 1j * out[..., 1]
    else:
        out = h.reshape(B, T, 2 * F)
        O = out[..., :F] + 1j * out[..., F:]
    if cfg.output == "mask":
        Y = (O + 1.0) * X if cfg.residual else O * X
    else:
        Y = (O + Xn if cfg.residual else O) * scale[:, None, None]
    tape = Tape(next(_TAPE_IDS), id(theta), theta.version, cfg, scale, X, acts, (B, T, F))
    return Y, tape


def backward_batch(theta: ParamSet, tape: Tape, dY: np.ndarray) -> "OrderedDict[str, np.ndarray]":
    """Parameter gradients given ``dY = dL/dRe(Y) + i dL/dIm(Y)``."""
    if tape.params_id != id(theta) or tape.params_version != theta.version:
        raise RuntimeError("stale tape: parameters changed since the forward pass")
    cfg = tape.cfg
    B, T, F = tape.shape
    if dY.ndim == 2:
        dY = dY[None]
    if cfg.output == "mask":
        # Y = M X  =>  dL/dM = dY conj(X) in the same Re + i Im convention
        dY = dY * np.conj(tape.inputs)
    else:
        dY = dY * tape.scale[:, None, None]
    if cfg.arch == "patch":
        g = np.stack([dY.real, dY.imag], axis=-1).reshape(B * T * F, 2)
    else:
        g = np.concatenate([dY.real, dY.imag], axis=-1).reshape(B * T, 2 * F)
    grads = OrderedDict()
    n_lin = cfg.n_layers + 1
    for i in reversed(range(n_lin)):
        a = tape.acts[i]
        grads[f"W{i}"] = a.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0:
            # ReLU derivative: the unit was active iff its stored output is positive
            g = g @ theta[f"W{i}"].T
            g *= a > 0
    tape.used = True
    return OrderedDict((k, grads[k]) for k in theta.tensors)


def forward(theta: ParamSet, spec: ComplexSpectrogram, cfg: ModelConfig) -> tuple[ComplexSpectrogram, Tape]:
    Y, tape = forward_batch(theta, spec.frames, cfg)
    return ComplexSpectrogram(Y[0], spec.config, spec.origin_len), tape


def backward(theta: ParamSet, tape: Tape, d_estimate) -> "OrderedDict[str, np.ndarray]":
    if isinstance(d_estimate, ComplexSpectrogram):
        d_estimate = d_estimate.frames
    return backward_batch(theta, tape, d_estimate)


@dataclass
class OptimState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros_like(cls, theta: ParamSet, **kw) -> "OptimState":
        m = OrderedDict((k, np.zeros_like(v)) for k, v in theta.tensors.items())
        v = OrderedDict((k, np.zeros_like(v)) for k, v in theta.tensors.items())
        return cls(m, v, **kw)


def adam_step(theta: ParamSet, grads, state: OptimState) -> tuple[ParamSet, OptimState]:
    """Bias-corrected adaptive-moment update, in place. Non-finite gradients skip the step."""
    if set(grads) != set(theta.tensors):
        raise ConfigurationError("gradient names do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient, step skipped (%d so far)", state.skipped)
        return theta, state
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for k, p in theta.tensors.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape mismatch for {k}")
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    theta.step_count += 1
    theta.version += 1
    return theta, state


def ema_update(teacher: ParamSet, student: ParamSet, alpha: float = 0.999) -> ParamSet:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigurationError(f"EMA momentum must lie in [0, 1), got {alpha}")
    if list(teacher.tensors) != list(student.tensors):
        raise ConfigurationError("teacher and student parameter names differ")
    for k, p in teacher.tensors.items():
        s = student.tensors[k]
        if p.shape != s.shape:
            raise ConfigurationError(f"shape mismatch for {k}")
        p *= alpha
        p += (1.0 - alpha) * s
    teacher.step_count += 1
    teacher.version += 1
    return teacher

"""Stage I (reverberant-target training) and Stage II (mean-teacher self-distillation).

Every stochastic decision draws from its own stream keyed by
``(seed, step, tag, item)``, so switching one augmentation off leaves all
the others unchanged; ablation runs stay paired.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Manifest
from .losses import LossReport, stage1_loss, stage2_loss, rec_loss
from .mapper import (ModelConfig, OptimState, ParamSet, adam_step, backward_batch, ema_update,
                     forward_batch, init_params)
from .rir import (StatisticalRtfParams, relative_rir, sample_room, sample_statistical_rtf,
                  simulate_room)
from .signal import (DEFAULT_SR, ConfigurationError, InputError, StftConfig, Waveform,
                     convolve_trunc_first, istft_adjoint, istft_array, stft_array)

log = logging.getLogger(__name__)

# stream tags
_BATCH, _RIR, _NOISE_T, _NOISE_S, _INIT, _BANK = 0, 1, 2, 3, 4, 5


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def _check_range(name, r):
    if len(r) != 2 or not r[0] <= r[1]:
        raise ConfigurationError(f"{name} must be an ordered pair, got {r}")


@dataclass
class Stage1Config:
    t60_range_s: tuple = (0.5, 1.2)
    drr_range_db: tuple = (-16.0, -6.0)
    batch_size: int = 4
    crop_len_s: float = 4.0
    steps: int = 5000
    lr: float = 1e-3
    seed: int = 0
    ckpt_every: int = 500
    sample_rate: int = DEFAULT_SR
    stft: StftConfig = field(default_factory=StftConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        _check_range("t60_range_s", self.t60_range_s)
        _check_range("drr_range_db", self.drr_range_db)
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be >= 1")
        if self.model.freq_bins != self.stft.n_bins:
            raise ConfigurationError("model.freq_bins must equal fft_len // 2 + 1")


@dataclass
class Stage2Config:
    length_range_m: tuple = (5.0, 10.0)
    width_range_m: tuple = (5.0, 10.0)
    height_range_m: tuple = (3.0, 4.0)
    t60_range_s: tuple = (0.2, 1.3)
    omega: float = 1.2
    alpha: float = 0.999
    noise_factor: float = 0.02
    use_aux: bool = True
    inject_noise: bool = True
    batch_size: int = 4
    crop_len_s: float = 4.0
    steps: int = 5000
    lr: float = 1e-3
    seed: int = 0
    ckpt_every: int = 500
    # >0: draw rooms from a pre-simulated bank of this size instead of simulating per item
    room_bank: int = 0
    sample_rate: int = DEFAULT_SR
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        for name in ("length_range_m", "width_range_m", "height_range_m", "t60_range_s"):
            _check_range(name, getattr(self, name))
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not self.omega > 0:
            raise ConfigurationError(f"omega must be positive, got {self.omega}")
        if self.noise_factor < 0:
            raise ConfigurationError("noise_factor must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be >= 1")


class LossLog:
    """Append-only CSV progress log."""

    def __init__(self, path, stage: int):
        self.path = Path(path)
        cols = ["step", "loss_total", "loss_sisdr", "loss_mag"]
        if stage == 2:
            cols += ["loss_distill", "loss_aux"]
        self.stage = stage
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as f:
            f.write(",".join(cols) + "\n")

    def append(self, step: int, rep: LossReport):
        vals = [rep.total, rep.si_sdr_se, rep.mag]
        if self.stage == 2:
            vals += [rep.distill, rep.aux]
        with open(self.path, "a") as f:
            f.write(f"{step}," + ",".join(repr(float(v)) for v in vals) + "\n")


def read_loss_log(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def _load_train_audio(dataset: Manifest, sample_rate: int) -> list[np.ndarray]:
    train = dataset.split("train") if any(r.split == "train" for r in dataset.rows) else dataset
    if len(train) == 0:
        raise ConfigurationError("manifest has no training mixtures")
    audio = []
    for row, w in zip(train.rows, train.load_mixtures()):
        if w.sample_rate != sample_rate:
            raise ConfigurationError(f"{row.utt_id}: sample rate {w.sample_rate} != {sample_rate}")
        audio.append(w.samples)
    return audio


def _sample_crops(audio: list[np.ndarray], batch: int, n: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.choice(len(audio), size=batch, replace=len(audio) < batch)
    out = np.zeros((batch, n))
    for b, i in enumerate(idx):
        y = audio[i]
        if y.shape[0] <= n:
            if y.shape[0] < n:
                log.info("utterance %d shorter than crop (%d < %d), zero-padded", i, y.shape[0], n)
            out[b, :y.shape[0]] = y
        else:
            s = int(rng.integers(0, y.shape[0] - n + 1))
            out[b] = y[s:s + n]
    return out


def _student_step(theta: ParamSet, mcfg: ModelConfig, scfg: StftConfig, inputs: np.ndarray,
                  loss_fn) -> tuple[LossReport, dict]:
    """Forward a batch, apply ``loss_fn(b, est_b) -> (report, grad)``, backprop to parameters."""
    B, n = inputs.shape
    Y, tape = forward_batch(theta, stft_array(inputs, scfg), mcfg)
    est = istft_array(Y, scfg, n)
    reps, grads = [], np.empty_like(est)
    for b in range(B):
        rep, g = loss_fn(b, est[b])
        reps.append(rep)
        grads[b] = g / B
    mean = LossReport(*(float(np.mean([getattr(r, k) for r in reps]))
                        for k in ("total", "si_sdr_se", "mag", "distill", "aux")))
    if not math.isfinite(mean.total):
        return mean, None
    return mean, backward_batch(theta, tape, istft_adjoint(grads, scfg))


def _checkpoint_paths(out_dir: Path, step: int, final: bool) -> Path:
    return out_dir / ("final.ckpt" if final else f"step{step:06d}.ckpt")


def train_stage1(dataset: Manifest, cfg: Stage1Config, out_dir, init=None) -> Path:
    """Reverberant-target training: recover each mixture from a further-reverberated copy."""
    out_dir = Path(out_dir)
    audio = _load_train_audio(dataset, cfg.sample_rate)
    n = int(round(cfg.crop_len_s * cfg.sample_rate))
    if init is not None:
        theta, _, state, mcfg, _ = load_checkpoint(init)
    else:
        mcfg = cfg.model
        theta = init_params(mcfg, _stream(cfg.seed, _INIT))
        state = OptimState.zeros_like(theta, lr=cfg.lr)
    loss_log = LossLog(out_dir / "loss_log.csv", stage=1)
    skipped = 0
    for step in range(1, cfg.steps + 1):
        y = _sample_crops(audio, cfg.batch_size, n, _stream(cfg.seed, step, _BATCH))
        z = np.empty_like(y)
        for b in range(cfg.batch_size):
            rng = _stream(cfg.seed, step, _RIR, b)
            p = StatisticalRtfParams(rng.uniform(*cfg.t60_range_s), rng.uniform(*cfg.drr_range_db),
                                     cfg.sample_rate)
            z[b] = convolve_trunc_first(y[b], sample_statistical_rtf(p, rng).samples)
        rep, grads = _student_step(theta, mcfg, cfg.stft, z,
                                   lambda b, est: stage1_loss(est, y[b], cfg.stft))
        if grads is None:
            skipped += 1
            log.warning("step %d: non-finite loss, skipped (%d total)", step, skipped)
            continue
        adam_step(theta, grads, state)
        loss_log.append(step, rep)
        if step % cfg.ckpt_every == 0 or step == cfg.steps:
            save_checkpoint(_checkpoint_paths(out_dir, step, step == cfg.steps), theta, None, state,
                            mcfg, stage=1, extra={"skipped": skipped})
    return out_dir / "final.ckpt"


class RoomSource:
    """Relative RIRs for Stage II, simulated per request or drawn from a fixed bank."""

    def __init__(self, cfg: Stage2Config):
        self.cfg = cfg
        self.resampled = 0
        self.bank = []
        for i in range(cfg.room_bank):
            self.bank.append(self._simulate(_stream(cfg.seed, _BANK, i)))

    def _simulate(self, rng: np.random.Generator) -> np.ndarray:
        c = self.cfg
        while True:
            room = sample_room(rng, c.length_range_m, c.width_range_m, c.height_range_m,
                               c.t60_range_s, sample_rate=c.sample_rate)
            try:
                h_sim, h_dir = simulate_room(room)
            except ConfigurationError:
                self.resampled += 1
                continue
            rel = relative_rir(h_sim, h_dir)
            if rel.meta["numerical_warning"]:
                self.resampled += 1
                log.info("degenerate relative RIR, room resampled (%d so far)", self.resampled)
                continue
            return rel.samples

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        if self.bank:
            return self.bank[int(rng.integers(len(self.bank)))]
        return self._simulate(rng)


def train_stage2(dataset: Manifest, cfg: Stage2Config, init, out_dir, rooms: RoomSource | None = None) -> Path:
    """Self-distillation from an EMA teacher, initialised from a Stage I checkpoint."""
    out_dir = Path(out_dir)
    audio = _load_train_audio(dataset, cfg.sample_rate)
    n = int(round(cfg.crop_len_s * cfg.sample_rate))
    theta, teacher, _, mcfg, _ = load_checkpoint(init)
    if mcfg.freq_bins != cfg.stft.n_bins:
        raise ConfigurationError("checkpoint model does not match the STFT config")
    # fresh optimiser; teacher starts as a copy of the initial student
    state = OptimState.zeros_like(theta, lr=cfg.lr)
    teacher = theta.copy()
    rooms = rooms if rooms is not None else RoomSource(cfg)
    loss_log = LossLog(out_dir / "loss_log.csv", stage=2)
    skipped = 0
    for step in range(1, cfg.steps + 1):
        y = _sample_crops(audio, cfg.batch_size, n, _stream(cfg.seed, step, _BATCH))
        y_t = y.copy()
        z_s = np.empty_like(y)
        for b in range(cfg.batch_size):
            h_rel = rooms.draw(_stream(cfg.seed, step, _RIR, b))
            z_s[b] = convolve_trunc_first(y[b], h_rel)
            sigma = cfg.noise_factor * float(np.std(y[b]))
            # noise streams are drawn even when injection is off, keeping runs paired
            eps_t = _stream(cfg.seed, step, _NOISE_T, b).standard_normal(n) * sigma
            eps_s = _stream(cfg.seed, step, _NOISE_S, b).standard_normal(n) * sigma
            if cfg.inject_noise:
                y_t[b] += eps_t
                z_s[b] += eps_s
        # teacher pass: plain values, no tape kept
        Yt, _ = forward_batch(teacher, stft_array(y_t, cfg.stft), mcfg)
        target = istft_array(Yt, cfg.stft, n)

        def loss_fn(b, est):
            if cfg.use_aux:
                return stage2_loss(est, target[b], y[b], cfg.omega, cfg.stft)
            rep, g = rec_loss(est, target[b], cfg.stft)
            rep.distill = rep.total
            return rep, g

        rep, grads = _student_step(theta, mcfg, cfg.stft, z_s, loss_fn)
        if grads is None:
            skipped += 1
            log.warning("step %d: non-finite loss, skipped (%d total)", step, skipped)
            continue
        adam_step(theta, grads, state)
        ema_update(teacher, theta, cfg.alpha)
        loss_log.append(step, rep)
        if step % cfg.ckpt_every == 0 or step == cfg.steps:
            save_checkpoint(_checkpoint_paths(out_dir, step, step == cfg.steps), theta, teacher, state,
                            mcfg, stage=2, extra={"skipped": skipped, "rooms_resampled": rooms.resampled})
    return out_dir / "final.ckpt"


def enhance_array(theta: ParamSet, mcfg: ModelConfig, y: np.ndarray, scfg: StftConfig | None = None) -> np.ndarray:
    scfg = scfg or StftConfig(fft_len=2 * (mcfg.freq_bins - 1), win_len=2 * (mcfg.freq_bins - 1),
                              hop_len=(mcfg.freq_bins - 1) // 2)
    Y, _ = forward_batch(theta, stft_array(y, scfg), mcfg)
    return istft_array(Y, scfg, y.shape[-1])[0]


def enhance(ckpt, y: Waveform, which: str = "student", sample_rate: int = DEFAULT_SR) -> Waveform:
    """Run the student (or EMA teacher) network of a checkpoint on a full utterance."""
    if y.sample_rate != sample_rate:
        raise InputError(f"sample rate {y.sample_rate} does not match training rate {sample_rate}")
    theta, teacher, _, mcfg, _ = load_checkpoint(ckpt)
    if which == "teacher":
        if teacher is None:
            raise ConfigurationError("checkpoint has no teacher parameters")
        theta = teacher
    elif which != "student":
        raise ConfigurationError(f"unknown network {which!r}")
    return Waveform(enhance_array(theta, mcfg, y.samples), y.sample_rate)

"""Flat ``key = value`` run configuration.

One file covers the STFT, the network and both training stages. ``#`` starts
a comment, ranges are written as comma-separated pairs, booleans as
``true``/``false``. Unknown keys are rejected. ``format_config`` writes every
field with its resolved value, so the echoed file reproduces the run.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

from .mapper import ModelConfig
from .signal import DEFAULT_SR, ConfigurationError, StftConfig
from .training import Stage1Config, Stage2Config


@dataclass
class RunConfig:
    # shared
    seed: int = 0
    sample_rate: int = DEFAULT_SR
    batch_size: int = 4
    crop_len_s: float = 4.0
    steps: int = 5000
    lr: float = 1e-3
    ckpt_every: int = 500
    # STFT
    win_len: int = 512
    hop_len: int = 128
    fft_len: int = 512
    # network
    context: int = 3
    hidden: int = 256
    n_layers: int = 2
    residual: bool = True
    arch: str = "frame"              # frame | patch
    output: str = "mapping"          # mapping | mask
    log_mag: bool = False
    memory: tuple = ()               # any length; "none" for no memory features
    lookback: int = 0
    band: int = 1
    # stage I: statistical RTF augmentation
    rtf_t60_range_s: tuple = (0.5, 1.2)
    rtf_drr_range_db: tuple = (-16.0, -6.0)
    # stage II: simulated rooms and distillation
    room_length_range_m: tuple = (5.0, 10.0)
    room_width_range_m: tuple = (5.0, 10.0)
    room_height_range_m: tuple = (3.0, 4.0)
    room_t60_range_s: tuple = (0.2, 1.3)
    room_bank: int = 0
    omega: float = 1.2
    alpha: float = 0.999
    noise_factor: float = 0.02
    use_aux: bool = True
    inject_noise: bool = True


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if key == "memory":
            return () if text.lower() == "none" else tuple(float(p) for p in text.split(","))
        if isinstance(default, tuple):
            parts = tuple(float(p) for p in text.split(","))
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} values")
            return parts
        if isinstance(default, str):
            return text
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key!r}: {text!r} ({exc})") from exc
    raise ConfigurationError(f"unsupported type for {key!r}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{ln}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"{source}:{ln}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"{source}:{ln}: duplicate key {key!r}")
        values[key] = _parse_value(key, val, _FIELDS[key].default)
    cfg = RunConfig(**values)
    # surface invariant violations now rather than mid-run
    to_stage1(cfg)
    to_stage2(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read(), str(path))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if not v:
            return "none"
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, str):
        return v
    return repr(v)


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{name} = {_format_value(getattr(cfg, name))}\n" for name in _FIELDS)


def stft_config(cfg: RunConfig) -> StftConfig:
    return StftConfig(cfg.win_len, cfg.hop_len, cfg.fft_len)


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(freq_bins=cfg.fft_len // 2 + 1, context=cfg.context, hidden=cfg.hidden,
                       n_layers=cfg.n_layers, residual=cfg.residual, output=cfg.output,
                       log_mag=cfg.log_mag, memory=cfg.memory, arch=cfg.arch,
                       lookback=cfg.lookback, band=cfg.band)


def to_stage1(cfg: RunConfig) -> Stage1Config:
    return Stage1Config(t60_range_s=cfg.rtf_t60_range_s, drr_range_db=cfg.rtf_drr_range_db,
                        batch_size=cfg.batch_size, crop_len_s=cfg.crop_len_s, steps=cfg.steps,
                        lr=cfg.lr, seed=cfg.seed, ckpt_every=cfg.ckpt_every,
                        sample_rate=cfg.sample_rate, stft=stft_config(cfg), model=model_config(cfg))


def to_stage2(cfg: RunConfig) -> Stage2Config:
    return Stage2Config(length_range_m=cfg.room_length_range_m, width_range_m=cfg.room_width_range_m,
                        height_range_m=cfg.room_height_range_m, t60_range_s=cfg.room_t60_range_s,
                        omega=cfg.omega, alpha=cfg.alpha, noise_factor=cfg.noise_factor,
                        use_aux=cfg.use_aux, inject_noise=cfg.inject_noise,
                        batch_size=cfg.batch_size, crop_len_s=cfg.crop_len_s, steps=cfg.steps,
                        lr=cfg.lr, seed=cfg.seed, ckpt_every=cfg.ckpt_every,
                        room_bank=cfg.room_bank, sample_rate=cfg.sample_rate, stft=stft_config(cfg))

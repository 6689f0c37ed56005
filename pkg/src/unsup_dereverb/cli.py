"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 configuration error,
3 runtime or numerical failure (including partial evaluation).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, format_config, load_config, stft_config, to_stage1, to_stage2
from .data import build_dataset, read_manifest, read_wav, write_wav
from .metrics import evaluate_set, write_report
from .rir import (StatisticalRtfParams, measure_drr, sample_room, sample_statistical_rtf,
                  schroeder_t60, simulate_room)
from .signal import ConfigurationError, StftConfig, Waveform, stft_array
from .training import enhance, enhance_array, train_stage1, train_stage2

log = logging.getLogger("unsup_dereverb")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _synth(a) -> int:
    m = build_dataset(a.out, {"train": a.train, "val": a.val, "test": a.test}, seed=a.seed,
                      dur_s=a.dur, jobs=a.jobs)
    print(f"wrote {len(m)} utterances and {Path(a.out) / 'manifest.jsonl'}")
    return EXIT_OK


def _rir(a) -> int:
    rng = np.random.default_rng(a.seed)
    if a.mode == "statistical":
        r = sample_statistical_rtf(StatisticalRtfParams(a.t60, a.drr), rng)
        print(f"statistical RTF: {len(r.samples)} taps, DRR {measure_drr(r):.3f} dB")
    else:
        room = sample_room(rng, t60_range=(a.t60, a.t60))
        r, _ = simulate_room(room)
        print(f"room {room.dims.round(2).tolist()} m, absorption {r.meta['absorption']:.4f}, "
              f"Schroeder T60 {schroeder_t60(r.samples, r.sample_rate):.3f} s")
    write_wav(a.out, r.taps)
    return EXIT_OK


def _train(a) -> int:
    cfg = load_config(a.config) if a.config else RunConfig()
    if a.seed is not None:
        cfg.seed = a.seed
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective").write_text(format_config(cfg))
    manifest = read_manifest(a.manifest)
    if a.stage == 1:
        path = train_stage1(manifest, to_stage1(cfg), out, init=a.init)
    else:
        if a.init is None:
            raise ConfigurationError("stage 2 needs --init with a stage 1 checkpoint")
        path = train_stage2(manifest, to_stage2(cfg), a.init, out)
    print(f"checkpoint: {path}")
    return EXIT_OK


def _enhance(a) -> int:
    y = read_wav(a.inp)
    write_wav(a.out, enhance(a.ckpt, y, a.net, sample_rate=y.sample_rate))
    return EXIT_OK


def _eval(a) -> int:
    manifest = read_manifest(a.manifest)
    theta, teacher, _, mcfg, _ = load_checkpoint(a.ckpt)
    nets = ["student", "teacher"] if a.net == "both" else [a.net]
    records, blocks, missing = [], [], False
    for net in nets:
        params = theta if net == "student" else teacher
        if params is None:
            raise ConfigurationError("checkpoint has no teacher parameters")

        def enhancer(y, params=params):
            return Waveform(enhance_array(params, mcfg, y.samples), y.sample_rate)

        summary = evaluate_set(enhancer, manifest, by_snr_buckets=a.by_snr, which_net=net, split=a.split)
        records += summary.records
        missing |= bool(summary.missing)
        blocks.append(f"# {net}\n" + write_report(a.report, summary))
    if len(nets) > 1:
        summary.records = records
        write_report(a.report, summary)
    text = "\n".join(blocks)
    Path(str(a.report) + ".summary.txt").write_text(text + "\n")
    print(text)
    if missing:
        print("partial evaluation: some references were missing", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def write_pgm(path, image: np.ndarray):
    """Plain (P2) 8-bit PGM."""
    h, w = image.shape
    rows = [" ".join(str(int(v)) for v in row) for row in image]
    Path(path).write_text(f"P2\n{w} {h}\n255\n" + "\n".join(rows) + "\n")


def spectrogram_image(x: np.ndarray, cfg: StftConfig, db_floor: float = -80.0) -> np.ndarray:
    """Log magnitude relative to the peak, clipped to [db_floor, 0], mapped to 0..255; low bins at the bottom."""
    if not db_floor < 0:
        raise ConfigurationError("db floor must be negative")
    mag = np.abs(stft_array(x, cfg)).T[::-1]
    peak = mag.max()
    if peak == 0:
        return np.zeros(mag.shape, dtype=np.uint8)
    db = 20.0 * np.log10(np.maximum(mag / peak, 1e-20))
    db = np.clip(db, db_floor, 0.0)
    return np.round((db - db_floor) / -db_floor * 255.0).astype(np.uint8)


def _spectrogram(a) -> int:
    w = read_wav(a.inp)
    write_pgm(a.out, spectrogram_image(w.samples, StftConfig(), a.db_floor))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unsup-dereverb", description="Two-stage unsupervised dereverberation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--jobs", type=int, default=1, help="worker processes where supported (default 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="generate a toy train/val/test corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--train", type=int, default=200)
    s.add_argument("--val", type=int, default=20)
    s.add_argument("--test", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dur", type=float, default=4.0, help="utterance length in seconds")
    s.set_defaults(func=_synth)

    s = sub.add_parser("rir", help="export a statistical or simulated impulse response")
    s.add_argument("--mode", choices=["statistical", "room"], required=True)
    s.add_argument("--t60", type=float, required=True)
    s.add_argument("--drr", type=float, default=-10.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_rir)

    s = sub.add_parser("train", help="run stage 1 or stage 2 training")
    s.add_argument("--stage", type=int, choices=[1, 2], required=True)
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--init")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_train)

    s = sub.add_parser("enhance", help="dereverberate one WAV file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--net", choices=["student", "teacher"], default="student")
    s.set_defaults(func=_enhance)

    s = sub.add_parser("eval", help="score a checkpoint on a manifest's test split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--by-snr", action="store_true")
    s.add_argument("--net", choices=["student", "teacher", "both"], default="student")
    s.add_argument("--split", default="test")
    s.set_defaults(func=_eval)

    s = sub.add_parser("spectrogram", help="export a log-magnitude spectrogram as PGM")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--db-floor", type=float, default=-80.0)
    s.set_defaults(func=_spectrogram)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

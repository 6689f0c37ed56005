import json
import struct

import numpy as np
import pytest

from unsup_dereverb.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from unsup_dereverb.mapper import ModelConfig, OptimState, init_params


@pytest.fixture
def saved(tmp_path):
    cfg = ModelConfig(freq_bins=33, context=1, hidden=8)
    theta = init_params(cfg, np.random.default_rng(0))
    teacher = init_params(cfg, np.random.default_rng(1))
    state = OptimState.zeros_like(theta, lr=5e-4)
    state.t = 3
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, theta, teacher, state, cfg, stage=2, extra={"note": 1})
    return path, theta, teacher, state, cfg


def test_round_trip_is_bit_exact(saved, tmp_path):
    path, theta, teacher, state, cfg = saved
    th2, te2, st2, cfg2, header = load_checkpoint(path)
    assert cfg2 == cfg and header["stage"] == 2
    assert th2.flat().tobytes() == theta.flat().tobytes()
    assert te2.flat().tobytes() == teacher.flat().tobytes()
    assert st2.t == 3 and st2.lr == 5e-4
    again = tmp_path / "b.ckpt"
    save_checkpoint(again, th2, te2, st2, cfg2, stage=2, extra=header["extra"])
    assert again.read_bytes() == path.read_bytes()


def test_student_only_checkpoint(tmp_path):
    cfg = ModelConfig(freq_bins=9, context=0, hidden=4)
    theta = init_params(cfg, np.random.default_rng(0))
    save_checkpoint(tmp_path / "s.ckpt", theta, None, None, cfg)
    _, teacher, state, _, _ = load_checkpoint(tmp_path / "s.ckpt")
    assert teacher is None and state is None


def test_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOTACHECKPOINT")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_truncated_file(saved, tmp_path):
    path = saved[0]
    raw = path.read_bytes()
    for cut in (7, 40, len(raw) - 8):
        p = tmp_path / f"t{cut}.ckpt"
        p.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


def _rewrite_header(path, tmp_path, edit):
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<I", raw[5:9])
    header = json.loads(raw[9:9 + hlen])
    edit(header)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = tmp_path / "edited.ckpt"
    out.write_bytes(raw[:5] + struct.pack("<I", len(hb)) + hb + raw[9 + hlen:])
    return out


def test_version_mismatch(saved, tmp_path):
    out = _rewrite_header(saved[0], tmp_path, lambda h: h.update(version=99))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(out)


def test_shape_mismatch(saved, tmp_path):
    out = _rewrite_header(saved[0], tmp_path, lambda h: h["model"].update(hidden=9))
    with pytest.raises(CheckpointError):
        load_checkpoint(out)

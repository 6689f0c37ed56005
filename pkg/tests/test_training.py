import logging
import math

import numpy as np
import pytest

from unsup_dereverb.checkpoint import load_checkpoint
from unsup_dereverb.data import Manifest
from unsup_dereverb.losses import stage2_loss
from unsup_dereverb.mapper import ModelConfig, backward_batch, forward_batch, init_params
from unsup_dereverb.signal import (ConfigurationError, InputError, StftConfig, Waveform,
                                   istft_adjoint, istft_array, stft_array)
from unsup_dereverb.training import (Stage1Config, Stage2Config, enhance, read_loss_log,
                                     train_stage1, train_stage2)

TINY = ModelConfig(context=1, hidden=16)


def _s1(**kw):
    base = dict(steps=20, batch_size=2, crop_len_s=0.5, model=TINY, ckpt_every=10)
    base.update(kw)
    return Stage1Config(**base)


def _s2(**kw):
    base = dict(steps=3, batch_size=2, crop_len_s=0.5, ckpt_every=10)
    base.update(kw)
    return Stage2Config(**base)


class FixedRooms:
    """Stand-in room source: records the draws so pairing can be checked."""

    def __init__(self, h=None):
        self.h = np.array([1.0]) if h is None else h
        self.resampled = 0
        self.draws = []

    def draw(self, rng):
        u = rng.uniform()
        self.draws.append(u)
        h = self.h.copy()
        if h.size > 1:
            h[1:] *= u
        return h


@pytest.fixture(scope="module")
def stage1_ckpt(small_dataset, tmp_path_factory):
    return train_stage1(small_dataset, _s1(), tmp_path_factory.mktemp("s1"))


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        Stage1Config(t60_range_s=(1.2, 0.5))
    with pytest.raises(ConfigurationError):
        Stage1Config(steps=0)
    with pytest.raises(ConfigurationError):
        Stage2Config(alpha=1.0)
    with pytest.raises(ConfigurationError):
        Stage2Config(omega=-1.0)
    with pytest.raises(ConfigurationError):
        Stage2Config(noise_factor=-0.1)
    assert Stage2Config().alpha == 0.999 and Stage2Config().omega == 1.2
    assert Stage2Config().noise_factor == 0.02


def test_empty_manifest_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        train_stage1(Manifest([], tmp_path), _s1(), tmp_path)


def test_stage1_outputs_and_determinism(small_dataset, stage1_ckpt, tmp_path):
    out = stage1_ckpt.parent
    log = read_loss_log(out / "loss_log.csv")
    assert log.shape == (20, 4) and np.all(np.isfinite(log))
    assert (out / "loss_log.csv").read_text().startswith("step,loss_total,loss_sisdr,loss_mag\n")
    assert (out / "step000010.ckpt").exists() and stage1_ckpt.name == "final.ckpt"
    again = train_stage1(small_dataset, _s1(), tmp_path)
    assert again.read_bytes() == stage1_ckpt.read_bytes()
    assert (tmp_path / "loss_log.csv").read_bytes() == (out / "loss_log.csv").read_bytes()


def test_stage1_loss_decreases(small_dataset, tmp_path):
    cfg = _s1(steps=500, batch_size=4, crop_len_s=1.0, ckpt_every=1000, model=ModelConfig(context=1, hidden=32))
    train_stage1(small_dataset, cfg, tmp_path)
    total = read_loss_log(tmp_path / "loss_log.csv")[:, 1]
    blocks = total.reshape(10, 50).mean(axis=1)
    # 50-step block averages: the last is below the first, and most consecutive blocks improve
    assert blocks[-1] < blocks[0]
    assert np.mean(np.diff(blocks) < 0) >= 0.5


def test_short_utterances_are_zero_padded(small_dataset, tmp_path, caplog):
    with caplog.at_level(logging.INFO, logger="unsup_dereverb.training"):
        train_stage1(small_dataset, _s1(steps=1, crop_len_s=2.0), tmp_path)
    assert "zero-padded" in caplog.text


def test_stage2_teacher_moves_only_by_ema(small_dataset, stage1_ckpt, tmp_path):
    init, _, _, _, _ = load_checkpoint(stage1_ckpt)
    path = train_stage2(small_dataset, _s2(steps=1, alpha=0.25), stage1_ckpt, tmp_path, rooms=FixedRooms())
    student, teacher, _, _, header = load_checkpoint(path)
    assert header["stage"] == 2
    np.testing.assert_allclose(teacher.flat(), 0.25 * init.flat() + 0.75 * student.flat(), rtol=1e-12, atol=1e-15)
    assert not np.array_equal(student.flat(), init.flat())


def test_stage2_degenerate_augmentation_runs(small_dataset, stage1_ckpt, tmp_path):
    path = train_stage2(small_dataset, _s2(noise_factor=0.0), stage1_ckpt, tmp_path, rooms=FixedRooms())
    log = read_loss_log(tmp_path / "loss_log.csv")
    assert log.shape == (3, 6) and np.all(np.isfinite(log))
    assert (tmp_path / "loss_log.csv").read_text().startswith(
        "step,loss_total,loss_sisdr,loss_mag,loss_distill,loss_aux\n")
    assert path.exists()


def test_ablations_share_room_draws(small_dataset, stage1_ckpt, tmp_path):
    h = np.r_[1.0, 0.3 * np.random.default_rng(0).standard_normal(200)]
    draws = []
    for name, kw in [("full", {}), ("nonoise", {"inject_noise": False}), ("noaux", {"use_aux": False})]:
        rooms = FixedRooms(h)
        train_stage2(small_dataset, _s2(**kw), stage1_ckpt, tmp_path / name, rooms=rooms)
        draws.append(rooms.draws)
    assert draws[0] == draws[1] == draws[2]
    full = read_loss_log(tmp_path / "full" / "loss_log.csv")
    noaux = read_loss_log(tmp_path / "noaux" / "loss_log.csv")
    assert np.all(np.isnan(noaux[:, 5])) and np.all(np.isfinite(full[:, 5]))


def test_teacher_target_carries_no_gradient():
    # perturbing the teacher target changes the loss, yet the student gradient
    # still matches finite differences taken with that target held fixed
    r = np.random.default_rng(0)
    cfg = ModelConfig(freq_bins=33, context=1, hidden=6)
    scfg = StftConfig(win_len=64, hop_len=16, fft_len=64)
    theta = init_params(cfg, r)
    z, y = r.standard_normal((2, 300))
    t1, t2 = r.standard_normal((2, 300))

    def run(target):
        Y, tape = forward_batch(theta, stft_array(z, scfg)[None], cfg)
        est = istft_array(Y, scfg, 300)[0]
        rep, g = stage2_loss(est, target, y, 1.2, scfg)
        return rep.total, g, tape

    assert run(t1)[0] != run(t2)[0]
    _, g, tape = run(t2)
    grads = backward_batch(theta, tape, istft_adjoint(g[None], scfg))
    for k, idx in [("W0", (3, 2)), ("W1", (1, 4)), ("b2", (5,))]:
        old = theta[k][idx]
        theta[k][idx] = old + 1e-6
        lp = run(t2)[0]
        theta[k][idx] = old - 1e-6
        lm = run(t2)[0]
        theta[k][idx] = old
        fd = (lp - lm) / 2e-6
        assert fd == pytest.approx(grads[k][idx], rel=1e-4, abs=1e-9)


def test_enhance_contract(small_dataset, stage1_ckpt, tmp_path):
    for n in (1, 777, 16000):
        y = Waveform(np.random.default_rng(n).standard_normal(n))
        assert len(enhance(stage1_ckpt, y)) == n
    assert not np.any(enhance(stage1_ckpt, Waveform(np.zeros(500))).samples)
    with pytest.raises(InputError):
        enhance(stage1_ckpt, Waveform(np.ones(100), 8000))
    with pytest.raises(ConfigurationError):
        enhance(stage1_ckpt, Waveform(np.ones(100)), which="teacher")
    s2 = train_stage2(small_dataset, _s2(steps=2, alpha=0.9), stage1_ckpt, tmp_path, rooms=FixedRooms())
    y = Waveform(np.random.default_rng(0).standard_normal(4000))
    assert not np.array_equal(enhance(s2, y, "student").samples, enhance(s2, y, "teacher").samples)

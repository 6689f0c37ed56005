import numpy as np
import pytest
from scipy.io import wavfile

from unsup_dereverb.data import (Manifest, ManifestRow, MixtureSpec, WavFormatError, build_dataset,
                                 generate_source, generate_toy_sources, measured_snr, read_manifest,
                                 read_wav, silence_fraction, synthesize_mixture, write_manifest,
                                 write_wav)
from unsup_dereverb.metrics import si_sdr_metric
from unsup_dereverb.rir import RoomSpec, sample_room, simulate_room
from unsup_dereverb.signal import ConfigurationError, InputError, Waveform, convolve_trunc_first


def test_sources_are_deterministic():
    a = generate_toy_sources(2, 1.0, np.random.default_rng(4))
    b = generate_toy_sources(2, 1.0, np.random.default_rng(4))
    assert all(x.samples.tobytes() == y.samples.tobytes() for x, y in zip(a, b))
    with pytest.raises(InputError):
        generate_toy_sources(0, 1.0, np.random.default_rng(0))


def test_source_properties():
    rng = np.random.default_rng(0)
    low = high = 0.0
    for _ in range(10):
        x = generate_source(4.0, rng)
        assert np.max(np.abs(x.samples)) == pytest.approx(0.5)
        assert 0.15 <= silence_fraction(x) <= 0.5
        spec = np.abs(np.fft.rfft(x.samples)) ** 2
        f = np.fft.rfftfreq(len(x), 1 / 16000)
        low += spec[f < 1000].sum()
        high += spec[f > 4000].sum()
    assert low > high


def _spec(snr=25.0, absorption=None, seed=0):
    room = RoomSpec(6, 7, 3, (2.0, 3.0, 1.5), (3.1, 3.6, 1.2), 0.5, absorption=absorption)
    return MixtureSpec(snr, room, seed)


def test_snr_is_exact():
    x = generate_source(1.0, np.random.default_rng(1))
    y, ref, meta = synthesize_mixture(x, _spec(25.0))
    assert measured_snr(meta["reverberant"], meta["noise"]) == pytest.approx(25.0, abs=1e-6)
    assert np.max(np.abs(y.samples)) == pytest.approx(0.9)


def test_snr_range_enforced():
    with pytest.raises(ConfigurationError):
        _spec(30.0)
    with pytest.raises(ConfigurationError):
        _spec(float("inf"))


def test_mixture_decomposes():
    x = generate_source(1.0, np.random.default_rng(2))
    spec = _spec(10.0)
    y, ref, meta = synthesize_mixture(x, spec)
    h_sim, h_dir = simulate_room(spec.room)
    scale = meta["scale"]
    direct = convolve_trunc_first(x.samples, h_sim.samples)
    np.testing.assert_allclose(y.samples / scale - meta["noise"] / scale, direct, atol=1e-12)
    np.testing.assert_allclose(ref.samples / scale, convolve_trunc_first(x.samples, h_dir.samples), atol=1e-12)
    assert si_sdr_metric(y, ref) < si_sdr_metric(ref, ref)


def test_anechoic_mixture_is_reference_plus_noise():
    x = generate_source(1.0, np.random.default_rng(3))
    y, ref, meta = synthesize_mixture(x, _spec(15.0, absorption=1.0))
    np.testing.assert_allclose(y.samples, ref.samples + meta["noise"], atol=1e-9)


def test_silent_source_rejected():
    with pytest.raises(InputError):
        synthesize_mixture(Waveform(np.zeros(1000)), _spec())


def test_wav_round_trips(tmp_path, rng):
    w = Waveform(rng.uniform(-0.9, 0.9, 3000).astype(np.float32).astype(np.float64))
    write_wav(tmp_path / "f.wav", w)
    assert read_wav(tmp_path / "f.wav").samples.tobytes() == w.samples.tobytes()
    write_wav(tmp_path / "i.wav", w, pcm16=True)
    assert np.max(np.abs(read_wav(tmp_path / "i.wav").samples - w.samples)) <= 2 ** -15


def test_multichannel_takes_first_channel(tmp_path, rng, caplog):
    data = rng.uniform(-0.5, 0.5, (500, 8)).astype(np.float32)
    wavfile.write(tmp_path / "m.wav", 16000, data)
    with caplog.at_level("INFO"):
        w = read_wav(tmp_path / "m.wav")
    np.testing.assert_array_equal(w.samples, data[:, 0])
    assert "8 channels" in caplog.text


def test_bad_wav_files(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"RIFF....WAVEjunk")
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "junk.wav")
    wavfile.write(tmp_path / "i32.wav", 16000, np.zeros(10, dtype=np.int32))
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "i32.wav")


def test_manifest_round_trip(tmp_path):
    rows = [ManifestRow("a", "mix/a.wav", "ref/a.wav", 12.5, 0.4, "train"),
            ManifestRow("b", "mix/b.wav", None, None, None, "test")]
    write_manifest(tmp_path / "m.jsonl", Manifest(rows, tmp_path))
    back = read_manifest(tmp_path / "m.jsonl")
    assert back.rows == rows and back.root == tmp_path
    assert back.resolve("mix/a.wav") == tmp_path / "mix" / "a.wav"
    with pytest.raises(ConfigurationError):
        Manifest(rows + rows)


def test_build_dataset(tmp_path):
    m = build_dataset(tmp_path / "a", {"train": 3, "val": 1, "test": 2}, seed=7, dur_s=1.0)
    assert len(m) == 6 and len({r.utt_id for r in m.rows}) == 6
    for r in m.rows:
        assert 5.0 - 1e-6 <= r.input_snr_db <= 25.0 + 1e-6
        assert (tmp_path / "a" / r.split / "mix" / f"{r.utt_id}.wav").exists()
    m2 = build_dataset(tmp_path / "b", {"train": 3, "val": 1, "test": 2}, seed=7, dur_s=1.0)
    for r1, r2 in zip(m.rows, m2.rows):
        assert (m.resolve(r1.mixture_path).read_bytes() == m2.resolve(r2.mixture_path).read_bytes())
        assert (m.resolve(r1.reference_path).read_bytes() == m2.resolve(r2.reference_path).read_bytes())
    assert read_manifest(tmp_path / "a" / "manifest.jsonl").rows == m.rows

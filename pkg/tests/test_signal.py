import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unsup_dereverb.signal import (ConfigurationError, InputError, StftConfig, Waveform,
                                   convolve_trunc_first, istft, istft_adjoint, istft_array,
                                   signal_std, sqrt_hann, stft, stft_adjoint, stft_array)

CFG = StftConfig()


def test_sqrt_hann_closed_form():
    np.testing.assert_allclose(sqrt_hann(4), [0.0, np.sqrt(0.5), 1.0, np.sqrt(0.5)], atol=1e-15)
    w = sqrt_hann(512)
    assert np.argmax(w) == 256 and w[256] == 1.0


def test_squared_window_overlap_is_constant():
    w2 = sqrt_hann(512) ** 2
    acc = np.zeros(512 * 4)
    for s in range(0, acc.size - 512 + 1, 128):
        acc[s:s + 512] += w2
    interior = acc[512:-512]
    np.testing.assert_allclose(interior, CFG.ola_gain, rtol=1e-12)
    assert CFG.ola_gain == pytest.approx(2.0)


def test_bad_stft_config():
    with pytest.raises(ConfigurationError):
        StftConfig(win_len=512, hop_len=100)
    with pytest.raises(ConfigurationError):
        StftConfig(win_len=512, hop_len=128, fft_len=256)


def test_waveform_rejects_nan():
    with pytest.raises(InputError):
        Waveform(np.array([0.0, np.nan]))


def test_zero_waveform_gives_zero_spectrogram():
    s = stft(Waveform(np.zeros(16000)))
    assert s.shape == (CFG.n_frames(16000), 257)
    assert not np.any(s.frames)
    assert not np.any(istft(s).samples)


def test_bin_centred_tone_peaks_in_its_bin(rng):
    k = 37
    n = np.arange(16000)
    S = stft_array(np.cos(2 * np.pi * k * n / 512), CFG)
    interior = S[4:-4]
    assert np.all(np.argmax(np.abs(interior), axis=1) == k)


def test_linearity(rng):
    x, y = rng.standard_normal((2, 5000))
    np.testing.assert_allclose(stft_array(x + y, CFG), stft_array(x, CFG) + stft_array(y, CFG), atol=1e-12)
    S1, S2 = stft_array(x, CFG), stft_array(y, CFG)
    np.testing.assert_allclose(istft_array(S1 + S2, CFG, 5000),
                               istft_array(S1, CFG, 5000) + istft_array(S2, CFG, 5000), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(min_value=1, max_value=6000), seed=st.integers(0, 2**31))
def test_round_trip_any_length(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    y = istft_array(stft_array(x, CFG), CFG, n)
    assert np.linalg.norm(y - x) <= 1e-10 * np.linalg.norm(x)


def test_parseval_consistency(rng):
    x = rng.standard_normal(8000)
    S = stft_array(x, CFG)
    weights = np.full(257, 2.0)
    weights[[0, -1]] = 1.0
    spec_energy = np.sum(weights * np.abs(S) ** 2) / CFG.fft_len
    assert spec_energy == pytest.approx(CFG.ola_gain * np.sum(x ** 2), rel=1e-6)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(min_value=200, max_value=3000), seed=st.integers(0, 2**31))
def test_adjoint_identities(n, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal(n)
    G = r.standard_normal((CFG.n_frames(n), 257)) + 1j * r.standard_normal((CFG.n_frames(n), 257))
    # <stft(x), G> in the real inner product on (Re, Im) equals <x, stft_adjoint(G)>
    lhs = np.sum(stft_array(x, CFG).real * G.real + stft_array(x, CFG).imag * G.imag)
    assert lhs == pytest.approx(x @ stft_adjoint(G, CFG, n), rel=1e-9)
    # an irfft-consistent spectrogram (no imaginary DC/Nyquist)
    S = G.copy()
    S[:, 0] = S[:, 0].real
    S[:, -1] = S[:, -1].real
    g = r.standard_normal(n)
    Ga = istft_adjoint(g, CFG)
    lhs = g @ istft_array(S, CFG, n)
    assert lhs == pytest.approx(np.sum(Ga.real * S.real + Ga.imag * S.imag), rel=1e-9)


def test_istft_length_contract():
    s = stft(Waveform(np.ones(1000)))
    assert len(istft(s, 700)) == 700
    with pytest.raises(InputError):
        istft(s, 1001)


def test_convolve_identity_and_delay(rng):
    x = rng.standard_normal(1000)
    np.testing.assert_allclose(convolve_trunc_first(x, np.array([1.0])), x, atol=1e-12)
    np.testing.assert_array_equal(convolve_trunc_first(np.array([1.0, 0, 0, 0]), np.array([0.0, 1.0])),
                                  [0, 1, 0, 0])


def _naive(x, h):
    y = np.zeros(len(x))
    for n in range(len(x)):
        for k in range(min(len(h), n + 1)):
            y[n] += h[k] * x[n - k]
    return y


def test_convolve_matches_naive_sum(rng):
    x = rng.standard_normal(2000)
    h = rng.standard_normal(64)
    np.testing.assert_allclose(convolve_trunc_first(x, h), _naive(x, h), rtol=1e-9, atol=1e-12)
    # FFT path (> 128 taps) against the direct path
    h_long = rng.standard_normal(300)
    ref = np.convolve(x, h_long)[:2000]
    assert np.linalg.norm(convolve_trunc_first(x, h_long) - ref) < 1e-9 * np.linalg.norm(ref)


def test_convolve_keeps_waveform_type_and_checks_rates():
    a = Waveform(np.ones(10), 16000)
    assert isinstance(convolve_trunc_first(a, np.array([0.5])), Waveform)
    with pytest.raises(ConfigurationError):
        convolve_trunc_first(a, Waveform(np.ones(3), 8000))


def test_signal_std(rng):
    assert signal_std(np.full(100, 3.0)) == 0.0
    assert signal_std(np.tile([1.0, -1.0], 50)) == 1.0
    assert signal_std(rng.normal(0, 0.5, 1_000_000)) == pytest.approx(0.5, rel=0.01)

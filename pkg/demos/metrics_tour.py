"""Build one toy mixture and look at what the metrics say about it.

The mixture is reverberant speech-like signal plus low-pass noise; the
reference is the direct path. An oracle magnitude mask (which needs the
reference, so it is only a ceiling) shows how much a masking network could
gain on this utterance.

Run:  python3 demos/metrics_tour.py
"""
import numpy as np

from unsup_dereverb.data import MixtureSpec, generate_source, synthesize_mixture
from unsup_dereverb.metrics import estoi, si_sdr_metric
from unsup_dereverb.rir import sample_room
from unsup_dereverb.signal import StftConfig, istft_array, stft_array

rng = np.random.default_rng(4)
x = generate_source(4.0, rng)
room = sample_room(rng, t60_range=(0.9, 0.9))
y, ref, meta = synthesize_mixture(x, MixtureSpec(snr_db=15.0, room=room), rng)

cfg = StftConfig()
Y, R = stft_array(y.samples, cfg), stft_array(ref.samples, cfg)
irm = np.minimum(np.abs(R) / np.maximum(np.abs(Y), 1e-12), 1.0)
oracle = istft_array(irm * Y, cfg, len(y.samples))

print(f"room T60 {room.t60_s:.2f} s, distance {room.distance:.2f} m, input SNR 15 dB")
for name, est in [("reference", ref.samples), ("mixture", y.samples), ("oracle mask", oracle)]:
    print(f"  {name:12s} SI-SDR {si_sdr_metric(est, ref.samples):7.2f} dB   "
          f"eSTOI {estoi(est, ref.samples):.3f}")

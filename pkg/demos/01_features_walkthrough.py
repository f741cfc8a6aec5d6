"""Walk one synthetic clip through the feature front end.

Shows the 98x64 contract: 25 ms windows every 10 ms over one second of
16 kHz audio give 98 frames, and 64 mel filters spanning 20 Hz - 8 kHz
give the 64 columns.
"""
import tempfile
from pathlib import Path

import numpy as np

from cosmix import FBankSpec, log_fbank, mel_filterbank, stft_power
from cosmix.dataset import synth_waveform
from cosmix.features import filter_centers_hz, read_fbank, write_fbank

rng = np.random.default_rng(0)
wave = synth_waveform(label=4, noise_level=0.05, rng=rng)  # the word slot for "yes"
print(f"waveform: {wave.size} samples, peak {np.abs(wave).max():.3f}")

spec = FBankSpec()
power = stft_power(wave, spec)
print(f"power spectrogram: {power.shape}  (frames x FFT bins)")

# class 4 tones sit at 1500 and 2250 Hz; check the hottest bins agree
hot_bins = np.argsort(power.sum(axis=0))[-4:]
hot_hz = hot_bins * spec.sample_rate / spec.n_fft
print(f"hottest FFT bins at: {sorted(hot_hz.astype(int))} Hz")

fbank = mel_filterbank(spec)
centers = filter_centers_hz(spec)
print(f"mel filters: {fbank.shape}, centers {centers[0]:.0f} Hz .. {centers[-1]:.0f} Hz")

feat = log_fbank(wave, spec)
print(f"log-mel features: {feat.values.shape}, "
      f"range [{feat.values.min():.1f}, {feat.values.max():.1f}]")

# round-trip the binary dump format
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "clip.fbank"
    write_fbank(path, feat)
    back = read_fbank(path)
    print(f"dump round-trip max abs error: {np.abs(back - feat.values).max():.2e} "
          f"(float32 storage)")

"""Log-Mel filterbank front end for one-second 16 kHz clips.

25 ms periodic-Hann windows every 10 ms, 512-point FFT, 64 triangular
mel filters between 20 Hz and 8 kHz, natural-log compression with a
1e-10 floor. Every one-second waveform maps to a 98 x 64 matrix.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

FRAME_COUNT = 98
N_MELS = 64


@dataclass(frozen=True)
class FBankSpec:
    """Front-end geometry; defaults pin the 98 x 64 output contract."""

    sample_rate: int = 16000
    win_length: int = 400
    hop_length: int = 160
    n_fft: int = 512
    n_mels: int = N_MELS
    f_min: float = 20.0
    f_max: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.win_length > self.n_fft:
            raise ValueError(f"win_length {self.win_length} exceeds n_fft {self.n_fft}")
        if self.hop_length > self.win_length:
            raise ValueError(f"hop_length {self.hop_length} exceeds win_length {self.win_length}")
        if not (0 <= self.f_min < self.f_max <= self.sample_rate / 2):
            raise ValueError(f"degenerate mel band [{self.f_min}, {self.f_max}]")
        if self.n_mels != N_MELS:
            raise ValueError(f"n_mels must be {N_MELS}, got {self.n_mels}")
        if self.frame_count(self.sample_rate) != FRAME_COUNT:
            raise ValueError("win/hop must yield 98 frames for a one-second clip")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def frame_count(self, n_samples):
        return 1 + (n_samples - self.win_length) // self.hop_length

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1


@dataclass(frozen=True)
class FeatureMatrix:
    """98 x 64 log-mel energies plus the clip they came from."""

    values: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        if self.values.shape != (FRAME_COUNT, N_MELS):
            raise ValueError(f"feature matrix must be (98, 64), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite values")


def hann_periodic(n):
    """Periodic Hann window of length n."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_power(wave, spec=FBankSpec()):
    """Power spectrogram [frames, n_fft/2 + 1] of a one-second waveform."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.shape != (spec.sample_rate,):
        raise ValueError(f"expected {spec.sample_rate} samples, got shape {wave.shape}")
    n_frames = spec.frame_count(wave.size)
    idx = np.arange(spec.win_length)[None, :] + spec.hop_length * np.arange(n_frames)[:, None]
    frames = wave[idx] * hann_periodic(spec.win_length)[None, :]
    spectrum = np.fft.rfft(frames, n=spec.n_fft, axis=1)
    return np.abs(spectrum) ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(spec=FBankSpec()):
    """Triangular filters [n_mels, n_fft/2 + 1], centers even on the mel scale."""
    if spec.f_min >= spec.f_max:
        raise ValueError(f"degenerate mel band [{spec.f_min}, {spec.f_max}]")
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(spec.f_min), hz_to_mel(spec.f_max),
                                     spec.n_mels + 2))
    bin_hz = np.arange(spec.n_bins) * spec.sample_rate / spec.n_fft
    lower, center, upper = edges_hz[:-2], edges_hz[1:-1], edges_hz[2:]
    up = (bin_hz[None, :] - lower[:, None]) / (center - lower)[:, None]
    down = (upper[:, None] - bin_hz[None, :]) / (upper - center)[:, None]
    fbank = np.maximum(0.0, np.minimum(up, down))
    return fbank


def filter_centers_hz(spec=FBankSpec()):
    """Center frequency of each triangular filter, in Hz."""
    edges = mel_to_hz(np.linspace(hz_to_mel(spec.f_min), hz_to_mel(spec.f_max),
                                  spec.n_mels + 2))
    return edges[1:-1]


def log_fbank(wave, spec=FBankSpec(), provenance=""):
    """Log-mel features of a one-second waveform -> FeatureMatrix (98 x 64)."""
    power = stft_power(wave, spec)
    energies = power @ mel_filterbank(spec).T
    values = np.log(np.maximum(energies, spec.log_floor))
    return FeatureMatrix(values=values, provenance=provenance)


class _FBankCache:
    """The filter matrix depends only on the spec; compute it once."""

    def __init__(self):
        self._key = None
        self._fbank = None

    def get(self, spec):
        if self._key != spec:
            self._fbank = mel_filterbank(spec)
            self._key = spec
        return self._fbank


_cache = _FBankCache()


def log_fbank_cached(wave, spec=FBankSpec(), provenance=""):
    """log_fbank with the filter matrix memoized across calls."""
    power = stft_power(wave, spec)
    energies = power @ _cache.get(spec).T
    values = np.log(np.maximum(energies, spec.log_floor))
    return FeatureMatrix(values=values, provenance=provenance)


def log_fbank_batch(waves, spec=FBankSpec(), dtype=np.float64):
    """Log-mel features for a whole [N, 16000] stack at once -> [N, 98, 64].

    Same numbers as ``log_fbank`` row by row (to float rounding when
    ``dtype`` is float32, which training uses); one FFT call for all
    frames and one GEMM for the filterbank.
    """
    waves = np.asarray(waves, dtype=dtype)
    if waves.ndim != 2 or waves.shape[1] != spec.sample_rate:
        raise ValueError(f"expected [N, {spec.sample_rate}], got {waves.shape}")
    n_frames = spec.frame_count(waves.shape[1])
    idx = np.arange(spec.win_length)[None, :] + spec.hop_length * np.arange(n_frames)[:, None]
    frames = waves[:, idx] * hann_periodic(spec.win_length)[None, None, :].astype(dtype)
    power = np.abs(np.fft.rfft(frames, n=spec.n_fft, axis=2)) ** 2
    # flatten the stack so the filter application is a single GEMM
    energies = power.reshape(-1, spec.n_bins) @ _cache.get(spec).T.astype(dtype)
    energies = energies.reshape(waves.shape[0], n_frames, spec.n_mels)
    return np.log(np.maximum(energies, np.asarray(spec.log_floor, dtype=dtype)))


# ---------------------------------------------------------------------------
# binary dump: magic "FBNK", u32 rows, u32 cols, u32 reserved, f32 row-major

FBANK_MAGIC = b"FBNK"


def write_fbank(path, feat):
    values = feat.values if isinstance(feat, FeatureMatrix) else np.asarray(feat)
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(FBANK_MAGIC)
        fh.write(struct.pack("<III", rows, cols, 0))
        fh.write(values.astype("<f4").tobytes(order="C"))


def read_fbank(path):
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != FBANK_MAGIC:
            raise FormatError(f"{path}: not a feature dump")
        rows, cols, _ = struct.unpack("<III", header[4:])
        data = fh.read()
    expected = rows * cols * 4
    if len(data) != expected:
        raise FormatError(f"{path}: payload {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4").reshape(rows, cols).astype(np.float64)

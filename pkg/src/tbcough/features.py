"""Acoustic front end: resampling, speed perturbation, filterbanks, features."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft
from scipy.io import wavfile
from scipy.signal import firwin, get_window, resample_poly

DEFAULT_RATE = 44100


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureSpec:
    family: str = "mel"
    n_bins: int = 80
    frame_len: int = 2048
    hop: int = 512
    sample_rate: int = DEFAULT_RATE
    log_floor: float = 1e-10
    deltas: bool = True
    cmvn: bool = True
    # mel filters feeding the DCT when family == "mfcc"
    mfcc_mels: int = 40

    def __post_init__(self):
        if self.family not in ("mel", "linear", "mfcc"):
            raise ValueError(f"unknown feature family {self.family!r}")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.frame_len < 1 or self.frame_len & (self.frame_len - 1):
            raise ValueError("frame_len must be a power of two")
        if not 1 <= self.hop <= self.frame_len:
            raise ValueError("hop must be in [1, frame_len]")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def width(self) -> int:
        if self.family == "mfcc" and self.deltas:
            return 3 * self.n_bins
        return self.n_bins

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    bin_centers: np.ndarray
    spec: FeatureSpec = field(default_factory=FeatureSpec)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def restrict(self, bins) -> "FeatureMatrix":
        """Keep only the given bin columns, in the given order."""
        bins = np.asarray(list(bins), dtype=int)
        centers = self.bin_centers[bins] if len(self.bin_centers) else self.bin_centers
        return FeatureMatrix(self.values[:, bins], centers, self.spec)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if len(self.bin_centers):
            w.writerow([f"{c:.3f}" for c in self.bin_centers])
        else:
            w.writerow([f"c{i}" for i in range(self.n_bins)])
        for row in self.values:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def n_frames_for(n_samples: int, frame_len: int, hop: int) -> int:
    return 1 + (n_samples - frame_len) // hop


# -- audio I/O ---------------------------------------------------------------

def read_wav(path) -> AudioClip:
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise AudioError(f"cannot read {path}: {exc}") from exc
    data = np.asarray(data)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype.kind == "f":
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported sample format {data.dtype} in {path}")
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip, float32: bool = False) -> None:
    if float32:
        data = clip.samples.astype(np.float32)
    else:
        data = np.round(np.clip(clip.samples, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    wavfile.write(Path(path), clip.sample_rate, data)


# -- resampling ----------------------------------------------------------------

def _poly_resample(x: np.ndarray, ratio: Fraction) -> np.ndarray:
    """Kaiser-windowed sinc polyphase FIR.

    Each polyphase branch is rescaled to exactly unit DC gain so a constant
    input stays constant (the raw window leaves ~1e-4 ripple between phases).
    """
    up, down = ratio.numerator, ratio.denominator
    max_rate = max(up, down)
    h = firwin(20 * max_rate + 1, 1.0 / max_rate, window=("kaiser", 5.0))
    for p in range(up):
        h[p::up] /= h[p::up].sum() * up
    return resample_poly(x, up, down, window=h)


def resample(clip: AudioClip, target_rate: int = DEFAULT_RATE) -> AudioClip:
    if len(clip.samples) == 0:
        raise AudioError("cannot resample an empty clip")
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if clip.sample_rate == target_rate:
        return clip
    ratio = Fraction(int(target_rate), int(clip.sample_rate))
    return AudioClip(_poly_resample(clip.samples, ratio), int(target_rate))


def speed_perturb(clip: AudioClip, factor: float) -> AudioClip:
    """Play the clip ``factor`` times faster (tempo and pitch move together)."""
    if factor <= 0:
        raise ValueError("speed factor must be positive")
    if factor == 1.0:
        return clip
    if len(clip.samples) == 0:
        raise AudioError("cannot perturb an empty clip")
    ratio = Fraction(1 / factor).limit_denominator(1000)
    return AudioClip(_poly_resample(clip.samples, ratio), clip.sample_rate)


# -- filterbanks ---------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _triangular(edges_hz: np.ndarray, n_fft: int, sample_rate: int) -> np.ndarray:
    n_filters = len(edges_hz) - 2
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    up = (freqs - lower) / (center - lower)
    down = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    # filters narrower than one FFT bin would be empty; give them their nearest bin
    for k in np.flatnonzero(fb.sum(axis=1) == 0):
        fb[k, int(np.argmin(np.abs(freqs - edges_hz[k + 1])))] = 1.0
    assert fb.shape == (n_filters, n_fft // 2 + 1)
    return fb


def mel_edges(n_mels: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """The n_mels + 2 filter edge frequencies (Hz), equally spaced in HTK mel."""
    fmax = sample_rate / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filters spanning 0 Hz to Nyquist, (n_mels, n_fft//2 + 1)."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if n_mels > n_fft // 2 + 1:
        raise ValueError(f"n_mels={n_mels} exceeds the {n_fft // 2 + 1} FFT bins")
    return _triangular(mel_edges(n_mels, sample_rate), n_fft, sample_rate)


def linear_edges(n_bands: int, sample_rate: int) -> np.ndarray:
    return np.linspace(0.0, sample_rate / 2, n_bands + 2)


def linear_filterbank(n_bands: int, n_fft: int, sample_rate: int) -> np.ndarray:
    if n_bands < 1:
        raise ValueError("n_bands must be >= 1")
    if n_bands > n_fft // 2 + 1:
        raise ValueError(f"n_bands={n_bands} exceeds the {n_fft // 2 + 1} FFT bins")
    return _triangular(linear_edges(n_bands, sample_rate), n_fft, sample_rate)


def bin_centers(spec: FeatureSpec) -> np.ndarray:
    if spec.family == "mel":
        return mel_edges(spec.n_bins, spec.sample_rate)[1:-1]
    if spec.family == "linear":
        return linear_edges(spec.n_bins, spec.sample_rate)[1:-1]
    return np.zeros(0)


# -- feature extraction --------------------------------------------------------

def power_spectrogram(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    n = n_frames_for(len(samples), frame_len, hop)
    frames = np.lib.stride_tricks.sliding_window_view(samples, frame_len)[::hop][:n]
    windowed = frames * get_window("hann", frame_len)
    return np.abs(rfft(windowed, axis=1)) ** 2


def deltas(x: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-width frames with edge replication."""
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    n = len(x)
    num = sum(k * (padded[width + k:width + k + n] - padded[width - k:width - k + n])
              for k in range(1, width + 1))
    return num / (2 * sum(k * k for k in range(1, width + 1)))


def cmvn(x: np.ndarray) -> np.ndarray:
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return (x - x.mean(axis=0)) / std


def extract_features(clip: AudioClip, spec: FeatureSpec = FeatureSpec()) -> FeatureMatrix:
    clip = resample(clip, spec.sample_rate)
    if len(clip.samples) < spec.frame_len:
        raise AudioError(
            f"clip has {len(clip.samples)} samples; at least {spec.frame_len} are required")
    power = power_spectrogram(clip.samples, spec.frame_len, spec.hop)
    if spec.family == "mel":
        fb = mel_filterbank(spec.n_bins, spec.frame_len, spec.sample_rate)
    elif spec.family == "linear":
        fb = linear_filterbank(spec.n_bins, spec.frame_len, spec.sample_rate)
    else:
        if spec.n_bins > spec.mfcc_mels:
            raise ValueError("mfcc n_bins cannot exceed mfcc_mels")
        fb = mel_filterbank(spec.mfcc_mels, spec.frame_len, spec.sample_rate)
    energies = power @ fb.T
    logged = np.log(energies + spec.log_floor)
    if spec.family != "mfcc":
        return FeatureMatrix(logged, bin_centers(spec), spec)
    ceps = dct(logged, type=2, norm="ortho", axis=1)[:, :spec.n_bins]
    if spec.deltas:
        d1 = deltas(ceps)
        ceps = np.hstack([ceps, d1, deltas(d1)])
    if spec.cmvn:
        ceps = cmvn(ceps)
    return FeatureMatrix(ceps, np.zeros(0), spec)

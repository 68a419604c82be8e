"""
Log-mel features from mono audio.

STFT: 4096-sample periodic Hamming window, hop 2048, frames taken from
complete windows only (no padding), magnitude spectrum. Mel: 128 triangular
filters on the Slaney mel scale (area normalized) from 0 Hz to Nyquist,
applied to the squared magnitudes, followed by ``log(x + 1e-10)``.
"""
from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

SAMPLE_RATE = 22050
N_FFT = 4096
HOP = 2048
N_MELS = 128
LOG_EPS = 1e-10
SEGMENT_SECONDS = 30
CACHE_ENV = "HITRANK_CACHE"


class ClipTooShort(ValueError):
    """The clip is shorter than the window or segment it is asked to supply."""


class SampleRateMismatch(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def n_frames(n_samples: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    return (n_samples - n_fft) // hop + 1


def stft_magnitude(clip: AudioClip, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """``|STFT|`` as a (frames, n_fft // 2 + 1) array."""
    x = clip.samples
    if len(x) < n_fft:
        raise ClipTooShort(f"clip has {len(x)} samples, fewer than one {n_fft}-sample window")
    frames = sliding_window_view(x, n_fft)[::hop]
    window = get_window("hamming", n_fft, fftbins=True)
    return np.abs(np.fft.rfft(frames * window, axis=1))


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz,
                    min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
                    f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) triangular filters, each scaled to unit area in Hz."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (centre - lower)
    falling = (upper - fft_freqs) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return fb


_FB_CACHE: Dict[tuple, np.ndarray] = {}


def mel_project(mag: np.ndarray, sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS,
                fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """Log-mel matrix (n_mels, frames) from a (frames, bins) magnitude spectrogram."""
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim != 2:
        raise ValueError("magnitude spectrogram must be 2-D (frames, bins)")
    n_fft = 2 * (mag.shape[1] - 1)
    key = (sample_rate, n_fft, n_mels, fmin, fmax)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax)
    power = _FB_CACHE[key] @ (mag ** 2).T
    return np.log(power + LOG_EPS)


def log_mel(clip: AudioClip) -> np.ndarray:
    return mel_project(stft_magnitude(clip), clip.sample_rate)


# ----------------------------------------------------------------- segments


Selector = Callable[[AudioClip, int], int]
_SELECTORS: Dict[str, Selector] = {}


def register_selector(name: str, fn: Selector) -> None:
    """Register ``fn(clip, n_samples) -> start index`` for the highlight strategy."""
    _SELECTORS[name] = fn


def max_energy_start(clip: AudioClip, length: int) -> int:
    """Start of the ``length``-sample window with the largest RMS (earliest on ties).

    A simple loudness heuristic standing in for a learned highlight extractor.
    """
    sq = np.concatenate([[0.0], np.cumsum(clip.samples ** 2)])
    energy = sq[length:] - sq[:-length]
    return int(np.argmax(energy))


register_selector("energy", max_energy_start)


def select_segment(clip: AudioClip, strategy: str = "mid30", selector: str = "energy",
                   seconds: int = SEGMENT_SECONDS) -> AudioClip:
    """Cut exactly ``seconds`` of audio: centred (``mid30``) or by a highlight selector."""
    length = seconds * clip.sample_rate
    if len(clip.samples) < length:
        raise ClipTooShort(f"clip lasts {clip.duration:.2f} s, needs at least {seconds} s")
    if strategy == "mid30":
        start = (len(clip.samples) - length) // 2
    elif strategy == "highlight":
        if selector not in _SELECTORS:
            raise KeyError(f"no segment selector registered as {selector!r}")
        start = _SELECTORS[selector](clip, length)
    else:
        raise ValueError(f"unknown segment strategy {strategy!r}")
    return AudioClip(clip.samples[start:start + length].copy(), clip.sample_rate)


def extract(clip: AudioClip, strategy: str = "mid30") -> np.ndarray:
    """128 x 321 log-mel matrix of the selected 30 s segment."""
    return log_mel(select_segment(clip, strategy))


# -------------------------------------------------------------------- I/O


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> AudioClip:
    """16-bit PCM mono WAV scaled to [-1, 1); other formats and rates are rejected."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        rate = w.getframerate()
        if expected_rate is not None and rate != expected_rate:
            raise SampleRateMismatch(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
        raw = w.readframes(w.getnframes())
    return AudioClip(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


# cache file: b"HRMF" | u16 version | u16 id_len, id | u16 tag_len, tag | u32 rows, u32 cols | f64 LE

def cache_dir(default: Optional[str] = None) -> Path:
    return Path(os.environ.get(CACHE_ENV, default or ".hitrank-cache"))


def write_cached(path, song_id: str, strategy: str, mel: np.ndarray) -> None:
    mel = np.asarray(mel, dtype="<f8")
    sid, tag = song_id.encode("utf-8"), strategy.encode("utf-8")
    with open(path, "wb") as f:
        f.write(b"HRMF" + struct.pack("<HH", 1, len(sid)) + sid + struct.pack("<H", len(tag)) + tag)
        f.write(struct.pack("<II", *mel.shape))
        f.write(np.ascontiguousarray(mel).tobytes())


def read_cached(path):
    """Returns ``(song_id, strategy, matrix)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != b"HRMF":
        raise ValueError(f"{path}: not a feature cache file")
    version, nid = struct.unpack_from("<HH", buf, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported feature cache version {version}")
    pos = 8
    sid = buf[pos:pos + nid].decode("utf-8")
    pos += nid
    (ntag,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    tag = buf[pos:pos + ntag].decode("utf-8")
    pos += ntag
    rows, cols = struct.unpack_from("<II", buf, pos)
    pos += 8
    mel = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
    return sid, tag, mel

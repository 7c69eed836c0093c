"""MFCC front-end: framing, mel filterbank, DCT, energy VAD and sliding CMN.

Also holds the on-disk formats this stage owns: 16-bit mono WAV, the
``utterance_id speaker_id path`` manifest and the per-utterance feature cache.
"""
from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft

from .errors import FeatureError, FormatError, VadError

NUM_CEPS = 23


@dataclass
class UtteranceRecord:
    samples: np.ndarray
    sample_rate: int
    speaker_id: str
    utterance_id: str
    language: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise FeatureError(f"{self.utterance_id}: sample_rate must be positive")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise FeatureError(f"{self.utterance_id}: samples must be a non-empty 1-D array")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    utterance_id: str = ""
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class MfccConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    num_ceps: int = NUM_CEPS
    num_filters: int = NUM_CEPS
    low_freq: float = 20.0
    high_freq: float | None = None  # None -> Nyquist
    preemphasis: float = 0.97
    log_floor: float = 1e-10


@dataclass(frozen=True)
class FrontEndConfig:
    """MFCC + VAD + CMN settings applied by :func:`extract_features`."""

    mfcc: MfccConfig = field(default_factory=MfccConfig)
    vad_offset: float = -1.0
    cmn_window_s: float = 3.0


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_geometry(sample_rate: int, cfg: MfccConfig) -> tuple[int, int, int]:
    """(window, shift, n_fft) in samples."""
    win = int(round(cfg.frame_length_ms * sample_rate / 1000.0))
    shift = int(round(cfg.frame_shift_ms * sample_rate / 1000.0))
    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    return win, shift, n_fft


def num_frames(num_samples: int, window: int, shift: int) -> int:
    if num_samples < window:
        return 0
    return 1 + (num_samples - window) // shift


def mel_filterbank(sample_rate: int, n_fft: int, cfg: MfccConfig) -> np.ndarray:
    """Triangular filters, edges equally spaced in mel, shape ``[num_filters, n_fft//2 + 1]``."""
    high = cfg.high_freq if cfg.high_freq is not None else sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.low_freq), hz_to_mel(high), cfg.num_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    left, centre, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - left) / (centre - left)
    down = (right - freqs) / (right - centre)
    return np.clip(np.minimum(up, down), 0.0, None)


def compute_mfcc(u: UtteranceRecord, cfg: MfccConfig | None = None) -> FeatureMatrix:
    cfg = cfg or MfccConfig()
    win, shift, n_fft = frame_geometry(u.sample_rate, cfg)
    n = num_frames(u.samples.size, win, shift)
    if n == 0:
        raise FeatureError(
            f"{u.utterance_id}: {u.samples.size} samples is shorter than one "
            f"{cfg.frame_length_ms:g} ms frame ({win} samples)"
        )
    x = u.samples.copy()
    x[1:] -= cfg.preemphasis * u.samples[:-1]
    idx = np.arange(win)[None, :] + shift * np.arange(n)[:, None]
    frames = x[idx] * np.hamming(win)
    power = np.abs(rfft(frames, n=n_fft, axis=1)) ** 2
    fbank = power @ mel_filterbank(u.sample_rate, n_fft, cfg).T
    logfb = np.log(np.maximum(fbank, cfg.log_floor))
    ceps = dct(logfb, type=2, axis=1, norm="ortho")[:, : cfg.num_ceps]
    return FeatureMatrix(ceps, u.utterance_id, cfg.frame_shift_ms, cfg.frame_length_ms)


def energy_vad(f: FeatureMatrix, threshold_offset: float = -1.0) -> np.ndarray:
    """Keep frames whose C0 exceeds ``mean(C0) + threshold_offset``."""
    if f.num_frames < 1:
        raise VadError(f"{f.utterance_id}: no frames")
    c0 = f.frames[:, 0]
    mask = c0 > c0.mean() + threshold_offset
    if not mask.any():
        raise VadError(f"{f.utterance_id}: VAD removed every frame")
    return mask


def sliding_cmn(f: FeatureMatrix, window_s: float = 3.0) -> FeatureMatrix:
    """Subtract a per-frame running mean over a centred window.

    The window has a fixed length and is shifted, not shrunk, at the
    utterance edges; utterances shorter than the window get the global mean.
    """
    # offsetting by the first frame keeps constant columns exactly zero
    x = f.frames - f.frames[:1]
    t = x.shape[0]
    window = int(round(window_s * 1000.0 / f.frame_shift_ms))
    if t <= window:
        out = x - x.mean(axis=0)
    else:
        start = np.clip(np.arange(t) - window // 2, 0, t - window)
        csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
        out = x - (csum[start + window] - csum[start]) / window
    return FeatureMatrix(out, f.utterance_id, f.frame_shift_ms, f.frame_length_ms)


def extract_features(u: UtteranceRecord, cfg: FrontEndConfig | None = None) -> FeatureMatrix:
    """MFCC -> energy VAD -> sliding CMN over the voiced frames."""
    cfg = cfg or FrontEndConfig()
    raw = compute_mfcc(u, cfg.mfcc)
    mask = energy_vad(raw, cfg.vad_offset)
    voiced = FeatureMatrix(raw.frames[mask], raw.utterance_id, raw.frame_shift_ms, raw.frame_length_ms)
    return sliding_cmn(voiced, cfg.cmn_window_s)


# ---------------------------------------------------------------------------
# file formats

FEAT_MAGIC = b"TSVFEAT1"


def features_to_bytes(f: FeatureMatrix) -> bytes:
    arr = np.ascontiguousarray(f.frames, dtype="<f8")
    return FEAT_MAGIC + struct.pack("<II", *arr.shape) + arr.tobytes()


def features_from_bytes(blob: bytes, utterance_id: str = "") -> FeatureMatrix:
    if blob[:8] != FEAT_MAGIC or len(blob) < 16:
        raise FormatError(f"{utterance_id or 'feature file'}: bad feature cache header")
    rows, cols = struct.unpack_from("<II", blob, 8)
    if len(blob) != 16 + 8 * rows * cols:
        raise FormatError(f"{utterance_id or 'feature file'}: truncated feature cache")
    frames = np.frombuffer(blob, dtype="<f8", offset=16).reshape(rows, cols).astype(np.float64)
    return FeatureMatrix(frames, utterance_id)


def save_features(path: str | os.PathLike, f: FeatureMatrix) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(features_to_bytes(f))


def load_features(path: str | os.PathLike, utterance_id: str = "") -> FeatureMatrix:
    return features_from_bytes(Path(path).read_bytes(), utterance_id or Path(path).stem)


def write_wav(path: str | os.PathLike, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise FormatError(f"{path}: expected mono 16-bit PCM")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_manifest(path: str | os.PathLike, rows) -> None:
    """rows: iterable of (utterance_id, speaker_id, wav_path)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{u} {s} {p}\n" for u, s, p in rows))


def read_manifest(path: str | os.PathLike) -> list[tuple[str, str, str]]:
    rows = []
    seen = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'utterance_id speaker_id path'")
        if parts[0] in seen:
            raise FormatError(f"{path}:{lineno}: duplicate utterance {parts[0]}")
        seen.add(parts[0])
        rows.append((parts[0], parts[1], parts[2]))
    return rows


def load_utterance(utterance_id: str, speaker_id: str, wav_path: str | os.PathLike) -> UtteranceRecord:
    samples, rate = read_wav(wav_path)
    return UtteranceRecord(samples, rate, speaker_id, utterance_id)

"""Deterministic synthetic speaker corpus.

Each speaker is a small vocal-tract signature (formant frequencies and
bandwidths, a pitch, a spectral tilt). Utterances are strings of voiced
"syllables": a jittered pulse train shaped by the speaker's formants, moved
around by a vowel inventory shared by all speakers, with silent gaps, a random
channel tilt and white channel noise.
"""
from __future__ import annotations

import hashlib
import itertools
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import ContractError, CorpusError
from .features import UtteranceRecord, write_manifest, write_wav
from .trials import Trial

BASE_FORMANTS = np.array([550.0, 1500.0, 2450.0, 3300.0, 3750.0])
BASE_BANDWIDTHS = np.array([80.0, 110.0, 150.0, 200.0, 250.0])
# multiplicative formant moves per vowel (F1, F2, F3); shared across speakers
VOWELS = np.array([
    [1.35, 0.80, 1.00],
    [0.55, 1.45, 1.10],
    [0.60, 0.55, 0.95],
    [1.00, 1.00, 1.00],
    [0.80, 1.20, 1.05],
])


@dataclass
class SynthSpec:
    num_speakers: int = 10
    utts_per_speaker: int = 4
    duration_s: tuple[float, float] = (2.0, 4.0)
    speaker_separation: float = 1.0
    channel_noise_db: float = -30.0  # white-noise power relative to the clean utterance
    language_tags: tuple[str, ...] = ("tgl", "yue")
    seed: int = 0
    sample_rate: int = 8000
    id_prefix: str = "spk"

    def __post_init__(self):
        self.duration_s = tuple(float(d) for d in self.duration_s)
        self.language_tags = tuple(self.language_tags)
        if self.num_speakers < 2:
            raise ContractError("a corpus needs at least 2 speakers")
        if self.utts_per_speaker < 2:
            raise ContractError("each speaker needs at least 2 utterances")
        lo, hi = self.duration_s
        if not 1.0 <= lo <= hi <= 30.0:
            raise ContractError(f"duration range {self.duration_s} must lie within [1, 30] s")
        if self.speaker_separation < 0:
            raise ContractError("speaker_separation must be non-negative")
        if not self.language_tags:
            raise ContractError("need at least one language tag")


@dataclass
class SpeakerProfile:
    speaker_id: str
    formants: np.ndarray
    bandwidths: np.ndarray
    pitch_hz: float
    tilt: float
    language: str


@dataclass
class Corpus:
    records: list[UtteranceRecord]
    speakers: list[SpeakerProfile] = field(default_factory=list)

    @property
    def spk2lang(self) -> dict[str, str]:
        return {r.speaker_id: r.language for r in self.records}

    def manifest_rows(self, wav_dir: str = "wav") -> list[tuple[str, str, str]]:
        return [(r.utterance_id, r.speaker_id, f"{wav_dir}/{r.utterance_id}.wav") for r in self.records]


def _speaker(spec: SynthSpec, rng: np.random.Generator, index: int) -> SpeakerProfile:
    n_formants = int(rng.integers(3, 6))
    spread = spec.speaker_separation
    formants = BASE_FORMANTS[:n_formants] * np.exp(0.12 * spread * rng.standard_normal(n_formants))
    # formants must stay ordered and below Nyquist
    formants = np.minimum(np.sort(formants), 0.45 * spec.sample_rate)
    bandwidths = BASE_BANDWIDTHS[:n_formants] * np.exp(0.3 * spread * rng.standard_normal(n_formants))
    pitch = float(rng.uniform(80.0, 250.0))
    tilt = float(np.clip(0.5 + 0.2 * spread * rng.standard_normal(), 0.0, 0.95))
    lang = spec.language_tags[index * len(spec.language_tags) // spec.num_speakers]
    return SpeakerProfile(f"{spec.id_prefix}{index:04d}", formants, bandwidths, pitch, tilt, lang)


def _resonator(x: np.ndarray, freq: float, bw: float, sr: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / sr)
    theta = 2.0 * np.pi * freq / sr
    a = [1.0, -2.0 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def _syllable(p: SpeakerProfile, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    vowel = VOWELS[rng.integers(len(VOWELS))]
    f0 = p.pitch_hz * np.exp(0.06 * rng.standard_normal())
    # pulse train with per-period jitter
    src = np.zeros(n)
    t = rng.uniform(0, sr / f0)
    while t < n:
        src[int(t)] += 1.0
        t += sr / (f0 * np.exp(0.02 * rng.standard_normal()))
    src = lfilter([1.0], [1.0, -p.tilt], src)
    y = src
    for k, (f, bw) in enumerate(zip(p.formants, p.bandwidths)):
        move = vowel[k] if k < len(vowel) else 1.0
        jitter = np.exp(0.03 * rng.standard_normal())
        y = _resonator(y, min(f * move * jitter, 0.47 * sr), bw, sr)
    return y * np.hanning(n)


def _utterance(spec: SynthSpec, p: SpeakerProfile, rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    total = int(rng.uniform(*spec.duration_s) * sr)
    out = np.zeros(total)
    pos = int(rng.uniform(0.05, 0.2) * sr)
    while pos < total:
        n = int(rng.uniform(0.12, 0.35) * sr)
        seg = _syllable(p, n, sr, rng)[: total - pos]
        out[pos:pos + seg.size] += seg * np.exp(0.2 * rng.standard_normal())
        pos += n + int(rng.uniform(0.03, 0.2) * sr)
    # channel: random first-order tilt and gain
    out = lfilter([1.0, rng.uniform(-0.3, 0.3)], [1.0], out)
    out /= np.sqrt(np.mean(out ** 2)) + 1e-12
    noise = rng.standard_normal(total) * 10.0 ** (spec.channel_noise_db / 20.0)
    out = (out + noise) * (0.1 * np.exp(0.3 * rng.standard_normal()))
    # keep headroom for 16-bit storage
    return np.clip(out, -0.99, 0.99)


def generate_corpus(spec: SynthSpec) -> Corpus:
    """All utterances of all speakers, fully determined by ``spec.seed``."""
    root = np.random.SeedSequence(spec.seed)
    spk_seq, utt_seq = root.spawn(2)
    spk_rng = np.random.default_rng(spk_seq)
    speakers = [_speaker(spec, spk_rng, i) for i in range(spec.num_speakers)]
    records = []
    for p, seq in zip(speakers, utt_seq.spawn(spec.num_speakers)):
        rng = np.random.default_rng(seq)
        for j in range(spec.utts_per_speaker):
            audio = _utterance(spec, p, rng)
            records.append(UtteranceRecord(audio, spec.sample_rate, p.speaker_id, f"{p.speaker_id}-{j:03d}",
                                           p.language))
    return Corpus(records, speakers)


def quantize(records: Sequence[UtteranceRecord]) -> list[UtteranceRecord]:
    """Round audio to the 16-bit grid the WAV files store, so memory and disk agree exactly."""
    out = []
    for r in records:
        q = np.clip(np.round(r.samples * 32768.0), -32768, 32767) / 32768.0
        out.append(UtteranceRecord(q, r.sample_rate, r.speaker_id, r.utterance_id, r.language))
    return out


def _noise_like(kind: str, n: int, pool: Sequence[UtteranceRecord], rng: np.random.Generator) -> np.ndarray:
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "babble":
        # a few other talkers, each at a random offset
        talkers = rng.choice(len(pool), size=min(4, len(pool)), replace=False)
        noise = np.zeros(n)
        for t in talkers:
            s = pool[int(t)].samples
            reps = np.tile(s, n // s.size + 2)
            start = int(rng.integers(s.size))
            noise += reps[start:start + n]
        return noise
    raise ContractError(f"unknown noise kind {kind!r}; expected 'white' or 'babble'")


def add_noise_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    ps = float(np.mean(clean ** 2))
    pn = float(np.mean(noise ** 2))
    if pn == 0.0:
        return clean.copy()
    return clean + noise * np.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0)))


def augment(
    records: Sequence[UtteranceRecord],
    noise_db_range: tuple[float, float] = (5.0, 20.0),
    copies: int = 1,
    seed: int = 0,
    kind: str = "white",
) -> list[UtteranceRecord]:
    """Originals followed by ``copies`` noisy versions of each (SNR in dB drawn from the range)."""
    if copies < 0:
        raise ContractError("copies must be >= 0")
    out = list(records)
    rng = np.random.default_rng([seed, 7])
    for c in range(1, copies + 1):
        for r in records:
            snr = float(rng.uniform(*noise_db_range))
            noise = _noise_like(kind, r.samples.size, records, rng)
            noisy = add_noise_at_snr(r.samples, noise, snr)
            out.append(UtteranceRecord(noisy, r.sample_rate, r.speaker_id, f"{r.utterance_id}-aug{c}",
                                       r.language))
    return out


def make_trials(
    records: Sequence[UtteranceRecord],
    targets_per_speaker: int | None = None,
    nontarget_ratio: int = 10,
    seed: int = 0,
) -> list[Trial]:
    """Keyed trials, per language condition: target pairs within a speaker and
    ``nontarget_ratio`` times as many same-language cross-speaker pairs."""
    by_spk: dict[str, list[str]] = {}
    lang: dict[str, str] = {}
    for r in records:
        by_spk.setdefault(r.speaker_id, []).append(r.utterance_id)
        lang[r.speaker_id] = r.language or "all"
    rng = np.random.default_rng([seed, 11])
    trials: list[Trial] = []
    for cond in sorted(set(lang.values())):
        spks = sorted(s for s in by_spk if lang[s] == cond)
        targets = []
        for s in spks:
            pairs = list(itertools.combinations(sorted(by_spk[s]), 2))
            if not pairs:
                raise CorpusError(f"speaker {s!r} has a single utterance; cannot form target trials")
            if targets_per_speaker is not None:
                if targets_per_speaker > len(pairs):
                    raise CorpusError(f"speaker {s!r} supports only {len(pairs)} target trials")
                keep = rng.choice(len(pairs), size=targets_per_speaker, replace=False)
                pairs = [pairs[i] for i in sorted(keep)]
            targets += [Trial(a, b, True, cond) for a, b in pairs]
        utts = [(u, s) for s in spks for u in sorted(by_spk[s])]
        want = nontarget_ratio * len(targets)
        n_cross = sum(len(by_spk[a]) * len(by_spk[b]) for a, b in itertools.combinations(spks, 2))
        if want > n_cross:
            raise CorpusError(f"condition {cond}: {want} nontargets requested but only {n_cross} pairs exist")
        chosen: set[tuple[str, str]] = set()
        non = []
        while len(non) < want:
            i, j = rng.integers(len(utts), size=2)
            (u, su), (v, sv) = utts[i], utts[j]
            if su == sv:
                continue
            key = (u, v) if u < v else (v, u)
            if key in chosen:
                continue
            chosen.add(key)
            non.append(Trial(key[0], key[1], False, cond))
        trials += targets + non
    return trials


def write_corpus(out_dir: str | os.PathLike, corpus: Corpus) -> Path:
    """WAV files under ``wav/``, plus ``manifest.txt`` and ``spk2lang.txt``. Returns the manifest path."""
    out_dir = Path(out_dir)
    for r in corpus.records:
        write_wav(out_dir / "wav" / f"{r.utterance_id}.wav", r.samples, r.sample_rate)
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, corpus.manifest_rows())
    lines = "".join(f"{s} {l}\n" for s, l in sorted(corpus.spk2lang.items()))
    (out_dir / "spk2lang.txt").write_text(lines)
    return manifest


def read_spk2lang(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            spk, lang = line.split()
            out[spk] = lang
    return out


def corpus_checksum(records: Sequence[UtteranceRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.utterance_id.encode())
        h.update(np.ascontiguousarray(r.samples, dtype=np.float64).tobytes())
    return h.hexdigest()

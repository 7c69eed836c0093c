"""Trials and scored trial sets, plus their text formats.

Trial list: ``enroll_id test_id`` or ``enroll_id test_id target|nontarget``,
optionally followed by a condition tag. Score file: ``enroll_id test_id score``
with 9 decimals, rows in input order.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, MetricError


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    target: bool | None = None
    condition: str | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.enroll_id, self.test_id)


@dataclass
class TrialScoreSet:
    trials: list[Trial]
    scores: np.ndarray
    system: str = ""
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.trials) != self.scores.size:
            raise FormatError(f"{len(self.trials)} trials but {self.scores.size} scores")
        if not np.all(np.isfinite(self.scores)):
            raise FormatError(f"system {self.system!r}: scores must be finite")
        index = {}
        for i, tr in enumerate(self.trials):
            if tr.key in index:
                raise FormatError(f"duplicate trial {tr.enroll_id} {tr.test_id}")
            index[tr.key] = i
        self._index = index

    @classmethod
    def from_trials(cls, trials: Sequence[Trial], scores, system: str = "") -> "TrialScoreSet":
        return cls(list(trials), scores, system)

    def __len__(self):
        return len(self.trials)

    @property
    def keys(self) -> list[tuple[str, str]]:
        return [t.key for t in self.trials]

    @property
    def is_keyed(self) -> bool:
        return bool(self.trials) and all(t.target is not None for t in self.trials)

    def score_of(self, key: tuple[str, str]) -> float:
        return float(self.scores[self._index[key]])

    def labels(self) -> np.ndarray:
        if not self.is_keyed:
            raise MetricError(f"system {self.system!r}: trials carry no target/nontarget keys")
        return np.array([t.target for t in self.trials], dtype=bool)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        """(target scores, nontarget scores)."""
        lab = self.labels()
        return self.scores[lab], self.scores[~lab]

    def conditions(self) -> list[str]:
        return sorted({t.condition for t in self.trials if t.condition is not None})

    def subset(self, condition: str) -> "TrialScoreSet":
        idx = [i for i, t in enumerate(self.trials) if t.condition == condition]
        return TrialScoreSet([self.trials[i] for i in idx], self.scores[idx], self.system)

    def with_keys(self, keyed: Iterable[Trial]) -> "TrialScoreSet":
        """Copy with target flags and conditions taken from a keyed trial list."""
        lookup = {t.key: t for t in keyed}
        missing = [k for k in self.keys if k not in lookup]
        if missing:
            raise MetricError(f"{len(missing)} scored trials absent from the key, e.g. {missing[0]}")
        return TrialScoreSet([lookup[k] for k in self.keys], self.scores.copy(), self.system)


def parse_trial_line(line: str, where: str) -> Trial:
    parts = line.split()
    if len(parts) == 2:
        return Trial(parts[0], parts[1])
    if len(parts) in (3, 4) and parts[2] in ("target", "nontarget"):
        return Trial(parts[0], parts[1], parts[2] == "target", parts[3] if len(parts) == 4 else None)
    raise FormatError(f"{where}: expected 'enroll_id test_id [target|nontarget [condition]]'")


def read_trials(path: str | os.PathLike) -> list[Trial]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            out.append(parse_trial_line(line, f"{path}:{lineno}"))
    return out


def format_trials(trials: Iterable[Trial]) -> str:
    lines = []
    for t in trials:
        parts = [t.enroll_id, t.test_id]
        if t.target is not None:
            parts.append("target" if t.target else "nontarget")
            if t.condition is not None:
                parts.append(t.condition)
        lines.append(" ".join(parts) + "\n")
    return "".join(lines)


def write_trials(path: str | os.PathLike, trials: Iterable[Trial]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_trials(trials))


def format_scores(s: TrialScoreSet) -> str:
    return "".join(f"{t.enroll_id} {t.test_id} {v:.9f}\n" for t, v in zip(s.trials, s.scores))


def write_scores(path: str | os.PathLike, s: TrialScoreSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_scores(s))


def read_scores(path: str | os.PathLike, system: str | None = None) -> TrialScoreSet:
    trials, scores = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError
            scores.append(float(parts[2]))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected 'enroll_id test_id score'") from None
        trials.append(Trial(parts[0], parts[1]))
    return TrialScoreSet(trials, np.array(scores), system if system is not None else Path(path).stem)

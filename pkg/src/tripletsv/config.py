"""Experiment configuration: one INI file, environment overrides, then command-line flags.

Every key is declared in ``SCHEMA``; unknown sections or keys are rejected and
errors point at the file and line.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .backend import BackendConfig
from .errors import ConfigError
from .losses import LossWeights
from .synth import SynthSpec
from .systems import parse_systems
from .trainer import TrainConfig
from .xvector import scaled_width

ENV_PREFIX = "TRIPLETSV_"


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v: str) -> int | None:
    return None if v.strip().lower() in ("", "none", "all") else int(v)


def _words(v: str) -> tuple[str, ...]:
    return tuple(w for w in v.replace(",", " ").split() if w)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(v: str) -> str:
        v = v.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return v
    return parse


SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "experiment": {
        "seed": (int, 0),
        "scale": (float, 0.125),
        "jobs": (int, 1),
        "systems": (_words, ("2", "3", "4", "5", "6", "8", "9", "10")),
    },
    "paths": {
        "out": (str, "runs/default"),
        # blank -> a subdirectory of ``out``
        "corpus": (str, ""),
        "features": (str, ""),
        "checkpoints": (str, ""),
        "embeddings": (str, ""),
        "scores": (str, ""),
        "reports": (str, ""),
    },
    "synth": {
        "train_speakers": (int, 50),
        "train_utts": (int, 40),
        "eval_speakers": (int, 20),
        "eval_utts": (int, 10),
        "duration_min": (float, 3.0),
        "duration_max": (float, 6.0),
        "separation": (float, 1.0),
        "channel_noise_db": (float, -30.0),
        "languages": (_words, ("tgl", "yue")),
        "targets_per_speaker": (_opt_int, None),
        "nontarget_ratio": (int, 10),
        "augment_copies": (int, 0),
        "augment_snr_min": (float, 5.0),
        "augment_snr_max": (float, 20.0),
        "augment_kind": (_choice("white", "babble"), "white"),
    },
    "train": {
        "lr": (float, 0.01),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-8),
        "batch_triplets": (int, 16),
        "epochs": (int, 1),
        "steps_per_epoch": (int, 300),
        "chunk_min": (int, 100),
        "chunk_max": (int, 150),
        "alpha": (float, 1.0),
        "beta": (float, 0.1),
        "gamma": (float, 0.3),
        "margin": (float, 0.8),
        "l2_normalize": (_bool, False),
        "checkpoint_every": (int, 0),
        "keep_checkpoints": (int, 2),
        "log_wall_time": (_bool, False),
    },
    "backend": {
        "lda_dim": (int, 100),
        "plda_iters": (int, 10),
        "scorer": (_choice("plda", "cosine", "euclidean", "simnet"), "plda"),
    },
    "report": {
        "bins": (int, 40),
    },
}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]]
    source: str = "<defaults>"

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    @property
    def scale(self) -> float:
        return self.values["experiment"]["scale"]

    @property
    def jobs(self) -> int:
        return self.values["experiment"]["jobs"]

    @property
    def out(self) -> Path:
        return Path(self.values["paths"]["out"])

    def path(self, name: str) -> Path:
        """One of the artifact directories; blank entries live under ``out``."""
        v = self.values["paths"][name]
        return Path(v) if v else self.out / name

    def synth_specs(self) -> tuple[SynthSpec, SynthSpec]:
        s = self.values["synth"]
        common = dict(duration_s=(s["duration_min"], s["duration_max"]), speaker_separation=s["separation"],
                      channel_noise_db=s["channel_noise_db"], language_tags=s["languages"])
        train = SynthSpec(s["train_speakers"], s["train_utts"], seed=self.seed, id_prefix="spk", **common)
        ev = SynthSpec(s["eval_speakers"], s["eval_utts"], seed=self.seed + 1000, id_prefix="eval", **common)
        return train, ev

    def train_config(self, beta: float | None = None, gamma: float | None = None,
                     layer: str = "A") -> TrainConfig:
        t = self.values["train"]
        w = LossWeights(t["alpha"], t["beta"] if beta is None else beta, t["gamma"] if gamma is None else gamma,
                        t["margin"], t["l2_normalize"], layer)
        return TrainConfig(
            lr=t["lr"], momentum=t["momentum"], weight_decay=t["weight_decay"],
            batch_triplets=t["batch_triplets"], epochs=t["epochs"], steps_per_epoch=t["steps_per_epoch"],
            chunk_frames=(t["chunk_min"], t["chunk_max"]), seed=self.seed, loss_weights=w,
            checkpoint_every=t["checkpoint_every"], keep_checkpoints=t["keep_checkpoints"],
            log_wall_time=t["log_wall_time"],
        )

    def backend_config(self) -> BackendConfig:
        b = self.values["backend"]
        return BackendConfig(scaled_width(b["lda_dim"], self.scale), b["plda_iters"], b["scorer"])


def _line_of(path: str, section: str, key: str | None) -> int:
    current = None
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return n
        elif current == section and key is not None and "=" in line:
            if line.split("=", 1)[0].strip().lower() == key:
                return n
    return 0


def _convert(section: str, key: str, raw: str, where: str) -> Any:
    parser, _ = SCHEMA[section][key]
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for [{section}] {key}: {exc}") from None


def load_config(
    path: str | os.PathLike | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[tuple[str, str], Any] | None = None,
) -> ExperimentConfig:
    """Defaults <- config file <- ``TRIPLETSV_<SECTION>_<KEY>`` env vars <- flag overrides."""
    values = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    source = "<defaults>"
    if path is not None:
        path = str(path)
        source = path
        if not Path(path).is_file():
            raise ConfigError(f"{path}: config file not found")
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{path}:{_line_of(path, section, None)}: unknown section [{section}]")
            for key, raw in cp.items(section):
                where = f"{path}:{_line_of(path, section, key)}"
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{where}: unknown key '{key}' in [{section}]")
                values[section][key] = _convert(section, key, raw, where)
    env = os.environ if env is None else env
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        match = [(s, rest[len(s) + 1:]) for s in SCHEMA if rest.startswith(s + "_")]
        if not match or match[0][1] not in SCHEMA[match[0][0]]:
            if rest == "debug":
                continue
            raise ConfigError(f"environment variable {name}: no such config key")
        section, key = match[0]
        values[section][key] = _convert(section, key, raw, f"environment variable {name}")
    for (section, key), v in (overrides or {}).items():
        if v is not None:
            values[section][key] = v
    cfg = ExperimentConfig(values, source)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Build every derived object once so that bad values surface before any side effect."""
    if not 0 < cfg.scale <= 1:
        raise ConfigError(f"{cfg.source}: scale must lie in (0, 1], got {cfg.scale}")
    if cfg.jobs < 1:
        raise ConfigError(f"{cfg.source}: jobs must be >= 1")
    for name in SCHEMA["paths"]:
        p = cfg.path(name) if name != "out" else cfg.out
        blocker = next((q for q in [p, *p.parents] if q.exists()), None)
        if blocker is not None and not blocker.is_dir():
            raise ConfigError(f"{cfg.source}: [paths] {name}: {blocker} exists and is not a directory")
    try:
        parse_systems(cfg.values["experiment"]["systems"])
        cfg.synth_specs()
        cfg.train_config()
        cfg.backend_config()
    except ConfigError:
        raise
    except Exception as exc:  # contract errors from the owning modules
        raise ConfigError(f"{cfg.source}: {exc}") from None


def dump_config(cfg: ExperimentConfig) -> str:
    """Effective configuration as INI text (used to record what a run used)."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            v = cfg.values[section][key]
            if isinstance(v, tuple):
                v = " ".join(v)
            elif v is None:
                v = "all"
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)

"""Triplet sampling, batch assembly, SGD with momentum and the joint training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ContractError, CorpusError, NumericError
from .features import FeatureMatrix
from .losses import (
    LossWeights,
    TripletBatch,
    cross_entropy,
    joint_loss,
    maybe_l2_normalize,
    similarity_bce,
    triplet_loss,
)
from .simnet import SimilarityNet, SimNetConfig
from .tensor import Tensor
from .xvector import ModelMeta, XVectorConfig, XVectorNet

log = logging.getLogger(__name__)

SYSTEMS = ("baseline", "triplet", "simnet", "joint")
LOG_COLUMNS = ("step", "ce", "triplet", "sim", "total", "wall_ms")

# independent RNG streams so that e.g. building the pair network never shifts batch sampling
STREAM_XVECTOR, STREAM_SIMNET, STREAM_BATCHES = 0, 1, 2


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([seed, which])


@dataclass
class CorpusIndex:
    spk2utts: dict[str, list[str]]
    seed: int = 0

    def __post_init__(self):
        self.spk2utts = {s: sorted(u) for s, u in sorted(self.spk2utts.items())}
        if len(self.spk2utts) < 2:
            raise CorpusError(f"need at least 2 speakers for negatives, got {len(self.spk2utts)}")
        for spk, utts in self.spk2utts.items():
            if len(utts) < 2:
                raise CorpusError(f"speaker {spk!r} has {len(utts)} utterance(s); positives need at least 2")
        self.speakers = list(self.spk2utts)
        self._label = {s: i for i, s in enumerate(self.speakers)}
        self.utt2spk = {u: s for s, us in self.spk2utts.items() for u in us}

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]], seed: int = 0) -> "CorpusIndex":
        """Build from ``(utterance_id, speaker_id)`` pairs."""
        spk2utts: dict[str, list[str]] = {}
        for utt, spk in pairs:
            spk2utts.setdefault(spk, []).append(utt)
        return cls(spk2utts, seed)

    @property
    def num_utterances(self) -> int:
        return len(self.utt2spk)

    @property
    def num_speakers(self) -> int:
        return len(self.speakers)

    def label(self, speaker_id: str) -> int:
        return self._label[speaker_id]


def sample_triplet(idx: CorpusIndex, rng: np.random.Generator) -> tuple[str, str, str]:
    spk = idx.speakers[rng.integers(idx.num_speakers)]
    utts = idx.spk2utts[spk]
    i, j = rng.choice(len(utts), size=2, replace=False)
    other = rng.integers(idx.num_speakers - 1)
    if other >= idx.label(spk):
        other += 1
    neg_utts = idx.spk2utts[idx.speakers[other]]
    return utts[i], utts[j], neg_utts[rng.integers(len(neg_utts))]


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-8
    batch_triplets: int = 16
    epochs: int = 1
    steps_per_epoch: int = 200
    chunk_frames: tuple[int, int] = (200, 400)
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0  # 0 -> only the final checkpoint
    keep_checkpoints: int = 2
    log_wall_time: bool = False  # wall clock breaks bit-identical logs, so it is opt-in

    def __post_init__(self):
        self.chunk_frames = tuple(int(c) for c in self.chunk_frames)
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_triplets < 1:
            raise ContractError("batch_triplets must be at least 1")
        lo, hi = self.chunk_frames
        if not 0 < lo <= hi:
            raise ContractError(f"bad chunk range {self.chunk_frames}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chunk_frames"] = list(self.chunk_frames)
        return d


@dataclass
class Batch:
    triplets: list[tuple[str, str, str]]
    frames: np.ndarray  # [3B, L, F]: anchors, then positives, then negatives
    labels: np.ndarray  # [3B] speaker labels in the same order

    @property
    def size(self) -> int:
        return len(self.triplets)

    @property
    def anchor_labels(self) -> np.ndarray:
        return self.labels[: self.size]

    def pair_rows(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row indices into the stacked embeddings for the similarity pairs.

        Each triplet gives (a, p) -> 1 and (a, n) -> 0, each fed in both orders.
        """
        b = self.size
        a, p, n = np.arange(b), np.arange(b, 2 * b), np.arange(2 * b, 3 * b)
        first = np.concatenate([a, a, p, n])
        second = np.concatenate([p, n, a, a])
        labels = np.concatenate([np.ones(b), np.zeros(b), np.ones(b), np.zeros(b)])
        return first, second, labels


def make_batch(
    idx: CorpusIndex,
    features: Mapping[str, FeatureMatrix],
    cfg: TrainConfig,
    rng: np.random.Generator,
    max_redraws: int = 1000,
) -> Batch:
    lo, hi = cfg.chunk_frames
    triplets = []
    redraws = 0
    while len(triplets) < cfg.batch_triplets:
        trip = sample_triplet(idx, rng)
        short = [u for u in trip if features[u].num_frames < lo]
        if short:
            redraws += 1
            log.warning("utterance %s shorter than %d frames; resampling triplet", short[0], lo)
            if redraws > max_redraws:
                raise CorpusError(f"could not draw a batch with utterances of at least {lo} frames")
            continue
        triplets.append(trip)
    ordered = [t[0] for t in triplets] + [t[1] for t in triplets] + [t[2] for t in triplets]
    length = int(rng.integers(lo, hi + 1))
    length = min(length, min(features[u].num_frames for u in ordered))
    chunks = []
    for utt in ordered:
        mat = features[utt].frames
        start = int(rng.integers(mat.shape[0] - length + 1))
        chunks.append(mat[start:start + length])
    labels = np.array([idx.label(idx.utt2spk[u]) for u in ordered], dtype=np.int64)
    return Batch(triplets, np.stack(chunks), labels)


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray] | None,
             state: SgdState, cfg: TrainConfig) -> None:
    """v <- momentum*v + g + wd*w ; w <- w - lr*v. Gradients are cleared afterwards.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a gradient are left alone.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradient in {', '.join(sorted(bad)[:5])}; step aborted")
    for k, g in grads.items():
        p = params[k]
        v = state.velocity.get(k)
        if v is None:
            v = np.zeros_like(p.data)
        v = cfg.momentum * v + g + cfg.weight_decay * p.data
        state.velocity[k] = v
        p.data = p.data - cfg.lr * v
    for p in params.values():
        p.grad = None


def system_weights(system: str, base: LossWeights) -> LossWeights:
    if system not in SYSTEMS:
        raise ContractError(f"unknown system {system!r}; expected one of {', '.join(SYSTEMS)}")
    if system == "baseline":
        return replace(base, beta=0.0, gamma=0.0)
    if system == "triplet":
        return replace(base, gamma=0.0)
    if system == "simnet":
        return replace(base, beta=0.0)
    return base


@dataclass
class StepLosses:
    ce: float
    triplet: float
    sim: float
    total: float


def training_step(batch: Batch, xnet: XVectorNet, snet: SimilarityNet | None, w: LossWeights) -> StepLosses:
    """Forward + backward for one batch; gradients are left on the parameters."""
    out = xnet.forward(batch.frames, train=True, normalize_a=w.l2_normalize)
    ce = cross_entropy(out.logits, batch.labels) if w.alpha > 0 else None
    emb = out.emb_a if w.triplet_layer == "A" else out.emb_b
    trip = sim = None
    if w.beta > 0 or w.gamma > 0:
        emb = maybe_l2_normalize(emb, w.l2_normalize)
    if w.beta > 0:
        b = batch.size
        tb = TripletBatch(T.slice(emb, 0, 0, b), T.slice(emb, 0, b, 2 * b), T.slice(emb, 0, 2 * b, 3 * b),
                          batch.anchor_labels)
        trip = triplet_loss(tb, w.margin_a)
    if w.gamma > 0:
        if snet is None:
            raise ContractError("similarity weight is positive but no pair network was given")
        rows_a, rows_b, labels = batch.pair_rows()
        logits = snet.forward(T.take(emb, rows_a), T.take(emb, rows_b), train=True)
        sim = similarity_bce(logits, labels)
    total = joint_loss(ce, trip, sim, w)
    if not math.isfinite(total.item()):
        raise NumericError(f"loss became {total.item()}")
    T.backward(total)
    nan = float("nan")
    return StepLosses(
        ce.item() if ce is not None else nan,
        trip.item() if trip is not None else nan,
        sim.item() if sim is not None else nan,
        total.item(),
    )


@dataclass
class TrainResult:
    xvector: XVectorNet
    simnet: SimilarityNet
    log_rows: list[dict]
    weights: LossWeights
    checkpoints: list[Path] = field(default_factory=list)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def write_log(path: str | os.PathLike, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOG_COLUMNS)
        for r in rows:
            wr.writerow([r["step"]] + [_fmt(r[k]) for k in LOG_COLUMNS[1:-1]] + [r["wall_ms"]])


def read_log(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("step", "wall_ms") else float(v)) for k, v in r.items()} for r in rows]


def model_state(xnet: XVectorNet, snet: SimilarityNet) -> dict[str, np.ndarray]:
    state = xnet.state_dict("xvector.")
    state.update(snet.state_dict("simnet."))
    return state


def save_model(out_dir: str | os.PathLike, name: str, xnet: XVectorNet, snet: SimilarityNet,
               speakers: Sequence[str]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.ckpt"
    checkpoint.save(path, model_state(xnet, snet))
    meta = ModelMeta(xnet.cfg.to_dict(), snet.cfg.to_dict(), list(speakers))
    (out_dir / f"{name}.json").write_text(json.dumps(asdict(meta), indent=1, sort_keys=True) + "\n")
    return path


def load_model(path: str | os.PathLike) -> tuple[XVectorNet, SimilarityNet, ModelMeta]:
    path = Path(path)
    meta = ModelMeta(**json.loads(path.with_suffix(".json").read_text()))
    xd = dict(meta.xvector)
    xd["tdnn_dims"] = tuple(xd["tdnn_dims"])
    xd["context_offsets"] = tuple(tuple(o) for o in xd["context_offsets"])
    xnet = XVectorNet(XVectorConfig(**xd))
    snet = SimilarityNet(SimNetConfig(**meta.simnet))
    state = checkpoint.load(path)
    xnet.load_state_dict(state, "xvector.")
    snet.load_state_dict(state, "simnet.")
    return xnet, snet, meta


def build_networks(xcfg: XVectorConfig, seed: int) -> tuple[XVectorNet, SimilarityNet]:
    xnet = XVectorNet(xcfg, stream(seed, STREAM_XVECTOR))
    snet = SimilarityNet(SimNetConfig.for_xvector(xcfg), stream(seed, STREAM_SIMNET))
    return xnet, snet


def train(
    system: str,
    corpus: CorpusIndex,
    features: Mapping[str, FeatureMatrix],
    cfg: TrainConfig,
    xcfg: XVectorConfig,
    out_dir: str | os.PathLike | None = None,
) -> TrainResult:
    """Train one system. With ``out_dir`` set, writes train_log.csv and checkpoints there."""
    w = system_weights(system, cfg.loss_weights)
    if xcfg.num_speakers != corpus.num_speakers:
        raise ContractError(f"network has {xcfg.num_speakers} outputs, corpus has {corpus.num_speakers} speakers")
    if cfg.chunk_frames[0] < xcfg.min_frames:
        raise ContractError(f"chunk_frames {cfg.chunk_frames} below the {xcfg.min_frames}-frame receptive field")
    xnet, snet = build_networks(xcfg, cfg.seed)
    params = {f"xvector.{k}": p for k, p in xnet.params.items()}
    if w.gamma > 0:
        params.update({f"simnet.{k}": p for k, p in snet.params.items()})
    rng = stream(cfg.seed, STREAM_BATCHES)
    state = SgdState()
    rows: list[dict] = []
    saved: list[Path] = []
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    last_ckpt = "none"
    for step in range(1, cfg.total_steps + 1):
        t0 = time.perf_counter()
        batch = make_batch(corpus, features, cfg, rng)
        try:
            losses = training_step(batch, xnet, snet if w.gamma > 0 else None, w)
            sgd_step(params, None, state, cfg)
        except NumericError as exc:
            if out_dir is not None:
                write_log(Path(out_dir) / "train_log.csv", rows)
            raise NumericError(f"{system} diverged at step {step}: {exc}; last checkpoint: {last_ckpt}") from None
        wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.log_wall_time else 0
        rows.append({"step": step, "ce": losses.ce, "triplet": losses.triplet, "sim": losses.sim,
                     "total": losses.total, "wall_ms": wall})
        if ckpt_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            saved.append(save_model(ckpt_dir, f"step{step:06d}", xnet, snet, corpus.speakers))
            last_ckpt = str(saved[-1])
            while len(saved) > max(cfg.keep_checkpoints, 1):
                old = saved.pop(0)
                old.unlink(missing_ok=True)
                old.with_suffix(".json").unlink(missing_ok=True)
    result = TrainResult(xnet, snet, rows, w, saved)
    if out_dir is not None:
        write_log(Path(out_dir) / "train_log.csv", rows)
        save_model(out_dir, "final", xnet, snet, corpus.speakers)
    return result

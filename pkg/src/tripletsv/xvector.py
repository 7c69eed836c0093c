"""x-vector embedding network: TDNN frame layers, statistics pooling, two embedding layers, softmax head."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ContextError, DimensionError, FormatError, PoolingError, TripletSVError
from .features import FeatureMatrix
from .losses import maybe_l2_normalize
from .tensor import BatchNormStats, Tensor

log = logging.getLogger(__name__)

DEFAULT_OFFSETS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,), (0,))


def scaled_width(width: int, scale: float) -> int:
    return max(1, int(round(width * scale)))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass(frozen=True)
class XVectorConfig:
    feat_dim: int = 23
    tdnn_dims: tuple[int, ...] = (512, 512, 512, 512, 1500)
    context_offsets: tuple[tuple[int, ...], ...] = DEFAULT_OFFSETS
    embed_dim: int = 512
    num_speakers: int = 2
    scale_factor: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "tdnn_dims", tuple(int(d) for d in self.tdnn_dims))
        object.__setattr__(self, "context_offsets", tuple(tuple(int(o) for o in c) for c in self.context_offsets))
        if len(self.tdnn_dims) != len(self.context_offsets):
            raise DimensionError("tdnn_dims and context_offsets must have the same length")
        if self.num_speakers < 1:
            raise DimensionError("num_speakers must be positive")
        if not 0 < self.scale_factor <= 1:
            raise DimensionError("scale_factor must lie in (0, 1]")

    @property
    def layer_dims(self) -> list[int]:
        return [scaled_width(d, self.scale_factor) for d in self.tdnn_dims]

    @property
    def embedding_dim(self) -> int:
        return scaled_width(self.embed_dim, self.scale_factor)

    @property
    def pooled_dim(self) -> int:
        return 2 * self.layer_dims[-1]

    @property
    def min_frames(self) -> int:
        """Smallest input length producing one output frame."""
        return 1 + sum(max(c) - min(c) for c in self.context_offsets)

    def to_dict(self) -> dict:
        return {
            "feat_dim": self.feat_dim,
            "tdnn_dims": list(self.tdnn_dims),
            "context_offsets": [list(c) for c in self.context_offsets],
            "embed_dim": self.embed_dim,
            "num_speakers": self.num_speakers,
            "scale_factor": self.scale_factor,
        }


@dataclass
class Embedding:
    vector: np.ndarray
    utterance_id: str
    layer: str = "A"


@dataclass
class XVectorOutput:
    emb_a: Tensor
    emb_b: Tensor
    logits: Tensor


def _affine(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def _bn_relu(x: Tensor, params, buffers, name: str, train: bool) -> Tensor:
    y = T.batchnorm(x, params[f"{name}.bn.gamma"], params[f"{name}.bn.beta"], buffers[f"{name}.bn"], train)
    return T.relu(y)


def splice(x: Tensor, offsets: Sequence[int]) -> Tensor:
    """[B, T, D] -> [B, T - span, len(offsets) * D], frames stacked at the given offsets."""
    lo, hi = min(offsets), max(offsets)
    t_out = x.shape[1] - (hi - lo)
    if len(offsets) == 1:
        return x if hi == lo == 0 else T.slice(x, 1, offsets[0] - lo, offsets[0] - lo + t_out)
    return T.concat([T.slice(x, 1, o - lo, o - lo + t_out) for o in offsets], axis=2)


def stats_pool(h: Tensor, order_invariant: bool = True) -> Tensor:
    """Mean and standard deviation over time, concatenated.

    Accepts ``[T, D]`` (returns ``[2D]``) or ``[B, T, D]`` (returns ``[B, 2D]``).
    With ``order_invariant`` the result does not depend on frame order, to the bit
    (frames are sorted before summing; training skips this for speed).
    """
    if h.ndim not in (2, 3):
        raise DimensionError(f"stats_pool expects [T, D] or [B, T, D], got {h.shape}")
    axis = h.ndim - 2
    if h.shape[axis] < 2:
        raise PoolingError(f"statistics pooling needs at least 2 frames, got {h.shape[axis]}")
    mu = T.mean(h, axis=axis, order_invariant=order_invariant)
    sd = T.stddev(h, axis=axis, order_invariant=order_invariant)
    return T.concat([mu, sd], axis=axis)


class XVectorNet:
    def __init__(self, cfg: XVectorConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, BatchNormStats] = {}
        in_dim = cfg.feat_dim
        for i, (width, offsets) in enumerate(zip(cfg.layer_dims, cfg.context_offsets), 1):
            self._add_layer(f"tdnn{i}", in_dim * len(offsets), width, rng, bn=True)
            in_dim = width
        emb = cfg.embedding_dim
        self._add_layer("emb_a", cfg.pooled_dim, emb, rng, bn=True)
        self._add_layer("emb_b", emb, emb, rng, bn=True)
        self._add_layer("out", emb, cfg.num_speakers, rng, bn=False)

    def _add_layer(self, name, fan_in, fan_out, rng, bn):
        self.params[f"{name}.weight"] = Tensor(glorot_uniform(rng, fan_in, fan_out), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)
        if bn:
            self.params[f"{name}.bn.gamma"] = Tensor(np.ones(fan_out), requires_grad=True)
            self.params[f"{name}.bn.beta"] = Tensor(np.zeros(fan_out), requires_grad=True)
            self.buffers[f"{name}.bn"] = BatchNormStats.fresh(fan_out)

    @staticmethod
    def _as_batch(x) -> Tensor:
        if isinstance(x, FeatureMatrix):
            x = x.frames
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        return x

    def forward_frames(self, x, train: bool = False) -> Tensor:
        """Frame-level TDNN stack. ``x``: ``[B, T, F]``, ``[T, F]`` or FeatureMatrix."""
        x = self._as_batch(x)
        if x.shape[2] != self.cfg.feat_dim:
            raise DimensionError(f"expected {self.cfg.feat_dim}-dim features, got {x.shape[2]}")
        if x.shape[1] < self.cfg.min_frames:
            raise ContextError(
                f"utterance has {x.shape[1]} frames; the TDNN context needs at least {self.cfg.min_frames}"
            )
        h = x
        for i, offsets in enumerate(self.cfg.context_offsets, 1):
            h = splice(h, offsets)
            b, t, d = h.shape
            flat = _affine(T.reshape(h, (b * t, d)), self.params, f"tdnn{i}")
            flat = _bn_relu(flat, self.params, self.buffers, f"tdnn{i}", train)
            h = T.reshape(flat, (b, t, flat.shape[1]))
        return h

    def forward(self, x, train: bool = False, normalize_a: bool = False) -> XVectorOutput:
        """Utterance-level pass: returns embedding A, embedding B and speaker logits (all batched)."""
        pooled = stats_pool(self.forward_frames(x, train), order_invariant=not train)
        emb_a = _affine(pooled, self.params, "emb_a")
        hidden = _bn_relu(maybe_l2_normalize(emb_a, normalize_a), self.params, self.buffers, "emb_a", train)
        emb_b = _affine(hidden, self.params, "emb_b")
        hidden = _bn_relu(emb_b, self.params, self.buffers, "emb_b", train)
        logits = _affine(hidden, self.params, "out")
        return XVectorOutput(emb_a, emb_b, logits)

    def forward_utterance(self, f, train: bool = False):
        """Single utterance -> (embA [D], embB [D], logits [num_speakers]) as numpy arrays."""
        out = self.forward(f, train)
        return out.emb_a.data[0], out.emb_b.data[0], out.logits.data[0]

    def embed(self, f, layer: str = "A") -> np.ndarray:
        out = self.forward(f, train=False)
        return (out.emb_a if layer == "A" else out.emb_b).data[0]

    # -- state ---------------------------------------------------------------

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {prefix + k: v.data for k, v in self.params.items()}
        for k, stats in self.buffers.items():
            state[f"{prefix}{k}.running_mean"] = stats.mean
            state[f"{prefix}{k}.running_var"] = stats.var
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "") -> None:
        load_state(self.params, self.buffers, state, prefix)


def load_state(params: dict[str, Tensor], buffers: dict[str, BatchNormStats],
               state: Mapping[str, np.ndarray], prefix: str) -> None:
    for k, p in params.items():
        arr = state.get(prefix + k)
        if arr is None:
            raise FormatError(f"checkpoint is missing parameter {prefix + k}")
        if arr.shape != p.shape:
            raise FormatError(f"parameter {prefix + k}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = np.array(arr, dtype=np.float64)
        p.grad = None
    for k, stats in buffers.items():
        try:
            stats.mean = np.array(state[f"{prefix}{k}.running_mean"], dtype=np.float64)
            stats.var = np.array(state[f"{prefix}{k}.running_var"], dtype=np.float64)
        except KeyError as exc:
            raise FormatError(f"checkpoint is missing buffer {exc.args[0]}") from None


def extract_embeddings(
    features: Mapping[str, FeatureMatrix] | Sequence[FeatureMatrix],
    net: XVectorNet,
    layer: str = "A",
    errors: dict[str, str] | None = None,
) -> list[Embedding]:
    """Embed every utterance in eval mode; failures are logged and collected, not raised."""
    if layer not in ("A", "B"):
        raise ValueError(f"layer must be 'A' or 'B', got {layer!r}")
    items = features.items() if isinstance(features, Mapping) else ((f.utterance_id, f) for f in features)
    out = []
    for utt, f in items:
        try:
            out.append(Embedding(net.embed(f, layer), utt, layer))
        except TripletSVError as exc:
            log.warning("skipping %s: %s", utt, exc)
            if errors is not None:
                errors[utt] = str(exc)
    return out


# ---------------------------------------------------------------------------
# embedding export


def write_embeddings_text(path: str | os.PathLike, embeddings: Sequence[Embedding]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in embeddings:
            fh.write(e.utterance_id + " " + " ".join(repr(float(v)) for v in e.vector) + "\n")


def read_embeddings_text(path: str | os.PathLike, layer: str = "A") -> list[Embedding]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        utt, *vals = line.split()
        try:
            out.append(Embedding(np.array([float(v) for v in vals]), utt, layer))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad embedding value") from None
    return out


def write_embeddings_binary(path: str | os.PathLike, embeddings: Sequence[Embedding]) -> None:
    checkpoint.save(path, {e.utterance_id: e.vector for e in embeddings})


def read_embeddings_binary(path: str | os.PathLike, layer: str = "A") -> list[Embedding]:
    return [Embedding(v, k, layer) for k, v in checkpoint.load(path).items()]


def embedding_map(embeddings: Sequence[Embedding]) -> dict[str, np.ndarray]:
    return {e.utterance_id: e.vector for e in embeddings}


@dataclass
class ModelMeta:
    """Sidecar description stored next to a checkpoint."""

    xvector: dict
    simnet: dict | None = None
    speakers: list[str] = field(default_factory=list)

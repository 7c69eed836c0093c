"""Embedding similarity network: two BLSTM layers over the pair, two FC layers, one logit.

The pair is fed as a length-2 sequence, one embedding per timestep.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, LookupFailure
from .tensor import BatchNormStats, Tensor
from .trials import Trial, TrialScoreSet
from .xvector import XVectorConfig, glorot_uniform, load_state, scaled_width


@dataclass(frozen=True)
class SimNetConfig:
    input_dim: int = 512
    lstm_hidden: int = 1024
    num_blstm_layers: int = 2
    fc_dims: tuple[int, ...] = (512, 512)
    scale_factor: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "fc_dims", tuple(int(d) for d in self.fc_dims))
        if self.num_blstm_layers < 1:
            raise DimensionError("need at least one BLSTM layer")

    @classmethod
    def for_xvector(cls, xcfg: XVectorConfig, **overrides) -> "SimNetConfig":
        return cls(input_dim=xcfg.embed_dim, scale_factor=xcfg.scale_factor, **overrides)

    @property
    def in_width(self) -> int:
        return scaled_width(self.input_dim, self.scale_factor)

    @property
    def hidden(self) -> int:
        return scaled_width(self.lstm_hidden, self.scale_factor)

    @property
    def fc_widths(self) -> list[int]:
        return [scaled_width(d, self.scale_factor) for d in self.fc_dims]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "lstm_hidden": self.lstm_hidden,
            "num_blstm_layers": self.num_blstm_layers,
            "fc_dims": list(self.fc_dims),
            "scale_factor": self.scale_factor,
        }


@dataclass
class LstmParams:
    w_x: Tensor  # [D, 4H], gate blocks ordered i, f, g, o
    w_h: Tensor  # [H, 4H]
    bias: Tensor  # [4H]

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]


def init_lstm(rng: np.random.Generator, in_dim: int, hidden: int, forget_bias: float = 1.0) -> LstmParams:
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = forget_bias
    return LstmParams(
        Tensor(glorot_uniform(rng, in_dim, 4 * hidden), requires_grad=True),
        Tensor(glorot_uniform(rng, hidden, 4 * hidden), requires_grad=True),
        Tensor(bias, requires_grad=True),
    )


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM step on ``[B, D]`` inputs (1-D inputs are treated as a batch of one)."""
    squeeze = x.ndim == 1
    if squeeze:
        x, h, c = (T.reshape(v, (1, -1)) for v in (x, h, c))
    H = p.hidden
    if x.shape[1] != p.w_x.shape[0] or h.shape[1] != H or c.shape != h.shape:
        raise DimensionError(f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape} vs hidden {H}")
    z = T.add(T.add(T.matmul(x, p.w_x), T.matmul(h, p.w_h)), p.bias)
    i = T.sigmoid(T.slice(z, 1, 0, H))
    f = T.sigmoid(T.slice(z, 1, H, 2 * H))
    g = T.tanh(T.slice(z, 1, 2 * H, 3 * H))
    o = T.sigmoid(T.slice(z, 1, 3 * H, 4 * H))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    if squeeze:
        return T.reshape(h_new, (H,)), T.reshape(c_new, (H,))
    return h_new, c_new


def run_lstm(seq: Sequence[Tensor], p: LstmParams, reverse: bool = False) -> list[Tensor]:
    """Hidden state per timestep, returned in input order."""
    batch = seq[0].shape[0]
    h = Tensor(np.zeros((batch, p.hidden)))
    c = Tensor(np.zeros((batch, p.hidden)))
    order = range(len(seq) - 1, -1, -1) if reverse else range(len(seq))
    out: list[Tensor | None] = [None] * len(seq)
    for t in order:
        h, c = lstm_cell(seq[t], h, c, p)
        out[t] = h
    return out


def blstm_layer(seq: Sequence[Tensor], fwd: LstmParams, bwd: LstmParams) -> list[Tensor]:
    """Per-timestep ``[forward ‖ backward]`` hidden states, each ``[B, 2H]``."""
    hf = run_lstm(seq, fwd)
    hb = run_lstm(seq, bwd, reverse=True)
    return [T.concat([a, b], axis=1) for a, b in zip(hf, hb)]


class SimilarityNet:
    def __init__(self, cfg: SimNetConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(1)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, BatchNormStats] = {}
        self.lstm: list[tuple[LstmParams, LstmParams]] = []
        in_dim, H = cfg.in_width, cfg.hidden
        for layer in range(cfg.num_blstm_layers):
            pair = (init_lstm(rng, in_dim, H), init_lstm(rng, in_dim, H))
            for direction, p in zip(("fwd", "bwd"), pair):
                prefix = f"blstm{layer + 1}.{direction}"
                self.params[f"{prefix}.w_x"] = p.w_x
                self.params[f"{prefix}.w_h"] = p.w_h
                self.params[f"{prefix}.bias"] = p.bias
            self.lstm.append(pair)
            in_dim = 2 * H
        for k, width in enumerate(cfg.fc_widths, 1):
            self._add_affine(f"fc{k}", in_dim, width, rng)
            self.params[f"fc{k}.bn.gamma"] = Tensor(np.ones(width), requires_grad=True)
            self.params[f"fc{k}.bn.beta"] = Tensor(np.zeros(width), requires_grad=True)
            self.buffers[f"fc{k}.bn"] = BatchNormStats.fresh(width)
            in_dim = width
        self._add_affine("out", in_dim, 1, rng)

    def _add_affine(self, name, fan_in, fan_out, rng):
        self.params[f"{name}.weight"] = Tensor(glorot_uniform(rng, fan_in, fan_out), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)

    def forward(self, first, second, train: bool = False) -> Tensor:
        """Same-speaker logits ``[B]`` for embedding batches ``first``/``second`` (``[B, D]``)."""
        first = first if isinstance(first, Tensor) else Tensor(np.atleast_2d(first))
        second = second if isinstance(second, Tensor) else Tensor(np.atleast_2d(second))
        if first.shape != second.shape or first.shape[-1] != self.cfg.in_width:
            raise DimensionError(
                f"pair shapes {first.shape} / {second.shape} do not match input width {self.cfg.in_width}"
            )
        seq = [first, second]
        for fwd, bwd in self.lstm:
            seq = blstm_layer(seq, fwd, bwd)
        H = self.cfg.hidden
        h = T.concat([T.slice(seq[-1], 1, 0, H), T.slice(seq[0], 1, H, 2 * H)], axis=1)
        for k in range(1, len(self.cfg.fc_widths) + 1):
            h = T.add(T.matmul(h, self.params[f"fc{k}.weight"]), self.params[f"fc{k}.bias"])
            h = T.batchnorm(h, self.params[f"fc{k}.bn.gamma"], self.params[f"fc{k}.bn.beta"],
                            self.buffers[f"fc{k}.bn"], train)
            h = T.relu(h)
        logit = T.add(T.matmul(h, self.params["out.weight"]), self.params["out.bias"])
        return T.reshape(logit, (logit.shape[0],))

    def predict(self, first: np.ndarray, second: np.ndarray) -> float:
        """Same-speaker probability for a single pair, in eval mode."""
        z = self.forward(first, second, train=False).data[0]
        return float(0.5 * (1.0 + np.tanh(0.5 * z)))

    def pair_logits(self, first: np.ndarray, second: np.ndarray) -> np.ndarray:
        """Eval-mode logits averaged over both input orderings; inputs ``[B, D]``."""
        a = self.forward(first, second, train=False).data
        b = self.forward(second, first, train=False).data
        return 0.5 * (a + b)

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {prefix + k: v.data for k, v in self.params.items()}
        for k, stats in self.buffers.items():
            state[f"{prefix}{k}.running_mean"] = stats.mean
            state[f"{prefix}{k}.running_var"] = stats.var
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "") -> None:
        load_state(self.params, self.buffers, state, prefix)


def score_trials(
    trials: Sequence[Trial],
    embeddings: Mapping[str, np.ndarray],
    net: SimilarityNet,
    system: str = "simnet",
    batch_size: int = 512,
) -> TrialScoreSet:
    """Score each trial with the pair network's logit (mean of both orderings)."""
    for tr in trials:
        for utt in (tr.enroll_id, tr.test_id):
            if utt not in embeddings:
                raise LookupFailure(f"no embedding for utterance {utt!r}")
    scores = np.zeros(len(trials))
    for start in range(0, len(trials), batch_size):
        chunk = trials[start:start + batch_size]
        first = np.stack([embeddings[t.enroll_id] for t in chunk])
        second = np.stack([embeddings[t.test_id] for t in chunk])
        scores[start:start + len(chunk)] = net.pair_logits(first, second)
    return TrialScoreSet.from_trials(trials, scores, system)

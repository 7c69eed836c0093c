"""Embedding back end: centering, LDA, length normalisation, two-covariance PLDA,
cosine / Euclidean scoring and z-normalised score fusion."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    FusionError,
    LookupFailure,
    NormalizationError,
    NumericError,
    PreconditionError,
)
from .trials import Trial, TrialScoreSet

log = logging.getLogger(__name__)

LDA_REG = 1e-6
PLDA_REG = 1e-8
LOG2PI = np.log(2.0 * np.pi)


def _group(labels: Sequence) -> tuple[list, np.ndarray]:
    uniq = sorted(set(labels))
    index = {s: i for i, s in enumerate(uniq)}
    return uniq, np.array([index[s] for s in labels])


def scatter_matrices(x: np.ndarray, labels: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """(between-class, within-class) scatter, each averaged over samples."""
    x = np.asarray(x, dtype=np.float64)
    _, ids = _group(labels)
    mu = x.mean(axis=0)
    sb = np.zeros((x.shape[1], x.shape[1]))
    sw = np.zeros_like(sb)
    for k in range(ids.max() + 1):
        xs = x[ids == k]
        d = xs.mean(axis=0) - mu
        sb += xs.shape[0] * np.outer(d, d)
        c = xs - xs.mean(axis=0)
        sw += c.T @ c
    n = x.shape[0]
    return sb / n, sw / n


def fit_lda(x: np.ndarray, labels: Sequence, out_dim: int) -> np.ndarray:
    """``D x out_dim`` projection onto the leading generalised eigenvectors of (Sb, Sw + reg*I)."""
    x = np.asarray(x, dtype=np.float64)
    n_spk = len(set(labels))
    if n_spk < 2:
        raise PreconditionError(f"LDA needs at least 2 speakers, got {n_spk}")
    if not 1 <= out_dim <= min(x.shape[1], n_spk - 1):
        raise PreconditionError(
            f"LDA out_dim {out_dim} must lie in [1, min(D={x.shape[1]}, speakers-1={n_spk - 1})]"
        )
    sb, sw = scatter_matrices(x, labels)
    try:
        vals, vecs = scipy.linalg.eigh(sb, sw + LDA_REG * np.eye(sw.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"LDA within-class scatter is singular after regularisation: {exc}") from None
    order = np.argsort(vals)[::-1][:out_dim]
    return vecs[:, order]


def length_normalize(e: np.ndarray) -> np.ndarray:
    """Scale each row (or a single vector) to norm sqrt(dim)."""
    e = np.asarray(e, dtype=np.float64)
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("cannot length-normalise a zero vector")
    return np.sqrt(e.shape[-1]) * e / norms


@dataclass
class PldaModel:
    mu: np.ndarray
    between_cov: np.ndarray
    within_cov: np.ndarray
    lda_matrix: np.ndarray | None = None
    center: np.ndarray | None = None
    log_likelihoods: tuple[float, ...] = ()

    def __post_init__(self):
        _check_pd(self.within_cov, "within_cov")
        if np.min(np.linalg.eigvalsh(_sym(self.between_cov))) < -1e-10:
            raise NumericError("between_cov is not positive semi-definite")
        self._prepare()

    def _prepare(self):
        b, w = self.between_cov, self.within_cov
        tot = b + w
        tot_inv = np.linalg.inv(tot)
        s = tot - b @ tot_inv @ b
        s_inv = np.linalg.inv(s)
        self._q = _sym(tot_inv - s_inv)
        self._p = _sym(tot_inv @ b @ s_inv)
        self._const = 0.5 * (np.linalg.slogdet(tot)[1] - np.linalg.slogdet(s)[1])

    @property
    def dim(self) -> int:
        return self.mu.size

    def transform(self, e: np.ndarray) -> np.ndarray:
        """Raw embeddings -> centred, LDA-projected, length-normalised vectors."""
        x = np.asarray(e, dtype=np.float64)
        if self.center is not None:
            x = x - self.center
        if self.lda_matrix is not None:
            x = x @ self.lda_matrix
        return length_normalize(x)

    def score_pairs(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """Log-likelihood ratio for matched rows of two ``[N, D]`` arrays (already transformed)."""
        a = np.atleast_2d(x1) - self.mu
        b = np.atleast_2d(x2) - self.mu
        qa = np.einsum("ij,jk,ik->i", a, self._q, a)
        qb = np.einsum("ij,jk,ik->i", b, self._q, b)
        cross = np.einsum("ij,jk,ik->i", a, self._p, b)
        return 0.5 * qa + 0.5 * qb + cross + self._const


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _check_pd(m: np.ndarray, name: str) -> None:
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise NumericError(f"{name} is not positive definite") from None


def _ensure_pd(m: np.ndarray, name: str) -> np.ndarray:
    m = _sym(m)
    try:
        np.linalg.cholesky(m)
        return m
    except np.linalg.LinAlgError:
        log.warning("%s lost positive definiteness; adding %g*I", name, PLDA_REG)
    m = m + PLDA_REG * np.eye(m.shape[0])
    _check_pd(m, name)
    return m


def plda_log_likelihood(x: np.ndarray, ids: np.ndarray, mu, b, w) -> float:
    """Exact marginal log-likelihood of the data under x = mu + y_s + e."""
    d = x.shape[1]
    w_inv = np.linalg.inv(w)
    b_inv = np.linalg.inv(b)
    logdet_w = np.linalg.slogdet(w)[1]
    logdet_b = np.linalg.slogdet(b)[1]
    total = 0.0
    for k in range(ids.max() + 1):
        z = x[ids == k] - mu
        n = z.shape[0]
        p = b_inv + n * w_inv
        r = w_inv @ z.sum(axis=0)
        total += (-0.5 * n * d * LOG2PI - 0.5 * n * logdet_w - 0.5 * logdet_b
                  - 0.5 * np.linalg.slogdet(p)[1]
                  - 0.5 * np.einsum("ij,jk,ik->", z, w_inv, z)
                  + 0.5 * r @ np.linalg.solve(p, r))
    return float(total)


def fit_plda(x: np.ndarray, labels: Sequence, iterations: int = 10) -> PldaModel:
    """EM for the two-covariance model. Each iteration's log-likelihood is checked to be non-decreasing."""
    x = np.asarray(x, dtype=np.float64)
    _, ids = _group(labels)
    counts = np.bincount(ids)
    if counts.size < 2:
        raise PreconditionError(f"PLDA needs at least 2 speakers, got {counts.size}")
    if counts.min() < 2:
        raise PreconditionError("PLDA needs at least 2 utterances for every speaker")
    d = x.shape[1]
    mu = x.mean(axis=0)
    sb, sw = scatter_matrices(x, labels)
    b = _ensure_pd(sb + PLDA_REG * np.eye(d), "between_cov")
    w = _ensure_pd(sw * (x.shape[0] / (x.shape[0] - counts.size)), "within_cov")
    lls = [plda_log_likelihood(x, ids, mu, b, w)]
    n_spk = counts.size
    for it in range(iterations):
        w_inv = np.linalg.inv(w)
        b_inv = np.linalg.inv(b)
        # E-step: posterior of each speaker variable
        ey = np.zeros((n_spk, d))
        covs = np.zeros((n_spk, d, d))
        for k in range(n_spk):
            z = x[ids == k] - mu
            cov = np.linalg.inv(b_inv + counts[k] * w_inv)
            ey[k] = cov @ (w_inv @ z.sum(axis=0))
            covs[k] = cov
        # M-step
        resid = x - ey[ids]
        mu = resid.mean(axis=0)
        b_new = (ey.T @ ey + covs.sum(axis=0)) / n_spk
        c = resid - mu
        w_new = (c.T @ c + np.einsum("k,kij->ij", counts, covs)) / x.shape[0]
        b = _ensure_pd(b_new, "between_cov")
        w = _ensure_pd(w_new, "within_cov")
        ll = plda_log_likelihood(x, ids, mu, b, w)
        tol = 1e-9 * max(1.0, abs(lls[-1]))
        if ll < lls[-1] - tol:
            raise NumericError(f"PLDA EM log-likelihood decreased at iteration {it + 1}: {lls[-1]} -> {ll}")
        lls.append(ll)
    return PldaModel(mu, b, w, log_likelihoods=tuple(lls))


def plda_score(m: PldaModel, enroll: np.ndarray, test: np.ndarray) -> float:
    return float(m.score_pairs(enroll, test)[0])


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NormalizationError("cosine score of a zero vector")
    return float(np.dot(a, b) / (na * nb))


def euclidean_score(a: np.ndarray, b: np.ndarray) -> float:
    return -float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class BackendConfig:
    lda_dim: int = 100
    plda_iters: int = 10
    scorer: str = "plda"  # plda | cosine | euclidean


def fit_backend(train: Mapping[str, np.ndarray], utt2spk: Mapping[str, str], cfg: BackendConfig) -> PldaModel:
    """Centre on the training set, LDA-project, length-normalise, then fit PLDA."""
    utts = sorted(train)
    x = np.stack([train[u] for u in utts])
    labels = [utt2spk[u] for u in utts]
    center = x.mean(axis=0)
    xc = x - center
    out_dim = min(cfg.lda_dim, x.shape[1], len(set(labels)) - 1)
    lda = fit_lda(xc, labels, out_dim)
    proj = length_normalize(xc @ lda)
    m = fit_plda(proj, labels, cfg.plda_iters)
    m.lda_matrix = lda
    m.center = center
    return m


def _lookup(embeddings: Mapping[str, np.ndarray], trials: Sequence[Trial]) -> tuple[np.ndarray, np.ndarray]:
    for tr in trials:
        for u in (tr.enroll_id, tr.test_id):
            if u not in embeddings:
                raise LookupFailure(f"no embedding for utterance {u!r}")
    first = np.stack([embeddings[t.enroll_id] for t in trials])
    second = np.stack([embeddings[t.test_id] for t in trials])
    return first, second


def score_trials(
    trials: Sequence[Trial],
    embeddings: Mapping[str, np.ndarray],
    scorer: str = "plda",
    model: PldaModel | None = None,
    system: str = "",
) -> TrialScoreSet:
    if not trials:
        return TrialScoreSet([], np.zeros(0), system)
    first, second = _lookup(embeddings, trials)
    if scorer == "plda":
        if model is None:
            raise PreconditionError("PLDA scoring needs a fitted model")
        scores = model.score_pairs(model.transform(first), model.transform(second))
    elif scorer == "cosine":
        scores = np.array([cosine_score(a, b) for a, b in zip(first, second)])
    elif scorer == "euclidean":
        scores = np.array([euclidean_score(a, b) for a, b in zip(first, second)])
    else:
        raise PreconditionError(f"unknown scorer {scorer!r}")
    return TrialScoreSet(list(trials), scores, system)


def znorm(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    sd = scores.std()
    return (scores - scores.mean()) / sd if sd > 0 else scores - scores.mean()


def fuse_scores(sets: Sequence[TrialScoreSet], weights: Sequence[float] | None = None,
                system: str = "fusion") -> TrialScoreSet:
    """Weighted mean of per-system z-normalised scores, rows in the first set's order."""
    if not sets:
        raise FusionError("nothing to fuse")
    weights = np.full(len(sets), 1.0 / len(sets)) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(sets),) or weights.sum() <= 0:
        raise FusionError(f"need {len(sets)} weights with a positive sum, got {weights.tolist()}")
    weights = weights / weights.sum()
    ref = sets[0]
    ref_keys = set(ref.keys)
    for s in sets[1:]:
        keys = set(s.keys)
        if keys != ref_keys:
            missing = sorted(ref_keys - keys)[:3] + sorted(keys - ref_keys)[:3]
            raise FusionError(f"trial keys differ between {ref.system!r} and {s.system!r}: e.g. {missing}")
    fused = np.zeros(len(ref))
    for wgt, s in zip(weights, sets):
        z = znorm(s.scores)
        fused += wgt * np.array([z[s._index[k]] for k in ref.keys])
    return TrialScoreSet(list(ref.trials), fused, system)

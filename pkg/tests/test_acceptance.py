"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run just this file with ``pytest -s tests/test_acceptance.py`` (the lines are also
printed when output is captured, since they bypass capture).
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

import goldens
from oracles import (
    det_points_bruteforce,
    eer_bruteforce,
    input_grad_error,
    min_dcf_bruteforce,
    param_grad_errors,
)
from tripletsv import pipeline
from tripletsv import tensor as T
from tripletsv.backend import PldaModel, fit_plda, plda_score
from tripletsv.cli import main
from tripletsv.config import load_config
from tripletsv.losses import LossWeights, TripletBatch, cross_entropy, joint_loss, similarity_bce, triplet_loss
from tripletsv.metrics import det_from_scores, eer, export_det, min_dcf16, read_det_csv
from tripletsv.simnet import SimilarityNet, SimNetConfig
from tripletsv.systems import GRID
from tripletsv.xvector import XVectorConfig, XVectorNet

GOLDEN = Path(__file__).parent / "golden"


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# 1. gradients


def _op_cases(rng):
    pos = lambda: rng.uniform(0.5, 2.0, size=(3, 4))  # noqa: E731
    nrm = lambda: rng.normal(size=(3, 4))  # noqa: E731
    w = rng.normal(size=(3, 4))
    relu_x = nrm()
    relu_x[np.abs(relu_x) < 1e-2] = 0.3
    signed = pos() * rng.choice([-1, 1], size=(3, 4))
    stats = T.BatchNormStats(np.zeros(4), np.ones(4))
    bn_stats = T.BatchNormStats(rng.normal(size=4), rng.uniform(0.5, 2, size=4))
    rows = np.array([2, 0, 2, 1])
    mm = rng.normal(size=(3, 2))
    wsum = lambda t: T.sum(T.mul(t, w))  # noqa: E731
    return {
        "add": (lambda a, b: wsum(T.add(a, b)), [nrm(), nrm()]),
        "sub": (lambda a, b: wsum(T.sub(a, b)), [nrm(), nrm()]),
        "mul": (lambda a, b: wsum(T.mul(a, b)), [nrm(), nrm()]),
        "div": (lambda a, b: wsum(T.div(a, b)), [nrm(), signed]),
        "add-broadcast": (lambda a, b: wsum(T.add(a, b)), [nrm(), rng.normal(size=4)]),
        "scale": (lambda a: wsum(T.scale(a, -2.5)), [nrm()]),
        "relu": (lambda a: wsum(T.relu(a)), [relu_x]),
        "sigmoid": (lambda a: wsum(T.sigmoid(a)), [nrm()]),
        "tanh": (lambda a: wsum(T.tanh(a)), [nrm()]),
        "exp": (lambda a: wsum(T.exp(a)), [nrm()]),
        "log": (lambda a: wsum(T.log(a)), [pos()]),
        "sqrt": (lambda a: wsum(T.sqrt(a)), [pos()]),
        "square": (lambda a: wsum(T.square(a)), [nrm()]),
        "softplus": (lambda a: wsum(T.softplus(a)), [nrm()]),
        "sum": (lambda a: T.sum(T.mul(T.sum(a, axis=0), w[0])), [nrm()]),
        "mean": (lambda a: T.sum(T.mul(T.mean(a, axis=1), w[:, 0])), [nrm()]),
        "stddev": (lambda a: T.sum(T.mul(T.stddev(a, axis=0), w[0])), [nrm()]),
        "log_softmax": (lambda a: wsum(T.log_softmax(a, axis=1)), [nrm()]),
        "matmul": (lambda a, b: T.sum(T.mul(T.matmul(a, b), mm)), [nrm(), rng.normal(size=(4, 2))]),
        "reshape": (lambda a: T.sum(T.mul(T.reshape(a, (4, 3)), w.reshape(4, 3))), [nrm()]),
        "concat": (lambda a, b: T.sum(T.mul(T.concat([a, b], axis=1), np.hstack([w, w]))), [nrm(), nrm()]),
        "slice": (lambda a: T.sum(T.mul(T.slice(a, 1, 1, 3), w[:, 1:3])), [nrm()]),
        "take": (lambda a: T.sum(T.mul(T.take(a, rows), w[np.array([0, 1, 2, 0])])), [nrm()]),
        "batchnorm-train": (lambda a, g, b: wsum(T.batchnorm(a, g, b, stats, True)),
                            [nrm(), rng.uniform(0.5, 2, 4), rng.normal(size=4)]),
        "batchnorm-eval": (lambda a, g, b: wsum(T.batchnorm(a, g, b, bn_stats, False)),
                           [nrm(), rng.uniform(0.5, 2, 4), rng.normal(size=4)]),
    }


def test_criterion_1_gradients(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    op_err = {name: input_grad_error(build, arrays) for name, (build, arrays) in _op_cases(rng).items()}
    worst_op = max(op_err, key=op_err.get)

    xcfg = XVectorConfig(num_speakers=5, scale_factor=0.01)
    xnet = XVectorNet(xcfg, np.random.default_rng(1))
    x, labels = rng.normal(size=(4, 22, 23)), [0, 1, 2, 4]
    x_err = param_grad_errors(lambda: cross_entropy(xnet.forward(x, train=True).logits, labels), xnet.params, rng)
    scfg = SimNetConfig(input_dim=512, lstm_hidden=1024, fc_dims=(512, 512), scale_factor=0.05)
    snet = SimilarityNet(scfg, np.random.default_rng(2))
    first, second = rng.normal(size=(6, scfg.in_width)), rng.normal(size=(6, scfg.in_width))
    pair_labels = [1, 0, 1, 0, 0, 1]
    s_err = param_grad_errors(lambda: similarity_bce(snet.forward(first, second, train=True), pair_labels),
                              snet.params, rng)
    elapsed = time.perf_counter() - start
    e2e = max(max(x_err.values()), max(s_err.values()))
    ok = op_err[worst_op] < 1e-4 and e2e < 1e-3 and elapsed < 60
    report(capsys, 1, ok, f"{len(op_err)} ops, worst {worst_op} {op_err[worst_op]:.1e} (<1e-4); "
                          f"x-vector {max(x_err.values()):.1e}, simnet {max(s_err.values()):.1e} (<1e-3); "
                          f"{elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------------------
# 2. metric oracles


def _random_set(rng, max_trials):
    n = int(rng.integers(4, max_trials + 1))
    n_t = int(rng.integers(1, n))
    tgt, non = rng.normal(rng.uniform(-1, 3), 1, n_t), rng.normal(0, 1, n - n_t)
    if rng.random() < 0.3:
        tgt, non = np.round(tgt, 1), np.round(non, 1)
    return tgt, non


def test_criterion_2_metric_oracles(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        tgt, non = _random_set(rng, 500)
        c = det_from_scores(tgt, non)
        worst = max(worst, abs(eer(c) - eer_bruteforce(tgt, non)), abs(min_dcf16(c) - min_dcf_bruteforce(tgt, non)))
    elapsed = time.perf_counter() - start
    report(capsys, 2, worst < 1e-12 and elapsed < 30,
           f"100 sets, max |diff| {worst:.1e} (<1e-12), {elapsed:.1f}s (<30s)")


# ---------------------------------------------------------------------------
# 3. PLDA


def test_criterion_3_plda(capsys):
    rng = np.random.default_rng(0)
    b, w = np.diag([4.0, 1.0]), np.array([[1.0, 0.3], [0.3, 0.8]])
    y = rng.multivariate_normal(np.zeros(2), b, size=200)
    x = np.repeat(y, 10, axis=0) + rng.multivariate_normal(np.zeros(2), w, size=2000)
    m = fit_plda(x, np.repeat(np.arange(200), 10))
    eb = np.linalg.norm(m.between_cov - b) / np.linalg.norm(b)
    ew = np.linalg.norm(m.within_cov - w) / np.linalg.norm(w)
    # 1-D model B=W=1: LLR = log N([x1,x2]; 0, [[2,1],[1,2]]) - log N(.; 0, 2I), written out
    one = PldaModel(np.zeros(1), np.eye(1), np.eye(1))
    worst = 0.0
    for x1, x2 in [(1.0, 1.0), (0.3, -2.0), (-1.5, 0.7), (2.2, 0.0)]:
        same = -math.log(2 * math.pi) - 0.5 * math.log(3.0) - (2 * x1 * x1 - 2 * x1 * x2 + 2 * x2 * x2) / 6.0
        diff = -math.log(2 * math.pi) - 0.5 * math.log(4.0) - (x1 * x1 + x2 * x2) / 4.0
        worst = max(worst, abs(plda_score(one, np.array([x1]), np.array([x2])) - (same - diff)))
    ok = eb < 0.15 and ew < 0.15 and worst < 1e-10
    report(capsys, 3, ok, f"B err {eb:.3f}, W err {ew:.3f} (<0.15); 1-D closed form diff {worst:.1e} (<1e-10)")


# ---------------------------------------------------------------------------
# 4. loss identities


def test_criterion_4_loss_identities(capsys):
    rng = np.random.default_rng(4)
    a = rng.normal(size=(5, 6))
    d = rng.normal(size=(5, 6))
    # positive and negative are mirror images around the anchor, so d(a,p) == d(a,n)
    tl = triplet_loss(TripletBatch(T.Tensor(a), T.Tensor(a + d), T.Tensor(a - d))).item()
    ce, tri, sim = T.Tensor(1.7), T.Tensor(0.45), T.Tensor(0.62)
    jl = joint_loss(ce, tri, sim, LossWeights(1.0, 0.1, 0.3)).item()
    hand = 1.0 * 1.7 + 0.1 * 0.45 + 0.3 * 0.62
    ce_err = max(abs(cross_entropy(T.Tensor(np.full((3, n), 0.37)), [0, n - 1, n // 2]).item() - math.log(n))
                 for n in range(2, 65))
    ok = abs(tl - 0.8) < 1e-12 and abs(jl - hand) < 1e-12 and ce_err < 1e-12
    report(capsys, 4, ok, f"triplet at equal distances {tl:.12f} (=0.8); joint {jl:.12f} vs {hand:.12f}; "
                          f"CE uniform max |ln N diff| {ce_err:.1e}")


# ---------------------------------------------------------------------------
# 5. qualitative ordering at desk scale

SEEDS = range(5)
CRIT5_SYSTEMS = ("2", "3", "4", "5", "10")  # baseline, simnet, triplet, joint, fusion of 3+4
CPU_BUDGET_S = 600


def _desk_run(seed, out):
    """The desk-scale configuration: 50x40 train, 20 eval speakers, scale 0.125 (the config defaults)."""
    cfg = load_config(env={}, overrides={("experiment", "seed"): seed, ("paths", "out"): str(out),
                                         ("experiment", "systems"): CRIT5_SYSTEMS})
    assert (cfg.get("synth", "train_speakers"), cfg.get("synth", "train_utts"),
            cfg.get("synth", "eval_speakers"), cfg.scale) == (50, 40, 20, 0.125)
    pipeline.gen_data(cfg)
    pipeline.featurize(cfg)
    data = {split: pipeline.load_split(cfg, split) for split in pipeline.SPLITS}
    cpu = {}
    for sid in CRIT5_SYSTEMS:
        s = GRID[sid]
        if s.trained:
            t0 = time.process_time()
            pipeline.train_system(cfg, s, data["train"])
            pipeline.extract_system(cfg, s, data)
            cpu[sid] = time.process_time() - t0
        pipeline.score_system(cfg, s)
    rows = pipeline.evaluate_systems(cfg, [GRID[s] for s in CRIT5_SYSTEMS])
    pool = {r.system[3:]: (r.eer, r.dcf16) for r in rows if r.condition == "pool"}
    return pool, cpu


@pytest.mark.slow
def test_criterion_5_table_ordering(capsys, tmp_path):
    a = b = c = d = 0
    worst_cpu = 0.0
    lines = []
    for seed in SEEDS:
        pool, cpu = _desk_run(seed, tmp_path / f"seed{seed}")
        worst_cpu = max(worst_cpu, max(cpu.values()))
        (be, bd), (se, sd), (te, td), (je, jd), (fe, _) = (pool[s] for s in CRIT5_SYSTEMS)
        a += te < be
        b += sd < bd
        c += je <= be and jd <= bd
        d += fe <= min(se, te) + 0.3
        lines.append(f"    seed {seed}: base {be:.2f}/{bd:.3f} simnet {se:.2f}/{sd:.3f} triplet {te:.2f}/{td:.3f} "
                     f"joint {je:.2f}/{jd:.3f} fuse3+4 {fe:.2f}  cpu max {max(cpu.values()):.0f}s")
    with capsys.disabled():
        print("\n" + "\n".join(lines))
    parts = {"a": a, "b": b, "c": c, "d": d}
    ok = all(v >= 4 for v in parts.values()) and worst_cpu <= CPU_BUDGET_S
    detail = ", ".join(f"({k}) {v}/5" for k, v in parts.items()) + f"; max CPU per system {worst_cpu:.0f}s (<=600s)"
    report(capsys, 5, ok, detail)


# ---------------------------------------------------------------------------
# 6. determinism

TINY = """\
[synth]
train_speakers = 6
train_utts = 5
eval_speakers = 4
eval_utts = 4
nontarget_ratio = 1
duration_min = 2
duration_max = 3

[train]
steps_per_epoch = 4
batch_triplets = 3
chunk_min = 40
chunk_max = 60

[backend]
lda_dim = 8
"""


def test_criterion_6_run_all_determinism(capsys, tmp_path):
    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY)
    sums = []
    for run in ("first", "second"):
        out = tmp_path / run
        rc = main(["--config", str(ini), "--out", str(out), "--seed", "7", "run-all"])
        assert rc == 0
        cfg = load_config(ini, env={}, overrides={("paths", "out"): str(out)})
        sums.append(pipeline.report_checksums(cfg))
    capsys.readouterr()
    ok = bool(sums[0]) and sums[0] == sums[1]
    report(capsys, 6, ok, f"{len(sums[0])} report files, checksums {'identical' if ok else 'differ'} across two runs")


# ---------------------------------------------------------------------------
# 7. DET validity


def test_criterion_7_det_validity(capsys, tmp_path):
    rng = np.random.default_rng(7)
    bad_mono = bad_rt = 0
    for i in range(1000):
        tgt, non = _random_set(rng, 200)
        c = det_from_scores(tgt, non)
        mono = (np.all(np.diff(c.p_miss) >= 0) and np.all(np.diff(c.p_fa) <= 0)
                and (c.p_miss[0], c.p_fa[0], c.p_miss[-1], c.p_fa[-1]) == (0, 1, 1, 0)
                and np.all((c.p_miss >= 0) & (c.p_miss <= 1) & (c.p_fa >= 0) & (c.p_fa <= 1))
                and list(c.rows()) == det_points_bruteforce(tgt, non))
        bad_mono += not mono
        csv_path, _ = export_det(c, tmp_path / "det")
        back = read_det_csv(csv_path)
        bad_rt += eer(back) != eer(c) or min_dcf16(back) != min_dcf16(c)
    ok = bad_mono == 0 and bad_rt == 0
    report(capsys, 7, ok, f"1000 sets: {bad_mono} monotonicity violations, {bad_rt} CSV round-trip mismatches")


# ---------------------------------------------------------------------------
# 8. goldens


def test_criterion_8_goldens(capsys):
    built = goldens.build_all()
    expected = {"sine440.feat", "params.ckpt", "scores.txt", "report.csv", "det.svg"}
    mismatched = [name for name, blob in sorted(built.items()) if (GOLDEN / name).read_bytes() != blob]
    ok = set(built) == expected and not mismatched
    report(capsys, 8, ok, f"{len(built)} golden files, mismatched: {', '.join(mismatched) or 'none'}")

"""File-backed pipeline stages. Each stage reads the previous stage's artifacts from disk.

Layout under the configured directories::

    corpus/{train,eval}/      wav/, manifest.txt, spk2lang.txt (+ eval/trials.txt)
    features/{train,eval}/    <utt>.feat, utt2spk.txt
    checkpoints/sysN/         final.ckpt, final.json, train_log.csv
    embeddings/sysN/          train.emb, eval.emb
    scores/sysN.txt
    reports/                  report.csv, report.txt, comparison.txt, det/, hist/
"""
from __future__ import annotations

import hashlib
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .backend import fit_backend, fuse_scores, score_trials
from .config import ExperimentConfig, dump_config
from .errors import MissingArtifactError, TripletSVError
from .features import extract_features, load_features, load_utterance, read_manifest, save_features
from .metrics import (
    det_curve,
    det_svg,
    evaluate,
    export_det,
    export_report,
    histogram_csv,
    report_csv,
    score_histogram,
)
from .simnet import score_trials as simnet_score_trials
from .synth import Corpus, augment, generate_corpus, make_trials, quantize, write_corpus
from .systems import GRID, SystemSpec, parse_systems
from .trainer import CorpusIndex, load_model, train
from .trials import TrialScoreSet, read_scores, read_trials, write_scores, write_trials
from .xvector import XVectorConfig, embedding_map, extract_embeddings, read_embeddings_binary, write_embeddings_binary

log = logging.getLogger(__name__)

SPLITS = ("train", "eval")


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run `{producer}` first")
    return path


def selected_systems(cfg: ExperimentConfig, tokens: Sequence[str] | None = None) -> list[SystemSpec]:
    return parse_systems(tokens or cfg.get("experiment", "systems"))


# ---------------------------------------------------------------------------
# gen-data / featurize


def gen_data(cfg: ExperimentConfig) -> dict[str, Path]:
    """Synthesise train and eval corpora and the keyed eval trial list."""
    s = cfg.values["synth"]
    train_spec, eval_spec = cfg.synth_specs()
    train_c, eval_c = generate_corpus(train_spec), generate_corpus(eval_spec)
    records = quantize(train_c.records)
    if s["augment_copies"]:
        records = quantize(augment(records, (s["augment_snr_min"], s["augment_snr_max"]), s["augment_copies"],
                                   seed=cfg.seed, kind=s["augment_kind"]))
    eval_records = quantize(eval_c.records)
    # trial construction can fail on a too-small corpus; do it before writing anything
    trials = make_trials(eval_records, s["targets_per_speaker"], s["nontarget_ratio"], seed=cfg.seed)
    root = cfg.path("corpus")
    out = {"train": write_corpus(root / "train", Corpus(records, train_c.speakers))}
    out["eval"] = write_corpus(root / "eval", Corpus(eval_records, eval_c.speakers))
    out["trials"] = root / "eval" / "trials.txt"
    write_trials(out["trials"], trials)
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "config.ini").write_text(dump_config(cfg))
    return out


def featurize(cfg: ExperimentConfig) -> dict[str, int]:
    """MFCC + VAD + CMN for every manifest entry; utterances with no voiced frames are skipped."""
    counts = {}
    for split in SPLITS:
        manifest = _need(cfg.path("corpus") / split / "manifest.txt", "gen-data")
        out_dir = cfg.path("features") / split
        kept = []
        for utt, spk, wav in read_manifest(manifest):
            wav_path = Path(wav) if Path(wav).is_absolute() else manifest.parent / wav
            try:
                f = extract_features(load_utterance(utt, spk, wav_path))
            except TripletSVError as exc:
                log.warning("featurize: skipping %s: %s", utt, exc)
                continue
            save_features(out_dir / f"{utt}.feat", f)
            kept.append(f"{utt} {spk}\n")
        (out_dir / "utt2spk.txt").write_text("".join(kept))
        counts[split] = len(kept)
    return counts


def read_utt2spk(cfg: ExperimentConfig, split: str) -> dict[str, str]:
    listing = _need(cfg.path("features") / split / "utt2spk.txt", "featurize")
    utt2spk = {}
    for line in listing.read_text().splitlines():
        if line.strip():
            utt, spk = line.split()
            utt2spk[utt] = spk
    return utt2spk


def load_split(cfg: ExperimentConfig, split: str):
    d = cfg.path("features") / split
    utt2spk = read_utt2spk(cfg, split)
    feats = {u: load_features(_need(d / f"{u}.feat", "featurize"), u) for u in utt2spk}
    return feats, utt2spk


# ---------------------------------------------------------------------------
# train / extract / score


def train_system(cfg: ExperimentConfig, sys: SystemSpec, train_data=None) -> Path:
    feats, utt2spk = train_data or load_split(cfg, "train")
    idx = CorpusIndex.from_pairs(sorted(utt2spk.items()), seed=cfg.seed)
    xcfg = XVectorConfig(num_speakers=idx.num_speakers, scale_factor=cfg.scale)
    tcfg = cfg.train_config(sys.beta, sys.gamma, sys.layer)
    out_dir = cfg.path("checkpoints") / sys.name
    train(sys.kind, idx, feats, tcfg, xcfg, out_dir)
    return out_dir / "final.ckpt"


def _model_path(cfg: ExperimentConfig, sys: SystemSpec) -> Path:
    return _need(cfg.path("checkpoints") / sys.name / "final.ckpt", f"train --system {sys.id}")


def extract_system(cfg: ExperimentConfig, sys: SystemSpec, data=None) -> dict[str, Path]:
    xnet, _, _ = load_model(_model_path(cfg, sys))
    out = {}
    for split in SPLITS:
        feats, _ = (data or {}).get(split) or load_split(cfg, split)
        errors: dict[str, str] = {}
        emb = extract_embeddings(feats, xnet, sys.layer, errors)
        out[split] = cfg.path("embeddings") / sys.name / f"{split}.emb"
        write_embeddings_binary(out[split], emb)
    return out


def _embeddings(cfg: ExperimentConfig, sys: SystemSpec, split: str) -> dict[str, np.ndarray]:
    path = _need(cfg.path("embeddings") / sys.name / f"{split}.emb", f"extract --system {sys.id}")
    return embedding_map(read_embeddings_binary(path, sys.layer))


def trials_path(cfg: ExperimentConfig) -> Path:
    return cfg.path("corpus") / "eval" / "trials.txt"


def score_path(cfg: ExperimentConfig, sys: SystemSpec) -> Path:
    return cfg.path("scores") / f"{sys.name}.txt"


def score_system(cfg: ExperimentConfig, sys: SystemSpec) -> Path:
    out = score_path(cfg, sys)
    if sys.kind == "fusion":
        parts = [read_scores(_need(score_path(cfg, GRID[m]), f"score --system {m}"), GRID[m].name)
                 for m in sys.fuse]
        write_scores(out, fuse_scores(parts, system=sys.name))
        return out
    trials = read_trials(_need(trials_path(cfg), "gen-data"))
    evl = _embeddings(cfg, sys, "eval")
    bcfg = cfg.backend_config()
    if bcfg.scorer == "simnet":
        _, snet, _ = load_model(_model_path(cfg, sys))
        scores = simnet_score_trials(trials, evl, snet, sys.name)
    else:
        model = None
        if bcfg.scorer == "plda":
            utt2spk = read_utt2spk(cfg, "train")
            tr = _embeddings(cfg, sys, "train")
            model = fit_backend(tr, {u: utt2spk[u] for u in tr}, bcfg)
        scores = score_trials(trials, evl, bcfg.scorer, model, sys.name)
    write_scores(out, scores)
    return out


# ---------------------------------------------------------------------------
# evaluate / fuse / report


def keyed_scores(score_file: Path, trials_file: Path, system: str | None = None) -> TrialScoreSet:
    s = read_scores(score_file, system)
    return s.with_keys(read_trials(trials_file))


def evaluate_files(score_files: Sequence[Path], trials_file: Path, names: Sequence[str] | None = None):
    rows = []
    for i, f in enumerate(score_files):
        rows.extend(evaluate(keyed_scores(f, trials_file, names[i] if names else None)))
    return rows


def format_rows(rows) -> str:
    return "".join(f"{r.system} {r.condition} EER {r.eer:.2f} DCF16 {r.dcf16:.3f}\n" for r in rows)


def evaluate_systems(cfg: ExperimentConfig, systems: Sequence[SystemSpec]):
    tfile = _need(trials_path(cfg), "gen-data")
    files = [_need(score_path(cfg, s), f"score --system {s.id}") for s in systems]
    rows = evaluate_files(files, tfile, [s.name for s in systems])
    out = cfg.path("reports")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(rows))
    return rows


def fuse_files(score_files: Sequence[Path], weights: Sequence[float] | None = None,
               system: str = "fusion") -> TrialScoreSet:
    sets = [read_scores(f) for f in score_files]
    return fuse_scores(sets, weights, system)


def comparison_table(rows, systems: Sequence[SystemSpec]) -> str:
    """Pooled EER/DCF16 per system with the change relative to the baseline."""
    pool = {r.system: r for r in rows if r.condition == "pool"}
    base = pool.get(GRID["2"].name)
    lines = [f"{'id':>3}  {'system':<40} {'EER(%)':>7} {'DCF16':>7} {'dEER':>7} {'dDCF16':>7}"]
    for s in systems:
        r = pool[s.name]
        if base is not None:
            delta = f"{r.eer - base.eer:+7.2f} {r.dcf16 - base.dcf16:+7.3f}"
        else:
            delta = f"{'-':>7} {'-':>7}"
        lines.append(f"{s.id:>3}  {s.description:<40} {r.eer:7.2f} {r.dcf16:7.3f} {delta}")
    return "\n".join(lines) + "\n"


def report(cfg: ExperimentConfig, systems: Sequence[SystemSpec]) -> dict[str, Path]:
    tfile = _need(trials_path(cfg), "gen-data")
    out = cfg.path("reports")
    rows, curves = [], []
    bins = cfg.get("report", "bins")
    for s in systems:
        keyed = keyed_scores(_need(score_path(cfg, s), f"score --system {s.id}"), tfile, s.name)
        rows.extend(evaluate(keyed))
        c = det_curve(keyed)
        curves.append((s.name, c))
        export_det(c, out / "det" / s.name, s.name)
        hist = out / "hist" / f"{s.name}.csv"
        hist.parent.mkdir(parents=True, exist_ok=True)
        hist.write_text(histogram_csv(*score_histogram(keyed, bins)))
    csv_path, txt_path = export_report(rows, out)
    (out / "det" / "all.svg").write_text(det_svg(curves))
    comp = out / "comparison.txt"
    comp.write_text(comparison_table(rows, systems))
    return {"csv": csv_path, "txt": txt_path, "comparison": comp}


def run_all(cfg: ExperimentConfig, systems: Sequence[SystemSpec] | None = None) -> dict[str, Path]:
    systems = list(systems or selected_systems(cfg))
    gen_data(cfg)
    featurize(cfg)
    for s in systems:
        if s.trained:
            train_system(cfg, s)
            extract_system(cfg, s)
        score_system(cfg, s)
    evaluate_systems(cfg, systems)
    return report(cfg, systems)


def report_checksums(cfg: ExperimentConfig) -> dict[str, str]:
    """sha256 of every file under the reports directory (relative path -> digest)."""
    root = cfg.path("reports")
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}

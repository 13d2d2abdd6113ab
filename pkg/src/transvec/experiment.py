"""Evaluation reports and the multi-seed variant comparison.

Figures are rendered with the non-interactive Agg backend so reports can be
produced on machines without a display.
"""
from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backend import backend_fit
from .config import Config
from .corpus import CorpusParams, FeatureSequence, build_corpus
from .embedder import FreezeMask, LidHyper, LidModel, StreamVariant, extract_embeddings, train_lid
from .metrics import TrialSet, accuracy, cavg, confusion
from .numkit import make_rng
from .transducer import TransducerModel, train_rnnt

log = logging.getLogger(__name__)


def corpus_params(cfg: Config) -> CorpusParams:
    c = dict(cfg["corpus"])
    c["crops"] = tuple(int(v) for v in str(c["crops"]).split(",") if v.strip())
    return CorpusParams(**c)


def lid_hyper(cfg: Config, seed: int | None = None) -> LidHyper:
    lid = cfg["lid"]
    keys = ("epochs", "batch_size", "lr", "clip", "train_crop", "time_masks", "max_time_mask", "freq_masks",
            "max_freq_mask")
    return LidHyper(**{k: lid[k] for k in keys}, seed=cfg["run"]["seed"] if seed is None else seed)


def condition_of(split: str) -> tuple[str, str]:
    """``test_200`` -> (``test``, ``200``); ``shift_full`` -> (``shift``, ``full``)."""
    domain, _, dur = split.partition("_")
    return domain, dur or "full"


def _dur_key(dur: str) -> tuple[int, int]:
    return (1, 0) if dur == "full" else (0, int(dur))


# -- per-split evaluation -------------------------------------------------------

@dataclass
class EvalRow:
    split: str
    n: int
    accuracy: float
    cavg: float


def evaluate_trials(named: dict[str, TrialSet], p_target: float = 0.5) -> list[EvalRow]:
    return [EvalRow(name, len(t.truth), accuracy(t), cavg(t, p_target)) for name, t in sorted(named.items())]


def write_rows(path, rows: Sequence[EvalRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["split", "domain", "duration", "n", "accuracy", "cavg"])
        for r in rows:
            domain, dur = condition_of(r.split)
            w.writerow([r.split, domain, dur, r.n, f"{r.accuracy:.4f}", f"{r.cavg:.4f}"])


def format_rows(rows: Sequence[EvalRow]) -> str:
    lines = [f"{'split':<14}{'n':>6}{'acc':>9}{'Cavg':>9}"]
    lines += [f"{r.split:<14}{r.n:>6}{r.accuracy:>9.4f}{r.cavg:>9.4f}" for r in rows]
    return "\n".join(lines)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_cavg_by_duration(rows: Sequence[EvalRow], path, title: str = "Cavg by test duration") -> None:
    plt = _pyplot()
    by_domain: dict[str, dict[str, float]] = {}
    for r in rows:
        domain, dur = condition_of(r.split)
        if domain in ("test", "shift"):
            by_domain.setdefault(domain, {})[dur] = r.cavg
    durs = sorted({d for v in by_domain.values() for d in v}, key=_dur_key)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(by_domain), 1)
    for k, (domain, vals) in enumerate(sorted(by_domain.items())):
        xs = np.arange(len(durs)) + k * width
        ax.bar(xs, [vals.get(d, np.nan) for d in durs], width, label=domain)
    ax.set_xticks(np.arange(len(durs)) + width * (len(by_domain) - 1) / 2)
    ax.set_xticklabels(durs)
    ax.set_xlabel("frames")
    ax.set_ylabel("Cavg")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_confusion(trials: TrialSet, path, title: str = "confusion") -> None:
    plt = _pyplot()
    c = confusion(trials)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(c, cmap="Blues")
    for i in range(c.shape[0]):
        for j in range(c.shape[1]):
            ax.text(j, i, str(c[i, j]), ha="center", va="center", fontsize=8)
    ax.set_xlabel("decided")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- multi-seed variant comparison ------------------------------------------------

@dataclass
class AblationResult:
    """``cavg[variant][seed][split]`` plus timing and the pretraining record."""
    cavg: dict[str, dict[int, dict[str, float]]]
    accuracy: dict[str, dict[int, dict[str, float]]]
    rnnt_history: list[dict]
    seconds: float

    def mean_cavg(self, variant: str, splits: Sequence[str]) -> float:
        per_seed = self.cavg[variant]
        return float(np.mean([per_seed[s][sp] for s in per_seed for sp in splits]))

    def seed_cavg(self, variant: str, splits: Sequence[str]) -> dict[int, float]:
        return {s: float(np.mean([v[sp] for sp in splits])) for s, v in self.cavg[variant].items()}

    def rows(self) -> list[tuple[str, int, str, float, float]]:
        out = []
        for v in self.cavg:
            for seed in self.cavg[v]:
                for split, c in sorted(self.cavg[v][seed].items()):
                    out.append((v, seed, split, c, self.accuracy[v][seed][split]))
        return out


def _scores(model: LidModel, backend, utts: Sequence[FeatureSequence]) -> TrialSet:
    embs = extract_embeddings(model, utts)
    return TrialSet([e.utt_id for e in embs], [e.lang for e in embs], backend.score(np.stack([e.values for e in embs])))


def run_ablation(cfg: Config, variants: Sequence[StreamVariant], seeds: Sequence[int], eval_splits: Sequence[str],
                 corpus: dict[str, list[FeatureSequence]] | None = None, backend_stride: int = 2,
                 progress: Callable[[str], None] | None = None) -> AblationResult:
    """Pretrain one transducer, then train and score every variant for every LID seed.

    The transducer is shared across seeds and variants; each LID run starts
    from a fresh copy of it. The back-end is fit on every ``backend_stride``-th
    training utterance.
    """
    t0 = time.time()
    say = progress or log.info
    params = corpus_params(cfg)
    seed = cfg["run"]["seed"]
    if corpus is None:
        corpus = build_corpus(params, seed, cfg["run"]["jobs"])
    m, r = cfg["model"], cfg["rnnt"]
    rnnt = TransducerModel(params.dim, params.n_tokens, make_rng(seed, 50), enc_hidden=m["enc_hidden"],
                           enc_dim=m["enc_dim"], enc_layers=m["enc_layers"], subsample=m["subsample"],
                           pred_embed=m["pred_embed"], pred_hidden=m["pred_hidden"], pred_dim=m["pred_dim"],
                           joint_dim=m["joint_dim"])
    hist = train_rnnt(rnnt, corpus["asr"], corpus["valid"][:20], epochs=r["epochs"], batch_size=r["batch_size"],
                      lr=r["lr"], seed=seed, clip=r["clip"], max_utts=r["max_utts"] or None)
    say(f"transducer pretrained in {time.time() - t0:.0f}s, valid loss {hist[-1]['valid_loss']:.4f}")
    backend_cfg = cfg["backend"]
    cav: dict[str, dict[int, dict[str, float]]] = {}
    acc: dict[str, dict[int, dict[str, float]]] = {}
    for lid_seed in seeds:
        for v in variants:
            t1 = time.time()
            model = LidModel(copy.deepcopy(rnnt), v, params.n_langs, m["head_width"], tau=cfg["lid"]["tau"],
                             seed=lid_seed)
            train_lid(model, corpus["train"], corpus["valid"], FreezeMask.for_variant(v), lid_hyper(cfg, lid_seed))
            train_embs = extract_embeddings(model, corpus["train"][::backend_stride])
            be = backend_fit(np.stack([e.values for e in train_embs]), [e.lang for e in train_embs], params.n_langs,
                             lda_dim=backend_cfg["lda_dim"], mixtures=backend_cfg["mixtures"], l2=backend_cfg["l2"],
                             iters=backend_cfg["iters"], seed=lid_seed)
            for split in eval_splits:
                trials = _scores(model, be, corpus[split])
                cav.setdefault(v.label(), {}).setdefault(lid_seed, {})[split] = cavg(trials, cfg["eval"]["p_target"])
                acc.setdefault(v.label(), {}).setdefault(lid_seed, {})[split] = accuracy(trials)
            res = cav[v.label()][lid_seed]
            say(f"seed {lid_seed} {v.label()}: " + " ".join(f"{k}={res[k]:.4f}" for k in eval_splits)
                + f" ({time.time() - t1:.0f}s)")
    return AblationResult(cav, acc, hist, time.time() - t0)


def write_ablation(result: AblationResult, out_dir, splits: Sequence[str]) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = out_dir / "ablation.tsv"
    with open(tsv, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["variant", "seed", "split", "cavg", "accuracy"])
        for v, seed, split, c, a in result.rows():
            w.writerow([v, seed, split, f"{c:.4f}", f"{a:.4f}"])
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    variants = list(result.cavg)
    width = 0.8 / max(len(variants), 1)
    for k, v in enumerate(variants):
        means = [np.mean([result.cavg[v][s][sp] for s in result.cavg[v]]) for sp in splits]
        ax.bar(np.arange(len(splits)) + k * width, means, width, label=v)
    ax.set_xticks(np.arange(len(splits)) + width * (len(variants) - 1) / 2)
    ax.set_xticklabels(splits, rotation=30)
    ax.set_ylabel("mean Cavg over seeds")
    ax.legend(fontsize=8)
    fig.tight_layout()
    png = out_dir / "ablation.png"
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return {"tsv": tsv, "png": png}

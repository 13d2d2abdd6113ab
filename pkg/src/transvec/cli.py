"""Command-line pipeline driver.

Stages and the artifacts they leave under ``--out``::

    gen-corpus   corpus/{split}.tsv, corpus/features/*.feat
    train-rnnt   rnnt/model.npz
    train-lid    lid/model.npz
    extract      emb/{split}.emb
    backend-fit  backend/model.npz
    score        scores/{split}.tsv
    evaluate     report/results.tsv, report/*.png

Each stage writes ``stage.json`` listing its inputs and outputs and refuses
to start when an earlier stage's artifact is missing.
Exit codes: 0 ok, 2 usage or config error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .backend import Backend, backend_fit, read_scores, write_scores
from .checkpoint import build_lid, build_rnnt, load_arrays, load_lid, load_rnnt, save_arrays, save_lid, save_rnnt
from .config import Config, ConfigError
from .corpus import FormatError, build_corpus, load_manifest, read_manifest, spec_augment, write_corpus
from .embedder import FreezeMask, extract_embeddings, read_embeddings, train_lid, write_embeddings
from .experiment import (corpus_params, evaluate_trials, format_rows, lid_hyper, plot_confusion,
                         plot_cavg_by_duration, run_ablation, write_ablation, write_rows)
from .metrics import TrialSet
from .numkit import EvaluationError
from .transducer import token_accuracy, train_rnnt

log = logging.getLogger("transvec")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class StageError(ConfigError):
    """A stage was run before the stage that produces its input."""


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require(self, rel: str, producer: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise StageError(f"missing artifact {p} (run `transvec {producer}` first)")
        return p

    def stage_record(self, stage: str, inputs: Sequence[Path], outputs: Sequence[Path], **extra) -> None:
        d = self.path(stage)
        d.mkdir(parents=True, exist_ok=True)
        doc = {"stage": stage, "inputs": [str(p.relative_to(self.root)) for p in inputs],
               "outputs": [str(p.relative_to(self.root)) for p in outputs], **extra}
        (d / "stage.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def corpus_splits(self) -> list[str]:
        rec = json.loads(self.require("corpus/stage.json", "gen-corpus").read_text(encoding="utf-8"))
        return rec["splits"]


def _finite(history: Sequence[dict], what: str) -> None:
    for rec in history:
        if not (math.isfinite(rec["train_loss"]) and math.isfinite(rec["valid_loss"])):
            raise EvaluationError(f"{what} loss became non-finite at epoch {rec['epoch']}")


# -- subcommands ------------------------------------------------------------------

def cmd_gen_corpus(cfg: Config, ws: Workspace) -> None:
    params = corpus_params(cfg)
    splits = build_corpus(params, cfg["run"]["seed"], cfg["run"]["jobs"])
    manifests = write_corpus(splits, ws.path("corpus"))
    ws.stage_record("corpus", [], list(manifests.values()), splits=sorted(manifests))
    for name in sorted(splits):
        log.info("corpus %-12s %5d utterances", name, len(splits[name]))


def cmd_train_rnnt(cfg: Config, ws: Workspace) -> None:
    asr = load_manifest(ws.require("corpus/asr.tsv", "gen-corpus"))
    valid = load_manifest(ws.require("corpus/valid.tsv", "gen-corpus"))
    for u in asr + valid:
        if not u.tokens:
            raise ConfigError(f"utterance {u.utt_id} has no transcript; transducer training needs transcripts")
    n_tokens = cfg["corpus"]["n_tokens"]
    if max(max(u.tokens) for u in asr + valid) > n_tokens:
        raise ConfigError(f"transcripts use token ids above [corpus] n_tokens = {n_tokens}")
    model = build_rnnt(cfg, asr[0].frames.shape[1], n_tokens)
    r = cfg["rnnt"]
    augment = None
    if r["time_masks"] or r["freq_masks"]:
        def augment(u, rng):
            return spec_augment(u, r["time_masks"], r["max_time_mask"], r["freq_masks"], r["max_freq_mask"], rng)
    hist = train_rnnt(model, asr, valid, epochs=r["epochs"], batch_size=r["batch_size"], lr=r["lr"],
                      seed=cfg["run"]["seed"], clip=r["clip"], augment=augment, max_utts=r["max_utts"] or None)
    _finite(hist, "transducer")
    acc = token_accuracy(model, valid, tau=cfg["lid"]["tau"])
    log.info("validation token accuracy %.4f", acc)
    out = ws.path("rnnt", "model.npz")
    save_rnnt(out, model, cfg, {"history": hist, "valid_token_accuracy": acc})
    ws.stage_record("rnnt", [ws.path("corpus/asr.tsv"), ws.path("corpus/valid.tsv")], [out])


def cmd_train_lid(cfg: Config, ws: Workspace) -> None:
    ckpt = ws.require("rnnt/model.npz", "train-rnnt")
    train = load_manifest(ws.require("corpus/train.tsv", "gen-corpus"))
    valid = load_manifest(ws.require("corpus/valid.tsv", "gen-corpus"))
    rnnt, _ = load_rnnt(ckpt, cfg)
    n_langs = cfg["corpus"]["n_langs"]
    model = build_lid(cfg, rnnt, n_langs)
    mask = FreezeMask.parse(cfg["lid"]["freeze"], model.variant)
    log.info("training %s with trainable components %s", model.variant.label(),
             [k for k, v in mask.as_dict().items() if v])
    hist = train_lid(model, train, valid, mask, lid_hyper(cfg))
    _finite(hist, "LID")
    out = ws.path("lid", "model.npz")
    save_lid(out, model, cfg, {"history": hist, "mask": mask.as_dict()})
    ws.stage_record("lid", [ckpt, ws.path("corpus/train.tsv")], [out])


def cmd_extract(cfg: Config, ws: Workspace) -> None:
    ckpt = ws.require("lid/model.npz", "train-lid")
    model, _ = load_lid(ckpt, cfg)
    outputs, inputs = [], [ckpt]
    for split in ws.corpus_splits():
        manifest = ws.require(f"corpus/{split}.tsv", "gen-corpus")
        utts = load_manifest(manifest)
        if not utts:
            continue
        embs = extract_embeddings(model, sorted(utts, key=lambda u: u.utt_id))
        out = ws.path("emb", f"{split}.emb")
        out.parent.mkdir(parents=True, exist_ok=True)
        write_embeddings(out, embs)
        inputs.append(manifest)
        outputs.append(out)
        log.info("extracted %d embeddings for %s", len(embs), split)
    ws.stage_record("emb", inputs, outputs)


def _load_emb(path: Path):
    embs = read_embeddings(path)
    return embs, np.stack([e.values.astype(np.float64) for e in embs])


def cmd_backend_fit(cfg: Config, ws: Workspace) -> None:
    src = ws.require("emb/train.emb", "extract")
    embs, x = _load_emb(src)
    b = cfg["backend"]
    backend = backend_fit(x, [e.lang for e in embs], cfg["corpus"]["n_langs"], lda_dim=b["lda_dim"],
                          mixtures=b["mixtures"], l2=b["l2"], iters=b["iters"], seed=cfg["run"]["seed"])
    out = ws.path("backend", "model.npz")
    save_arrays(out, backend.to_arrays(), "backend", {"config": cfg.to_text()})
    ws.stage_record("backend", [src], [out])


def cmd_score(cfg: Config, ws: Workspace) -> None:
    ckpt = ws.require("backend/model.npz", "backend-fit")
    arrays, _ = load_arrays(ckpt, "backend")
    backend = Backend.from_arrays(arrays)
    ws.require("emb/stage.json", "extract")
    outputs, inputs = [], [ckpt]
    for split in ws.corpus_splits():
        src = ws.path("emb", f"{split}.emb")
        if not src.exists():
            continue
        embs, x = _load_emb(src)
        out = ws.path("scores", f"{split}.tsv")
        out.parent.mkdir(parents=True, exist_ok=True)
        write_scores(out, [e.utt_id for e in embs], backend.score(x))
        inputs.append(src)
        outputs.append(out)
    ws.stage_record("scores", inputs, outputs)


def cmd_evaluate(cfg: Config, ws: Workspace) -> None:
    ws.require("scores/stage.json", "score")
    trials = {}
    for split in ws.corpus_splits():
        if not split.startswith(("test", "shift")):
            continue
        src = ws.require(f"scores/{split}.tsv", "score")
        ids, scores = read_scores(src)
        truth = {e.utt_id: e.lang for e in read_manifest(ws.path("corpus", f"{split}.tsv"))}
        missing = [i for i in ids if i not in truth]
        if missing:
            raise FormatError(f"{src}: utterance {missing[0]} is not in the {split} manifest")
        trials[split] = TrialSet(ids, [truth[i] for i in ids], scores)
    rows = evaluate_trials(trials, cfg["eval"]["p_target"])
    report = ws.path("report")
    report.mkdir(parents=True, exist_ok=True)
    write_rows(report / "results.tsv", rows)
    plot_cavg_by_duration(rows, report / "cavg_by_duration.png")
    outputs = [report / "results.tsv", report / "cavg_by_duration.png"]
    if "test_full" in trials:
        plot_confusion(trials["test_full"], report / "confusion_test_full.png", "test_full")
        outputs.append(report / "confusion_test_full.png")
    print(format_rows(rows))
    ws.stage_record("report", [ws.path("scores", "stage.json")], outputs)


def cmd_run(cfg: Config, ws: Workspace) -> None:
    for step in (cmd_gen_corpus, cmd_train_rnnt, cmd_train_lid, cmd_extract, cmd_backend_fit, cmd_score,
                 cmd_evaluate):
        log.info("== %s", step.__name__[4:].replace("_", "-"))
        step(cfg, ws)


def cmd_ablation(cfg: Config, ws: Workspace, variants: str, seeds: str, splits: str) -> None:
    from .checkpoint import variant_from_config
    from .embedder import StreamVariant
    vs = []
    for kind in variants.split(","):
        kind = kind.strip()
        base = variant_from_config(cfg)
        vs.append(StreamVariant(kind, lam=base.lam, alpha=base.alpha))
    seed_list = [int(s) for s in seeds.split(",")]
    split_list = [s.strip() for s in splits.split(",")]
    result = run_ablation(cfg, vs, seed_list, split_list)
    paths = write_ablation(result, ws.path("ablation"), split_list)
    for v in result.cavg:
        print(f"{v:<20} mean Cavg {result.mean_cavg(v, split_list):.4f}")
    log.info("wrote %s and %s", paths["tsv"], paths["png"])


COMMANDS = {
    "gen-corpus": (cmd_gen_corpus, "generate the synthetic corpus"),
    "train-rnnt": (cmd_train_rnnt, "pretrain the transducer on transcribed utterances"),
    "train-lid": (cmd_train_lid, "fine-tune a language-embedding variant"),
    "extract": (cmd_extract, "write embeddings for every corpus split"),
    "backend-fit": (cmd_backend_fit, "fit LDA + length norm + logistic regression"),
    "score": (cmd_score, "write per-language log-posterior score files"),
    "evaluate": (cmd_evaluate, "Cavg and accuracy per split, with figures"),
    "run": (cmd_run, "all stages in order"),
    "ablation": (cmd_ablation, "compare variants over several LID seeds"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="INI config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides [run] seed")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="workspace directory")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="overrides [run] jobs")
    common.add_argument("--set", metavar="SECTION.KEY=VALUE", action="append", default=argparse.SUPPRESS,
                        help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="transvec", parents=[common],
                                     description="Transducer-based language embeddings for spoken LID.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "ablation":
            p.add_argument("--variants", default="encoder,prediction,early,late")
            p.add_argument("--seeds", default="1,2,3,4,5")
            p.add_argument("--splits", default="test_100,test_200,test_300,test_full,shift_full")
    return parser


def resolve_config(args: argparse.Namespace) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    cfg.apply_overrides(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg.set("run", "seed", args.seed)
    if getattr(args, "jobs", None) is not None:
        cfg.set("run", "jobs", args.jobs)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        log.info("resolved config:\n%s", cfg.to_text().rstrip())
        ws = Workspace(getattr(args, "out", "transvec-out"))
        fn = COMMANDS[args.command][0]
        if args.command == "ablation":
            fn(cfg, ws, args.variants, args.seeds, args.splits)
        else:
            fn(cfg, ws)
    except FormatError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (EvaluationError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

import json

import numpy as np
import pytest

from transvec.backend import read_scores
from transvec.checkpoint import load_lid, load_rnnt, params_to_arrays
from transvec.cli import main
from transvec.config import Config, ConfigError
from transvec.corpus import load_manifest
from transvec.transducer import valid_loss


def run(tiny_config, out, *args):
    return main(["--config", str(tiny_config), "--out", str(out), *args])


@pytest.fixture
def pipeline(tiny_config, tmp_path):
    out = tmp_path / "ws"
    for cmd in ("gen-corpus", "train-rnnt", "train-lid", "extract", "backend-fit", "score", "evaluate"):
        assert run(tiny_config, out, cmd) == 0, cmd
    return out


# -- config ---------------------------------------------------------------------

def test_config_round_trip_and_overrides():
    cfg = Config()
    cfg.apply_overrides(["lid.variant=late", "lid.alpha=0.1", "run.seed=3"])
    back = Config.from_text(cfg.to_text())
    assert back.to_dict() == cfg.to_dict()
    assert back["lid"]["alpha"] == 0.1 and back["run"]["seed"] == 3


@pytest.mark.parametrize("bad", ["[lid]\nnope = 1\n", "[nosuch]\nx = 1\n", "[lid]\ntau = three\n", "garbage"])
def test_config_rejects_bad_input(bad):
    with pytest.raises(ConfigError):
        Config.from_text(bad)


def test_override_syntax_checked():
    with pytest.raises(ConfigError):
        Config().apply_overrides(["lid.tau"])


# -- exit codes -------------------------------------------------------------------

def test_usage_errors_exit_2(tmp_path, tiny_config):
    assert main(["frobnicate"]) == 2
    assert run(tiny_config, tmp_path, "--set", "lid.bogus=1", "gen-corpus") == 2
    assert main(["--config", str(tmp_path / "missing.ini"), "gen-corpus"]) == 3


def test_stage_order_enforced(tmp_path, tiny_config, caplog):
    assert run(tiny_config, tmp_path, "train-lid") == 2
    assert "rnnt/model.npz" in caplog.text
    assert run(tiny_config, tmp_path, "score") == 2
    assert "backend/model.npz" in caplog.text


def test_corrupt_features_exit_3(tmp_path, tiny_config):
    assert run(tiny_config, tmp_path, "gen-corpus") == 0
    feat = sorted((tmp_path / "corpus" / "features").glob("asr-*.feat"))[0]
    feat.write_bytes(b"JUNK" + feat.read_bytes()[4:])
    assert run(tiny_config, tmp_path, "train-rnnt") == 3


# -- full pipeline ----------------------------------------------------------------

def test_gen_corpus_counts_and_determinism(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(tiny_config, a, "gen-corpus") == 0
    assert run(tiny_config, b, "--jobs", "2", "gen-corpus") == 0
    assert len(load_manifest(a / "corpus" / "train.tsv")) == 2 * 6
    assert len(load_manifest(a / "corpus" / "test_full.tsv")) == 2 * 3
    for f in sorted((a / "corpus").rglob("*.*")):
        rel = f.relative_to(a)
        if f.name != "stage.json":
            assert f.read_bytes() == (b / rel).read_bytes(), rel


def test_pipeline_artifacts(pipeline, tiny_config, capsys):
    for rel in ("rnnt/model.npz", "lid/model.npz", "emb/train.emb", "backend/model.npz", "scores/test_full.tsv",
                "report/results.tsv", "report/cavg_by_duration.png", "report/confusion_test_full.png"):
        assert (pipeline / rel).exists(), rel
    for stage in ("corpus", "rnnt", "lid", "emb", "backend", "scores", "report"):
        rec = json.loads((pipeline / stage / "stage.json").read_text())
        assert rec["stage"] == stage and rec["outputs"]
    ids, scores = read_scores(pipeline / "scores" / "test_10.tsv")
    assert scores.shape == (6, 2)
    assert np.allclose(np.exp(scores).sum(1), 1.0, atol=1e-5)
    header = (pipeline / "report" / "results.tsv").read_text().splitlines()[0]
    assert header == "split\tdomain\tduration\tn\taccuracy\tcavg"


def test_checkpoint_round_trip(pipeline):
    cfg = Config()
    rnnt, meta = load_rnnt(pipeline / "rnnt" / "model.npz", cfg)
    valid = load_manifest(pipeline / "corpus" / "valid.tsv")
    again, _ = load_rnnt(pipeline / "rnnt" / "model.npz", cfg)
    assert valid_loss(rnnt, valid) == valid_loss(again, valid)
    assert meta["stage"] == "rnnt"
    lid, lmeta = load_lid(pipeline / "lid" / "model.npz")
    arrays = params_to_arrays(lid.params())
    stored = np.load(pipeline / "lid" / "model.npz")
    assert all(np.array_equal(arrays[k], stored[k]) for k in arrays)
    assert lmeta["tau"] == 2 and lmeta["variant"] == "early"


def test_variant_mismatch_refused(pipeline, tiny_config, caplog):
    assert run(tiny_config, pipeline, "--set", "lid.variant=late", "extract") == 2
    assert "trained with" in caplog.text
    assert run(tiny_config, pipeline, "--set", "lid.tau=1", "extract") == 2


def test_pipeline_bit_identical(tiny_config, tmp_path, pipeline):
    other = tmp_path / "again"
    assert run(tiny_config, other, "run") == 0
    for f in sorted((pipeline / "scores").glob("*.tsv")):
        assert f.read_bytes() == (other / "scores" / f.name).read_bytes(), f.name


def test_evaluate_perfect_scores(pipeline, tiny_config, capsys):
    for f in (pipeline / "scores").glob("*.tsv"):
        split = f.stem
        truth = {e.utt_id: e.lang for e in load_manifest(pipeline / "corpus" / f"{split}.tsv")}
        lines = f.read_text().splitlines()
        rows = [lines[0]]
        for line in lines[1:]:
            uid = line.split("\t")[0]
            vals = ["0.000000" if k == truth[uid] else "-9.000000" for k in range(2)]
            rows.append("\t".join([uid] + vals))
        f.write_text("\n".join(rows) + "\n")
    capsys.readouterr()
    assert run(tiny_config, pipeline, "evaluate") == 0
    out = capsys.readouterr().out
    assert "0.0000" in out
    for line in (pipeline / "report" / "results.tsv").read_text().splitlines()[1:]:
        assert line.split("\t")[-1] == "0.0000"

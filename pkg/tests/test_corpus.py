import numpy as np
import pytest

from transvec.corpus import (CorpusParams, DomainShift, FeatureSequence, FormatError, LanguageSpec, ManifestEntry,
                             apply_domain_shift, apply_masks, build_corpus, crop_fixed, gen_language_specs,
                             read_features, read_manifest, sample_tokens, spec_augment, synth_utterance,
                             write_corpus, write_features, write_manifest, load_manifest)
from transvec.numkit import make_rng

SMALL = CorpusParams(n_train=3, n_valid=1, n_test=2, n_asr=2, min_frames=40, max_frames=60, asr_min_frames=20,
                     asr_max_frames=30, crops=(10, 20))


def test_specs_rows_stochastic_and_shared_emissions():
    specs = gen_language_specs(4, 12, 20, 1.0, make_rng(0))
    for s in specs:
        assert np.max(np.abs(s.transition.sum(axis=1) - 1.0)) <= 1e-12
        assert abs(s.initial.sum() - 1.0) <= 1e-12
        assert np.all(np.diag(s.transition) == 0.0)
        assert np.array_equal(s.means, specs[0].means)
        assert np.array_equal(s.stds, specs[0].stds)


def test_zero_divergence_languages_identical():
    specs = gen_language_specs(3, 6, 4, 0.0, make_rng(1))
    for s in specs[1:]:
        assert np.array_equal(s.transition, specs[0].transition)
        assert np.array_equal(s.initial, specs[0].initial)


def test_divergence_two_separates_languages():
    specs = gen_language_specs(4, 12, 20, 2.0, make_rng(2))
    for a in range(4):
        for b in range(a + 1, 4):
            tv = 0.5 * np.abs(specs[a].transition - specs[b].transition).sum(axis=1).mean()
            assert tv > 0.1


def test_spec_validation():
    with pytest.raises(ValueError):
        gen_language_specs(1, 12, 20, 1.0, make_rng(0))
    with pytest.raises(ValueError):
        gen_language_specs(2, 3, 20, 1.0, make_rng(0))


def test_bigram_frequencies_match_transition():
    spec = gen_language_specs(2, 5, 3, 1.0, make_rng(3))[0]
    toks = sample_tokens(spec, 100_000, make_rng(3, 1)) - 1
    counts = np.zeros((5, 5))
    np.add.at(counts, (toks[:-1], toks[1:]), 1)
    empirical = counts / counts.sum(axis=1, keepdims=True)
    assert np.max(np.abs(empirical - spec.transition)) <= 0.02


def test_synth_deterministic_and_sized():
    spec = gen_language_specs(2, 6, 4, 1.0, make_rng(4))[1]
    a = synth_utterance(spec, 137, make_rng(9, 9))
    b = synth_utterance(spec, 137, make_rng(9, 9))
    assert a.frames.shape == (137, 4)
    assert a.frames.dtype == np.float32
    assert np.array_equal(a.frames, b.frames) and a.tokens == b.tokens
    assert a.lang == 1
    assert 137 / 8 <= len(a.tokens) <= 137 / 3 + 1
    with pytest.raises(ValueError):
        synth_utterance(spec, 5, make_rng(0))


def test_zero_std_single_token_frames_equal_mean():
    K, D = 4, 3
    trans = np.full((K, K), 0.0)
    trans[:, 0] = 1.0
    init = np.array([1.0, 0, 0, 0])
    means = np.arange(K * D, dtype=float).reshape(K, D)
    spec = LanguageSpec(0, trans, init, (2, 4), means, np.zeros((K, D)))
    u = synth_utterance(spec, 20, make_rng(0))
    assert np.all(u.frames == means[0])
    assert set(u.tokens) == {1}


def test_domain_shift_cases():
    x = FeatureSequence("u", make_rng(0).normal(size=(50, 3)).astype(np.float32), 2, [1, 2])
    same = apply_domain_shift(x, DomainShift(np.zeros(3), 0.0, 1.0), make_rng(1))
    assert np.array_equal(same.frames, x.frames)
    off = np.array([0.5, -1.0, 2.0])
    moved = apply_domain_shift(x, DomainShift(off, 0.0, 1.0), make_rng(1))
    assert np.allclose(moved.frames - x.frames, off, atol=1e-6)
    assert moved.lang == 2 and moved.tokens == [1, 2]
    half = apply_domain_shift(x, DomainShift(np.zeros(3), 0.0, 0.5), make_rng(1))
    assert abs(half.n_frames - 25) <= 1
    with pytest.raises(ValueError):
        DomainShift(np.zeros(3), 0.0, 3.0)


def test_spec_augment_cases():
    rng = make_rng(5)
    x = FeatureSequence("u", rng.normal(size=(40, 6)).astype(np.float32), 0)
    assert np.array_equal(spec_augment(x, 0, 5, 0, 2, rng).frames, x.frames)
    full = apply_masks(x, [], [(2, 1)])
    assert np.allclose(full.frames[:, 2], x.frames[:, 2].mean(), atol=1e-6)
    for _ in range(20):
        y = spec_augment(x, 2, 5, 2, 2, rng)
        changed = np.sum(y.frames != x.frames)
        assert changed <= 2 * 5 * 6 + 2 * 2 * 40


def test_crop_fixed_cases():
    rng = make_rng(6)
    x = FeatureSequence("u", rng.normal(size=(500, 2)).astype(np.float32), 0, [1, 2, 3])
    c = crop_fixed(x, 100, rng)
    assert c.n_frames == 100
    starts = [i for i in range(401) if np.array_equal(x.frames[i : i + 100], c.frames)]
    assert len(starts) == 1
    assert crop_fixed(x, 500, rng) is x
    assert crop_fixed(x, 900, rng) is x
    with pytest.raises(ValueError):
        crop_fixed(x, 0, rng)


def test_feature_file_round_trip_and_errors(tmp_path):
    frames = make_rng(7).normal(size=(13, 5)).astype(np.float32)
    p = tmp_path / "a.feat"
    write_features(p, frames)
    assert np.array_equal(read_features(p), frames)
    data = bytearray(p.read_bytes())
    data[0:4] = b"XXXX"
    bad = tmp_path / "bad.feat"
    bad.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="byte 0"):
        read_features(bad)
    short = tmp_path / "short.feat"
    short.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError, match="byte"):
        read_features(short)


def test_manifest_round_trip(tmp_path):
    entries = [ManifestEntry("a", "features/a.feat", 0, [1, 2, 3]), ManifestEntry("b", "features/b.feat", 3, [])]
    p = tmp_path / "m.tsv"
    write_manifest(p, entries)
    assert read_manifest(p) == entries
    empty = tmp_path / "e.tsv"
    write_manifest(empty, [])
    assert read_manifest(empty) == []


def test_build_corpus_splits_and_counts():
    c = build_corpus(SMALL, 3)
    assert len(c["train"]) == 4 * 3 and len(c["test_full"]) == 4 * 2 and len(c["asr"]) == 4 * 2
    assert all(u.n_frames == 10 for u in c["test_10"])
    assert all(u.utt_id.startswith("shift-") for u in c["shift_full"])
    assert [u.lang for u in c["shift_20"]] == [u.lang for u in c["test_full"]]
    ids = [u.utt_id for split in c.values() for u in split]
    assert len(ids) == len(set(ids))


def test_build_corpus_order_and_jobs_independent(tmp_path):
    a = build_corpus(SMALL, 3, jobs=1)
    b = build_corpus(SMALL, 3, jobs=2)
    for k in a:
        assert [u.utt_id for u in a[k]] == [u.utt_id for u in b[k]]
        assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a[k], b[k]))
    other = build_corpus(SMALL, 4)
    assert not np.array_equal(a["train"][0].frames, other["train"][0].frames)


def test_write_corpus_round_trip(tmp_path):
    c = build_corpus(SMALL, 3)
    manifests = write_corpus(c, tmp_path)
    back = load_manifest(manifests["train"])
    assert [u.utt_id for u in back] == [u.utt_id for u in c["train"]]
    assert all(np.array_equal(x.frames, y.frames) and x.tokens == y.tokens for x, y in zip(back, c["train"]))

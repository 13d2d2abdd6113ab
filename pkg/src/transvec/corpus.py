"""Synthetic multilingual corpus and feature/manifest file I/O.

Languages share one Gaussian emission table and differ only in their token
transition matrices, so telling them apart requires sequence statistics
rather than frame statistics. Token ids run 1..K (0 is the transducer blank).
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numkit import make_rng, softmax

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1
FRAMES_PER_SECOND = 100

SPLIT_CODES = {"train": 1, "valid": 2, "test": 3, "asr": 4}


class FormatError(ValueError):
    """A binary file failed validation; the message carries the byte offset."""


@dataclass
class LanguageSpec:
    lang: int
    transition: np.ndarray  # (K, K) row-stochastic over token index k-1
    initial: np.ndarray  # (K,)
    dur_range: tuple[int, int]
    means: np.ndarray  # (K, D)
    stds: np.ndarray  # (K, D)

    @property
    def n_tokens(self) -> int:
        return len(self.initial)


@dataclass
class DomainShift:
    offset: np.ndarray
    noise: float = 0.0
    rate: float = 1.0

    def __post_init__(self):
        if not 0.5 <= self.rate <= 2.0:
            raise ValueError(f"rate factor {self.rate} outside [0.5, 2]")
        if self.noise < 0:
            raise ValueError("noise multiplier must be >= 0")


@dataclass
class FeatureSequence:
    utt_id: str
    frames: np.ndarray  # (T, D) float32
    lang: int = -1
    tokens: list[int] | None = None

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass
class ManifestEntry:
    utt_id: str
    path: str
    lang: int
    tokens: list[int] = field(default_factory=list)


def gen_language_specs(n_langs: int, n_tokens: int, dim: int, divergence: float, rng: np.random.Generator,
                       dur_range: tuple[int, int] = (3, 8), emission_std: float = 1.0,
                       transition_scale: float = 1.0, emission_divergence: float = 0.0,
                       self_loops: bool = False) -> list[LanguageSpec]:
    """Sample ``n_langs`` languages around one shared base chain.

    Rows are ``softmax(base + divergence * perturbation)``; divergence 0 makes
    every language identical. Self-transitions are excluded by default since
    two consecutive segments of one token are acoustically a single segment.
    """
    if n_langs < 2 or n_tokens < 4 or dim < 1:
        raise ValueError(f"invalid corpus sizes: n_langs={n_langs}, n_tokens={n_tokens}, dim={dim}")
    if dur_range[0] < 1 or dur_range[1] < dur_range[0]:
        raise ValueError(f"invalid duration range {dur_range}")
    base = rng.normal(size=(n_tokens, n_tokens)) * transition_scale
    base_init = rng.normal(size=n_tokens) * transition_scale
    means = rng.normal(size=(n_tokens, dim))
    stds = rng.uniform(0.8, 1.2, size=(n_tokens, dim)) * emission_std
    specs = []
    for lang in range(n_langs):
        logits = base + divergence * rng.normal(size=base.shape)
        if not self_loops:
            np.fill_diagonal(logits, -np.inf)
        trans = softmax(logits, axis=1)
        trans /= trans.sum(axis=1, keepdims=True)
        init = softmax(base_init + divergence * rng.normal(size=n_tokens))
        lang_means = means + emission_divergence * rng.normal(size=means.shape)
        specs.append(LanguageSpec(lang, trans, init, tuple(dur_range), lang_means, stds.copy()))
    return specs


def sample_tokens(spec: LanguageSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Markov chain of ``n`` token ids (1-based)."""
    K = spec.n_tokens
    cum = np.cumsum(spec.transition, axis=1)
    cum[:, -1] = 1.0
    draws = rng.random(n)
    out = np.empty(n, dtype=np.int64)
    state = min(int(np.searchsorted(np.cumsum(spec.initial), draws[0], side="right")), K - 1)
    out[0] = state
    for i in range(1, n):
        state = min(int(np.searchsorted(cum[state], draws[i], side="right")), K - 1)
        out[i] = state
    return out + 1


def synth_utterance(spec: LanguageSpec, target_frames: int, rng: np.random.Generator,
                    utt_id: str = "utt") -> FeatureSequence:
    lo, hi = spec.dur_range
    if target_frames < hi:
        raise ValueError(f"target_frames {target_frames} shorter than max token duration {hi}")
    n_tok = target_frames // lo + 1
    tokens = sample_tokens(spec, n_tok, rng)
    durs = rng.integers(lo, hi + 1, size=n_tok)
    ends = np.cumsum(durs)
    n_used = int(np.searchsorted(ends, target_frames)) + 1
    tokens, durs = tokens[:n_used], durs[:n_used]
    per_frame = np.repeat(tokens - 1, durs)[:target_frames]
    noise = rng.standard_normal((target_frames, spec.means.shape[1]))
    frames = spec.means[per_frame] + spec.stds[per_frame] * noise
    return FeatureSequence(utt_id, frames.astype(np.float32), spec.lang, [int(t) for t in tokens])


def apply_domain_shift(feats: FeatureSequence, shift: DomainShift, rng: np.random.Generator) -> FeatureSequence:
    """Rate-resample frames, add a channel offset and scaled Gaussian noise."""
    x = feats.frames.astype(np.float64)
    T = len(x)
    if shift.rate != 1.0:
        new_t = max(1, int(round(T * shift.rate)))
        idx = np.minimum((np.arange(new_t) / shift.rate).astype(np.int64), T - 1)
        x = x[idx]
    x = x + np.asarray(shift.offset, dtype=np.float64)
    if shift.noise > 0:
        base_std = feats.frames.astype(np.float64).std(axis=0)
        x = x + rng.standard_normal(x.shape) * (shift.noise * base_std)
    return replace(feats, frames=x.astype(np.float32))


def apply_masks(feats: FeatureSequence, time_spans: Iterable[tuple[int, int]],
                freq_spans: Iterable[tuple[int, int]]) -> FeatureSequence:
    """Replace the given frame spans and coordinate bands with per-coordinate utterance means."""
    x = feats.frames.copy()
    mean = feats.frames.mean(axis=0, dtype=np.float64).astype(x.dtype)
    for t0, w in time_spans:
        x[t0 : t0 + w] = mean
    for f0, w in freq_spans:
        x[:, f0 : f0 + w] = mean[f0 : f0 + w]
    return replace(feats, frames=x)


def spec_augment(feats: FeatureSequence, n_time_masks: int, max_t: int, n_freq_masks: int, max_f: int,
                 rng: np.random.Generator) -> FeatureSequence:
    T, D = feats.frames.shape
    max_t = min(max_t, T - 1)
    max_f = min(max_f, D - 1)
    time_spans = []
    for _ in range(n_time_masks):
        w = int(rng.integers(0, max_t + 1))
        time_spans.append((int(rng.integers(0, T - w + 1)), w))
    freq_spans = []
    for _ in range(n_freq_masks):
        w = int(rng.integers(0, max_f + 1))
        freq_spans.append((int(rng.integers(0, D - w + 1)), w))
    if not time_spans and not freq_spans:
        return feats
    return apply_masks(feats, time_spans, freq_spans)


def crop_fixed(feats: FeatureSequence, n_frames: int, rng: np.random.Generator) -> FeatureSequence:
    """Contiguous random crop of exactly ``n_frames``; shorter inputs pass through.

    The transcript of a crop is unknown (segment boundaries are not kept), so
    it is dropped.
    """
    if n_frames < 1:
        raise ValueError("crop length must be >= 1")
    T = feats.n_frames
    if T <= n_frames:
        return feats
    start = int(rng.integers(0, T - n_frames + 1))
    return replace(feats, frames=feats.frames[start : start + n_frames].copy(), tokens=None)


# -- file formats -------------------------------------------------------------

def write_features(path: str | os.PathLike, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise ValueError("features must be a (T, D) array")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<III", FEAT_VERSION, frames.shape[0], frames.shape[1]))
        fh.write(frames.tobytes())


def read_features(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != FEAT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header at byte {len(data)}")
    version, n, d = struct.unpack_from("<III", data, 4)
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    need = 16 + 4 * n * d
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes, file ends at byte {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(n, d).astype(np.float32)


def write_manifest(path: str | os.PathLike, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            toks = " ".join(str(t) for t in e.tokens)
            fh.write(f"{e.utt_id}\t{e.path}\t{e.lang}\t{toks}\n")


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}: line {lineno} has {len(parts)} fields, expected 4")
            utt, rel, lang, toks = parts
            out.append(ManifestEntry(utt, rel, int(lang), [int(t) for t in toks.split()]))
    return out


def load_manifest(path: str | os.PathLike) -> list[FeatureSequence]:
    base = Path(path).parent
    return [FeatureSequence(e.utt_id, read_features(base / e.path), e.lang, e.tokens or None)
            for e in read_manifest(path)]


# -- corpus assembly ------------------------------------------------------------

@dataclass
class CorpusParams:
    n_langs: int = 4
    n_tokens: int = 12
    dim: int = 20
    divergence: float = 0.5
    transition_scale: float = 1.0
    emission_std: float = 2.0
    emission_divergence: float = 0.0
    dur_min: int = 3
    dur_max: int = 8
    min_frames: int = 300
    max_frames: int = 800
    n_train: int = 500
    n_valid: int = 50
    n_test: int = 100
    n_asr: int = 300
    asr_min_frames: int = 150
    asr_max_frames: int = 250
    crops: tuple[int, ...] = (100, 200, 300)
    shift_offset: float = 0.5
    shift_noise: float = 0.5
    shift_rate: float = 1.25


def _utt_stream(split: str, lang: int, index: int) -> int:
    return SPLIT_CODES[split] * 10**9 + lang * 10**6 + index


def _make_utt(args) -> FeatureSequence:
    spec, split, index, params, seed = args
    rng = make_rng(seed, _utt_stream(split, spec.lang, index))
    lo, hi = (params.asr_min_frames, params.asr_max_frames) if split == "asr" else (params.min_frames, params.max_frames)
    n = int(rng.integers(lo, hi + 1))
    return synth_utterance(spec, n, rng, f"{split}-l{spec.lang}-{index:05d}")


def corpus_specs(params: CorpusParams, seed: int) -> list[LanguageSpec]:
    return gen_language_specs(params.n_langs, params.n_tokens, params.dim, params.divergence, make_rng(seed, 0),
                              dur_range=(params.dur_min, params.dur_max), emission_std=params.emission_std,
                              transition_scale=params.transition_scale,
                              emission_divergence=params.emission_divergence)


def domain_shift(params: CorpusParams, seed: int) -> DomainShift:
    rng = make_rng(seed, 1)
    return DomainShift(rng.normal(size=params.dim) * params.shift_offset, params.shift_noise, params.shift_rate)


def build_corpus(params: CorpusParams, seed: int, jobs: int = 1) -> dict[str, list[FeatureSequence]]:
    """All splits in memory, keyed ``asr``, ``train``, ``valid``, ``test_full``, ``test_<n>``,
    ``shift_full`` and ``shift_<n>``.

    ``asr`` holds short transcribed utterances for transducer pretraining,
    kept apart from the language-labelled training split.

    Every utterance, crop and shift draws from its own generator stream, so
    the result does not depend on generation order or ``jobs``.
    """
    specs = corpus_specs(params, seed)
    counts = {"asr": params.n_asr, "train": params.n_train, "valid": params.n_valid, "test": params.n_test}
    jobs_list = {split: [(spec, split, i, params, seed) for spec in specs for i in range(n)]
                 for split, n in counts.items()}
    out: dict[str, list[FeatureSequence]] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for split, args in jobs_list.items():
                out[split] = list(pool.map(_make_utt, args, chunksize=32))
    else:
        for split, args in jobs_list.items():
            out[split] = [_make_utt(a) for a in args]
    test = out.pop("test")
    out["test_full"] = test
    shift = domain_shift(params, seed)
    shifted = [apply_domain_shift(u, shift, make_rng(seed, 5 * 10**9 + i)) for i, u in enumerate(test)]
    shifted = [replace(u, utt_id=u.utt_id.replace("test-", "shift-", 1)) for u in shifted]
    out["shift_full"] = shifted
    for n in params.crops:
        out[f"test_{n}"] = [_renamed(crop_fixed(u, n, make_rng(seed, 6 * 10**9 + n * 10**5 + i)), n)
                            for i, u in enumerate(test)]
        out[f"shift_{n}"] = [_renamed(crop_fixed(u, n, make_rng(seed, 7 * 10**9 + n * 10**5 + i)), n)
                             for i, u in enumerate(shifted)]
    return out


def _renamed(u: FeatureSequence, n: int) -> FeatureSequence:
    return replace(u, utt_id=f"{u.utt_id}-c{n}", tokens=None)


def write_corpus(splits: dict[str, Sequence[FeatureSequence]], out_dir: str | os.PathLike) -> dict[str, Path]:
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    manifests = {}
    for name, utts in splits.items():
        entries = []
        for u in utts:
            rel = f"features/{u.utt_id}.feat"
            write_features(out_dir / rel, u.frames)
            entries.append(ManifestEntry(u.utt_id, rel, u.lang, list(u.tokens or [])))
        manifests[name] = out_dir / f"{name}.tsv"
        write_manifest(manifests[name], entries)
    return manifests

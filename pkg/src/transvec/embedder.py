"""Utterance-level language embeddings built on transducer streams.

A frame stream is picked from the greedy decode (encoder outputs, visited
prediction states, per-pair joint hidden vectors, or their additive fusion),
pooled to mean and standard deviation, and passed through a two-layer head.
The embedding is the first layer's pre-activation; for the dual-branch
variant it is the fused second-layer output of the two branches.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ConfigError
from .corpus import FeatureSequence, FormatError, crop_fixed, spec_augment
from .nets import FCStack, Linear
from .numkit import Adam, DimensionError, Param, PlateauDecay, activate, activate_grad, global_norm_clip, \
    log_softmax, make_rng
from .transducer import DecodeTrace, TransducerModel, greedy_decode

log = logging.getLogger(__name__)

POOL_EPS = 1e-8
VARIANTS = ("encoder", "prediction", "joint", "early", "late")
EMB_MAGIC = b"TVEB"
EMB_VERSION = 1


@dataclass(frozen=True)
class StreamVariant:
    kind: str
    lam: float = 1.0
    alpha: float = 0.3

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ConfigError(f"unknown stream variant {self.kind!r}; expected one of {VARIANTS}")
        if self.lam < 0 or self.alpha < 0:
            raise ConfigError("fusion weights must be >= 0")

    @property
    def uses_encoder(self) -> bool:
        return self.kind in ("encoder", "joint", "early", "late")

    @property
    def uses_prediction(self) -> bool:
        return self.kind in ("prediction", "joint", "early", "late")

    def label(self) -> str:
        if self.kind == "early":
            return f"early(lam={self.lam:g})"
        if self.kind == "late":
            return f"late(alpha={self.alpha:g})"
        return self.kind


@dataclass(frozen=True)
class FreezeMask:
    """Trainable flags per component."""
    encoder: bool = True
    prediction: bool = True
    joint: bool = True
    head: bool = True

    def __post_init__(self):
        if not (self.encoder or self.prediction or self.joint or self.head):
            raise ConfigError("freeze mask leaves nothing trainable")

    def as_dict(self) -> dict[str, bool]:
        return {"encoder": self.encoder, "prediction": self.prediction, "joint": self.joint, "head": self.head}

    @classmethod
    def for_variant(cls, variant: StreamVariant) -> "FreezeMask":
        if variant.kind == "encoder":
            return cls(encoder=True, prediction=False, joint=False)
        if variant.kind == "prediction":
            return cls(encoder=False, prediction=True, joint=False)
        if variant.kind == "joint":
            return cls(encoder=True, prediction=True, joint=True)
        return cls(encoder=True, prediction=True, joint=False)

    @classmethod
    def parse(cls, text: str, variant: StreamVariant) -> "FreezeMask":
        """``auto`` or a comma list of trainable components, e.g. ``encoder,head``."""
        text = text.strip()
        if text == "auto":
            return cls.for_variant(variant)
        names = {t.strip() for t in text.split(",") if t.strip()}
        unknown = names - {"encoder", "prediction", "joint", "head"}
        if unknown:
            raise ConfigError(f"unknown freeze-mask components {sorted(unknown)}")
        return cls(**{k: k in names for k in ("encoder", "prediction", "joint", "head")})


@dataclass
class LanguageEmbedding:
    values: np.ndarray
    utt_id: str = ""
    lang: int = -1


# -- pooling and fusion ---------------------------------------------------------

def stats_pool(seq: np.ndarray) -> np.ndarray:
    """Concatenate per-coordinate mean and population std (variance floored by a small epsilon)."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or len(seq) == 0:
        raise ValueError("stats_pool needs a non-empty (V, D) sequence")
    # summing in sorted order makes the result bitwise independent of row order
    seq = np.sort(seq, axis=0)
    mu = seq.mean(axis=0)
    var = np.mean((seq - mu) ** 2, axis=0)
    return np.concatenate([mu, np.sqrt(var + POOL_EPS)])


def stats_pool_backward(seq: np.ndarray, pooled: np.ndarray, d_pooled: np.ndarray) -> np.ndarray:
    n, D = seq.shape
    mu, sigma = pooled[:D], pooled[D:]
    return d_pooled[:D] / n + (seq - mu) * (d_pooled[D:] / (n * sigma))


def early_fuse(h_enc: np.ndarray, h_pred: np.ndarray, lam: float) -> np.ndarray:
    """Per-pair additive fusion of aligned encoder and prediction rows."""
    if h_enc.shape != h_pred.shape:
        raise ConfigError(f"early fusion needs equal encoder/prediction dims, got {h_enc.shape} vs {h_pred.shape}")
    return h_enc + lam * h_pred


def frame_stream(variant: StreamVariant, trace: DecodeTrace, enc_seq: np.ndarray | None = None,
                 pred_seq: np.ndarray | None = None, joint=None):
    """Frame-level sequence(s) the variant pools; a pair ``(enc, pred)`` for the dual-branch variant."""
    enc_seq = trace.h_enc if enc_seq is None else enc_seq
    pred_seq = trace.h_pred if pred_seq is None else pred_seq
    kind = variant.kind
    if kind == "encoder":
        return enc_seq
    if kind == "prediction":
        return pred_seq
    if kind == "late":
        return enc_seq, pred_seq
    he = enc_seq[trace.t_idx]
    hp = pred_seq[trace.u_idx]
    if kind == "early":
        return early_fuse(he, hp, variant.lam)
    pre = he @ joint.Q.value.T + hp @ joint.V.value.T + joint.b_z.value
    return activate(joint.act, pre)


# -- heads ----------------------------------------------------------------------

class UtteranceHead:
    """FC1 -> relu -> FC2 -> relu -> output layer over N languages."""

    def __init__(self, pooled_dim: int, width: int, n_langs: int, rng: np.random.Generator, name: str = "head"):
        self.stack = FCStack(pooled_dim, width, rng, f"{name}.fc")
        self.out = Linear(width, n_langs, rng, f"{name}.out")

    def params(self) -> list[Param]:
        return self.stack.params() + self.out.params()

    def forward(self, h_p: np.ndarray):
        if h_p.shape[-1] != self.stack.fc1.n_in:
            raise DimensionError(f"head expects pooled dim {self.stack.fc1.n_in}, got {h_p.shape[-1]}")
        a1, a2, sc = self.stack.forward(h_p)
        h2 = activate("relu", a2)
        logits = self.out.forward(h2)
        return a1, logits, (sc, a2, h2)

    def backward(self, cache, d_logits: np.ndarray) -> np.ndarray:
        sc, a2, h2 = cache
        dh2 = self.out.backward(h2, d_logits)
        return self.stack.backward(sc, None, dh2 * activate_grad("relu", h2))


def head_forward(head: UtteranceHead, h_p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    emb, logits, _ = head.forward(np.asarray(h_p, dtype=np.float64))
    return emb, np.exp(log_softmax(logits))


class LateHead:
    """Two disjoint pooling branches fused after their second layer; shared output layer."""

    def __init__(self, enc_pooled: int, pred_pooled: int, width: int, n_langs: int, rng: np.random.Generator,
                 alpha: float = 0.3):
        self.enc = FCStack(enc_pooled, width, rng, "head.enc.fc")
        self.pred = FCStack(pred_pooled, width, rng, "head.pred.fc")
        self.out = Linear(width, n_langs, rng, "head.out")
        self.alpha = alpha

    def params(self) -> list[Param]:
        return self.enc.params() + self.pred.params() + self.out.params()

    def forward(self, hp_enc: np.ndarray, hp_pred: np.ndarray):
        for stack, x in ((self.enc, hp_enc), (self.pred, hp_pred)):
            if x.shape[-1] != stack.fc1.n_in:
                raise DimensionError(f"late branch expects pooled dim {stack.fc1.n_in}, got {x.shape[-1]}")
        _, fc_enc, c_enc = self.enc.forward(hp_enc)
        _, fc_pred, c_pred = self.pred.forward(hp_pred)
        fused = fc_enc + self.alpha * fc_pred
        h = activate("relu", fused)
        logits = self.out.forward(h)
        return fused, logits, (c_enc, c_pred, h)

    def backward(self, cache, d_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c_enc, c_pred, h = cache
        d_fused = self.out.backward(h, d_logits) * activate_grad("relu", h)
        d_enc = self.enc.backward(c_enc, None, d_fused)
        d_pred = self.pred.backward(c_pred, None, self.alpha * d_fused)
        return d_enc, d_pred


def late_fuse(head: LateHead, streams: tuple[np.ndarray, np.ndarray], alpha: float | None = None):
    """Pool each stream separately, fuse the branch outputs with weight ``alpha``; returns (embedding, posteriors)."""
    if alpha is not None:
        head.alpha = alpha
    enc_seq, pred_seq = streams
    fused, logits, _ = head.forward(stats_pool(enc_seq), stats_pool(pred_seq))
    return fused, np.exp(log_softmax(logits))


# -- the full LID model ---------------------------------------------------------

class LidModel:
    def __init__(self, rnnt: TransducerModel, variant: StreamVariant, n_langs: int, width: int = 64,
                 tau: int = 3, seed: int = 0):
        if tau < 1:
            raise ConfigError("tau must be >= 1")
        self.rnnt = rnnt
        self.variant = variant
        self.tau = tau
        self.n_langs = n_langs
        rng = make_rng(seed, 77)
        E = rnnt.encoder.out_dim
        P = rnnt.prediction.out_dim
        J = rnnt.joint.Q.shape[0]
        if variant.kind == "early" and E != P:
            raise ConfigError(f"early fusion needs encoder dim == prediction dim, got {E} and {P}")
        if variant.kind == "late":
            self.head = LateHead(2 * E, 2 * P, width, n_langs, rng, alpha=variant.alpha)
        else:
            dim = {"encoder": E, "prediction": P, "joint": J, "early": E}[variant.kind]
            self.head = UtteranceHead(2 * dim, width, n_langs, rng)

    def components(self) -> dict[str, list[Param]]:
        comps = self.rnnt.components()
        comps["head"] = self.head.params()
        return comps

    def params(self) -> list[Param]:
        return [p for ps in self.components().values() for p in ps]

    def apply_mask(self, mask: FreezeMask) -> None:
        flags = mask.as_dict()
        for name, ps in self.components().items():
            for p in ps:
                p.frozen = not flags[name]

    def _trainable(self, name: str) -> bool:
        return any(not p.frozen for p in self.components()[name])

    def forward_batch(self, frames: Sequence[np.ndarray]):
        """Returns (embeddings (B, F), logits (B, N), cache)."""
        rnnt, v = self.rnnt, self.variant
        enc, enc_len, enc_cache = rnnt.encoder.forward_batch(frames)
        traces = [greedy_decode(rnnt, tau=self.tau, enc_out=enc[b, : enc_len[b]]) for b in range(len(frames))]
        pred = pred_len = pred_cache = None
        if v.uses_prediction:
            pred, pred_len, pred_cache = rnnt.prediction.forward_batch([tr.tokens for tr in traces])
        streams = []
        for b, tr in enumerate(traces):
            es = enc[b, : enc_len[b]]
            ps = pred[b, : pred_len[b]] if pred is not None else None
            streams.append(frame_stream(v, tr, es, ps, rnnt.joint))
        if v.kind == "late":
            hp_enc = np.stack([stats_pool(s[0]) for s in streams])
            hp_pred = np.stack([stats_pool(s[1]) for s in streams])
            emb, logits, hcache = self.head.forward(hp_enc, hp_pred)
            pooled = (hp_enc, hp_pred)
        else:
            pooled = np.stack([stats_pool(s) for s in streams])
            emb, logits, hcache = self.head.forward(pooled)
        cache = dict(enc=enc, enc_len=enc_len, enc_cache=enc_cache, traces=traces, pred=pred, pred_len=pred_len,
                     pred_cache=pred_cache, streams=streams, pooled=pooled, hcache=hcache)
        return emb, logits, cache

    def backward(self, cache, d_logits: np.ndarray) -> None:
        v, rnnt = self.variant, self.rnnt
        enc, pred, traces = cache["enc"], cache["pred"], cache["traces"]
        d_enc = np.zeros_like(enc)
        d_pred = np.zeros_like(pred) if pred is not None else None
        if v.kind == "late":
            d_hp_enc, d_hp_pred = self.head.backward(cache["hcache"], d_logits)
        else:
            d_hp = self.head.backward(cache["hcache"], d_logits)
        j = rnnt.joint
        for b, tr in enumerate(traces):
            L = cache["enc_len"][b]
            stream = cache["streams"][b]
            if v.kind == "late":
                hp_enc, hp_pred = cache["pooled"]
                d_enc[b, :L] += stats_pool_backward(stream[0], hp_enc[b], d_hp_enc[b])
                n = cache["pred_len"][b]
                d_pred[b, :n] += stats_pool_backward(stream[1], hp_pred[b], d_hp_pred[b])
                continue
            d_s = stats_pool_backward(stream, cache["pooled"][b], d_hp[b])
            if v.kind == "encoder":
                d_enc[b, :L] += d_s
            elif v.kind == "prediction":
                d_pred[b, : cache["pred_len"][b]] += d_s
            elif v.kind == "early":
                np.add.at(d_enc[b], tr.t_idx, d_s)
                np.add.at(d_pred[b], tr.u_idx, v.lam * d_s)
            else:
                d_pre = d_s * activate_grad(j.act, stream)
                he = enc[b, tr.t_idx]
                hp = pred[b, tr.u_idx]
                j.Q.add_grad(d_pre.T @ he)
                j.V.add_grad(d_pre.T @ hp)
                j.b_z.add_grad(d_pre.sum(axis=0))
                np.add.at(d_enc[b], tr.t_idx, d_pre @ j.Q.value)
                np.add.at(d_pred[b], tr.u_idx, d_pre @ j.V.value)
        if v.uses_encoder and self._trainable("encoder"):
            rnnt.encoder.backward(cache["enc_cache"], d_enc)
        if v.uses_prediction and self._trainable("prediction"):
            rnnt.prediction.backward(cache["pred_cache"], d_pred)

    def loss_batch(self, frames: Sequence[np.ndarray], labels: Sequence[int], backward: bool = True) -> float:
        _, logits, cache = self.forward_batch(frames)
        logp = log_softmax(logits)
        labels = np.asarray(labels, dtype=np.int64)
        B = len(labels)
        loss = -float(np.mean(logp[np.arange(B), labels]))
        if backward:
            d_logits = np.exp(logp)
            d_logits[np.arange(B), labels] -= 1.0
            self.backward(cache, d_logits / B)
        return loss


def param_checksum(params: Sequence[Param]) -> str:
    import hashlib
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


@dataclass
class LidHyper:
    epochs: int = 6
    batch_size: int = 8
    lr: float = 1e-3
    clip: float = 5.0
    train_crop: int = 200
    time_masks: int = 1
    max_time_mask: int = 10
    freq_masks: int = 1
    max_freq_mask: int = 3
    seed: int = 0


def _prepare(u: FeatureSequence, hp: LidHyper, rng: np.random.Generator) -> np.ndarray:
    if hp.train_crop:
        u = crop_fixed(u, hp.train_crop, rng)
    if hp.time_masks or hp.freq_masks:
        u = spec_augment(u, hp.time_masks, hp.max_time_mask, hp.freq_masks, hp.max_freq_mask, rng)
    return u.frames


def train_lid(model: LidModel, train: Sequence[FeatureSequence], valid: Sequence[FeatureSequence],
              mask: FreezeMask, hp: LidHyper = LidHyper(),
              progress: Callable[[dict], None] | None = None) -> list[dict]:
    """Cross-entropy fine-tuning; frozen components are never updated."""
    for u in train:
        if u.lang < 0:
            raise ValueError(f"training utterance {u.utt_id} has no language label")
    model.apply_mask(mask)
    trainable = [p for p in model.params() if not p.frozen]
    if not trainable:
        raise ConfigError("freeze mask leaves nothing trainable")
    opt = Adam(trainable, lr=hp.lr)
    sched = PlateauDecay(opt, factor=0.5, patience=2, min_lr=1e-8)
    vrng = make_rng(hp.seed, 900)
    valid_frames = [crop_fixed(u, hp.train_crop, vrng).frames if hp.train_crop else u.frames for u in valid]
    valid_labels = [u.lang for u in valid]
    history = []
    for epoch in range(hp.epochs):
        rng = make_rng(hp.seed, 2000 + epoch)
        order = rng.permutation(len(train))
        total, n = 0.0, 0
        for start in range(0, len(order), hp.batch_size):
            batch = [train[i] for i in order[start : start + hp.batch_size]]
            frames = [_prepare(u, hp, rng) for u in batch]
            opt.zero_grad()
            total += model.loss_batch(frames, [u.lang for u in batch])
            global_norm_clip(trainable, hp.clip)
            opt.step()
            n += 1
        val = lid_loss(model, valid_frames, valid_labels)
        sched.step(val)
        rec = {"epoch": epoch + 1, "train_loss": total / max(n, 1), "valid_loss": val, "lr": opt.lr}
        history.append(rec)
        log.info("lid[%s] epoch %d train %.4f valid %.4f", model.variant.label(), epoch + 1, rec["train_loss"], val)
        if progress:
            progress(rec)
    return history


def lid_loss(model: LidModel, frames: Sequence[np.ndarray], labels: Sequence[int], batch_size: int = 32) -> float:
    if not frames:
        return float("nan")
    total = 0.0
    for s in range(0, len(frames), batch_size):
        fb = frames[s : s + batch_size]
        total += model.loss_batch(fb, labels[s : s + batch_size], backward=False) * len(fb)
    return total / len(frames)


def extract_embeddings(model: LidModel, utts: Sequence[FeatureSequence], batch_size: int = 32):
    """Embeddings and log-posteriors for every utterance, in input order.

    Utterances are batched by length to limit padding; results do not
    depend on the batching.
    """
    order = sorted(range(len(utts)), key=lambda i: (utts[i].n_frames, i))
    embs = [None] * len(utts)
    for s in range(0, len(order), batch_size):
        idx = order[s : s + batch_size]
        emb, _, _ = model.forward_batch([utts[i].frames for i in idx])
        for k, i in enumerate(idx):
            embs[i] = LanguageEmbedding(emb[k].copy(), utts[i].utt_id, utts[i].lang)
    return embs


def extract_embedding(model: LidModel, feats: FeatureSequence) -> LanguageEmbedding:
    return extract_embeddings(model, [feats], batch_size=1)[0]


# -- embedding file -------------------------------------------------------------

def write_embeddings(path, embs: Sequence[LanguageEmbedding]) -> None:
    dim = len(embs[0].values) if embs else 0
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<III", EMB_VERSION, len(embs), dim))
        for e in embs:
            if len(e.values) != dim:
                raise DimensionError(f"embedding {e.utt_id} has dim {len(e.values)}, expected {dim}")
            uid = e.utt_id.encode("utf-8")
            fh.write(struct.pack("<H", len(uid)))
            fh.write(uid)
            fh.write(struct.pack("<i", e.lang))
            fh.write(np.asarray(e.values, dtype="<f4").tobytes())


def read_embeddings(path) -> list[LanguageEmbedding]:
    data = Path(path).read_bytes()
    if data[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header at byte {len(data)}")
    version, count, dim = struct.unpack_from("<III", data, 4)
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    off = 16
    out = []
    for _ in range(count):
        if off + 2 > len(data):
            raise FormatError(f"{path}: truncated record at byte {off}")
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        end = off + n + 4 + 4 * dim
        if end > len(data):
            raise FormatError(f"{path}: truncated record at byte {off}")
        uid = data[off : off + n].decode("utf-8")
        off += n
        (lang,) = struct.unpack_from("<i", data, off)
        off += 4
        vals = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
        out.append(LanguageEmbedding(vals, uid, lang))
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes at byte {off}")
    return out

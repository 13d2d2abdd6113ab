"""RNN transducer: joint network, alignment-lattice loss, greedy decoding.

Lattice indices are 0-based here: frames ``t = 0..T-1`` and label positions
``u = 0..U``. ``log_probs[t, u]`` is the output distribution after seeing
frame ``t`` and the first ``u`` labels. Blank has id 0.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .nets import Encoder, PredictionNet
from .numkit import (Adam, DimensionError, Param, PlateauDecay, activate, activate_grad, global_norm_clip,
                     log_softmax, make_rng, xavier_uniform)

log = logging.getLogger(__name__)

BLANK = 0


class JointNet:
    def __init__(self, enc_dim: int, pred_dim: int, joint_dim: int, n_tokens: int, rng: np.random.Generator,
                 act: str = "tanh"):
        self.Q = Param(xavier_uniform(rng, joint_dim, enc_dim), "joint.Q")
        self.V = Param(xavier_uniform(rng, joint_dim, pred_dim), "joint.V")
        self.b_z = Param(np.zeros(joint_dim), "joint.b_z")
        self.W_y = Param(xavier_uniform(rng, n_tokens + 1, joint_dim), "joint.W_y")
        self.b_y = Param(np.zeros(n_tokens + 1), "joint.b_y")
        self.act = act

    @property
    def n_out(self) -> int:
        return self.W_y.shape[0]

    def params(self) -> list[Param]:
        return [self.Q, self.V, self.b_z, self.W_y, self.b_y]

    def _check(self, h_enc: np.ndarray, h_pred: np.ndarray) -> None:
        if h_enc.shape[-1] != self.Q.shape[1] or h_pred.shape[-1] != self.V.shape[1]:
            raise DimensionError(
                f"joint expects enc dim {self.Q.shape[1]} / pred dim {self.V.shape[1]}, "
                f"got {h_enc.shape[-1]} / {h_pred.shape[-1]}")

    def lattice(self, h_enc: np.ndarray, h_pred: np.ndarray):
        """Evaluate every (t, u) cell; returns (z, log_probs) with shapes (T, U+1, J), (T, U+1, K+1)."""
        self._check(h_enc, h_pred)
        a = h_enc @ self.Q.value.T
        b = h_pred @ self.V.value.T + self.b_z.value
        z = activate(self.act, a[:, None, :] + b[None, :, :])
        logits = z @ self.W_y.value.T + self.b_y.value
        return z, log_softmax(logits)

    def lattice_backward(self, h_enc, h_pred, z, d_logits):
        """Accumulate parameter grads; return (d_h_enc, d_h_pred)."""
        J = z.shape[-1]
        z2 = z.reshape(-1, J)
        dl2 = d_logits.reshape(-1, d_logits.shape[-1])
        self.W_y.add_grad(dl2.T @ z2)
        self.b_y.add_grad(dl2.sum(axis=0))
        d_pre = (d_logits @ self.W_y.value) * activate_grad(self.act, z)
        d_a = d_pre.sum(axis=1)
        d_b = d_pre.sum(axis=0)
        self.Q.add_grad(d_a.T @ h_enc)
        self.V.add_grad(d_b.T @ h_pred)
        self.b_z.add_grad(d_b.sum(axis=0))
        return d_a @ self.Q.value, d_b @ self.V.value


def joint_forward(j: JointNet, h_enc: np.ndarray, h_pred: np.ndarray):
    """Single-cell joint: returns (z, logits, logp)."""
    h_enc = np.asarray(h_enc, dtype=np.float64)
    h_pred = np.asarray(h_pred, dtype=np.float64)
    j._check(h_enc, h_pred)
    z = activate(j.act, j.Q.value @ h_enc + j.V.value @ h_pred + j.b_z.value)
    logits = j.W_y.value @ z + j.b_y.value
    return z, logits, log_softmax(logits)


@dataclass
class Lattice:
    log_probs: np.ndarray  # (T, U+1, K+1)

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def U(self) -> int:
        return self.log_probs.shape[1] - 1


def _check_labels(lat: Lattice, labels: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != lat.U:
        raise ValueError(f"label length {len(labels)} != lattice U {lat.U}")
    if np.any(labels == BLANK):
        raise ValueError("labels contain the blank id")
    if lat.T < 1:
        raise ValueError("lattice has no frames")
    return labels


def _blank_emit(lat: Lattice, labels: np.ndarray):
    lp = lat.log_probs
    blank = lp[:, :, BLANK]
    emit = lp[:, np.arange(lat.U), labels] if lat.U else np.zeros((lat.T, 0))
    return blank, emit


def _alpha(blank: np.ndarray, emit: np.ndarray) -> np.ndarray:
    # Within a frame alpha[t, u] = logaddexp(a_u, alpha[t, u-1] + emit[t, u-1]) is a
    # log-space linear recurrence; cumulative emit sums turn it into a running logaddexp.
    T, U1 = blank.shape
    alpha = np.empty((T, U1))
    for t in range(T):
        e_cum = np.concatenate([[0.0], np.cumsum(emit[t])])
        if t == 0:
            alpha[0] = e_cum
            continue
        a = alpha[t - 1] + blank[t - 1]
        alpha[t] = e_cum + np.logaddexp.accumulate(a - e_cum)
    return alpha


def _beta(blank: np.ndarray, emit: np.ndarray) -> np.ndarray:
    T, U1 = blank.shape
    beta = np.empty((T, U1))
    for t in range(T - 1, -1, -1):
        e_cum = np.concatenate([[0.0], np.cumsum(emit[t])])
        if t == T - 1:
            b = np.full(U1, -np.inf)
            b[-1] = blank[t, -1]
        else:
            b = beta[t + 1] + blank[t]
        beta[t] = np.logaddexp.accumulate((b + e_cum)[::-1])[::-1] - e_cum
    return beta


def rnnt_log_prob(lat: Lattice, labels: Sequence[int]) -> float:
    """log P(y|x): sum over every alignment path, computed by the forward recursion."""
    labels = _check_labels(lat, labels)
    blank, emit = _blank_emit(lat, labels)
    alpha = _alpha(blank, emit)
    return float(alpha[-1, -1] + blank[-1, -1])


def enumerate_paths(lat: Lattice, labels: Sequence[int], limit: int = 20) -> float:
    """Brute-force path sum; test oracle only.

    A path is a placement of the U emissions among the ``T-1+U`` non-final
    moves, followed by the final blank at ``(T-1, U)``.
    """
    labels = _check_labels(lat, labels)
    T, U = lat.T, lat.U
    if T * (U + 1) > limit:
        raise ValueError(f"lattice {T}x{U + 1} exceeds the enumeration guard {limit}")
    lp = lat.log_probs
    total = []
    n_moves = T - 1 + U
    for emit_slots in itertools.combinations(range(n_moves), U):
        t = u = 0
        s = 0.0
        slots = set(emit_slots)
        for move in range(n_moves):
            if move in slots:
                s += lp[t, u, labels[u]]
                u += 1
            else:
                s += lp[t, u, BLANK]
                t += 1
        s += lp[T - 1, U, BLANK]
        total.append(s)
    m = max(total)
    return float(m + np.log(sum(np.exp(v - m) for v in total)))


def count_paths(T: int, U: int) -> int:
    from math import comb
    return comb(T - 1 + U, U)


def rnnt_loss_backward(lat: Lattice, labels: Sequence[int]):
    """Loss ``-log P(y|x)`` and its gradient with respect to the lattice logits.

    The lattice holds log-softmax outputs, so the gradient is taken through
    the softmax: ``dL/dlogit[t,u,k] = gamma[t,u] * p[t,u,k] - occupancy of the
    outgoing move labelled k``.
    """
    labels = _check_labels(lat, labels)
    blank, emit = _blank_emit(lat, labels)
    alpha = _alpha(blank, emit)
    beta = _beta(blank, emit)
    log_p = alpha[-1, -1] + blank[-1, -1]
    T, U1 = blank.shape
    lp = lat.log_probs
    gamma = np.exp(alpha + beta - log_p)
    occ_blank = np.zeros((T, U1))
    occ_blank[:-1] = np.exp(alpha[:-1] + blank[:-1] + beta[1:] - log_p)
    occ_blank[-1, -1] = np.exp(alpha[-1, -1] + blank[-1, -1] - log_p)
    grad = gamma[..., None] * np.exp(lp)
    grad[:, :, BLANK] -= occ_blank
    if U1 > 1:
        occ_emit = np.exp(alpha[:, :-1] + emit + beta[:, 1:] - log_p)
        tt, uu = np.meshgrid(np.arange(T), np.arange(U1 - 1), indexing="ij")
        np.subtract.at(grad, (tt, uu, np.broadcast_to(labels, (T, U1 - 1))), occ_emit)
    return float(-log_p), grad


class TransducerModel:
    def __init__(self, feat_dim: int, n_tokens: int, rng: np.random.Generator, enc_hidden: int = 64,
                 enc_dim: int = 64, enc_layers: int = 2, subsample: int = 2, pred_embed: int = 32,
                 pred_hidden: int = 64, pred_dim: int = 64, joint_dim: int = 64):
        self.n_tokens = n_tokens
        self.encoder = Encoder(feat_dim, enc_hidden, enc_dim, rng, n_layers=enc_layers, subsample=subsample)
        self.prediction = PredictionNet(n_tokens + 1, pred_embed, pred_hidden, pred_dim, rng)
        self.joint = JointNet(enc_dim, pred_dim, joint_dim, n_tokens, rng)

    def components(self) -> dict[str, list[Param]]:
        return {"encoder": self.encoder.params(), "prediction": self.prediction.params(),
                "joint": self.joint.params()}

    def params(self) -> list[Param]:
        return [p for ps in self.components().values() for p in ps]

    def loss_batch(self, frames: Sequence[np.ndarray], transcripts: Sequence[Sequence[int]],
                   backward: bool = True) -> float:
        """Mean per-utterance transducer loss; accumulates grads when ``backward``."""
        enc, enc_len, enc_cache = self.encoder.forward_batch(frames)
        pred, pred_len, pred_cache = self.prediction.forward_batch(transcripts)
        d_enc = np.zeros_like(enc)
        d_pred = np.zeros_like(pred)
        total = 0.0
        B = len(frames)
        for b in range(B):
            he = enc[b, : enc_len[b]]
            hp = pred[b, : pred_len[b]]
            z, logp = self.joint.lattice(he, hp)
            loss, d_logits = rnnt_loss_backward(Lattice(logp), transcripts[b])
            total += loss
            if backward:
                de, dp = self.joint.lattice_backward(he, hp, z, d_logits / B)
                d_enc[b, : enc_len[b]] = de
                d_pred[b, : pred_len[b]] = dp
        if backward:
            self.encoder.backward(enc_cache, d_enc)
            self.prediction.backward(pred_cache, d_pred)
        return total / B


@dataclass
class DecodeTrace:
    """Greedy-decode result and its correlation alignment.

    ``t_idx[v]``/``u_idx[v]`` name the encoder frame and prediction state
    fed to the v-th joint evaluation; ``h_pred`` holds the U+1 visited
    prediction outputs (start state plus one per emission).
    """
    tokens: list[int]
    t_idx: np.ndarray
    u_idx: np.ndarray
    per_frame_emits: np.ndarray
    h_enc: np.ndarray | None = None
    h_pred: np.ndarray | None = None
    labels: list[int] = field(default_factory=list)

    @property
    def n_pairs(self) -> int:
        return len(self.t_idx)

    @property
    def pairs(self):
        for t, u in zip(self.t_idx, self.u_idx):
            yield int(t), int(u), self.h_enc[t], self.h_pred[u]


def greedy_align(n_frames: int, tau: int, frame_labels: Callable[[int, int, int], np.ndarray],
                 advance: Callable[[int], None]) -> DecodeTrace:
    """Greedy transducer search over an abstract joint.

    ``frame_labels(t0, t1, u)`` returns the argmax label for frames
    ``t0..t1-1`` under prediction state ``u``; ``advance(token)`` moves the
    prediction network past an emitted token. Each joint evaluation records
    one aligned pair. After ``tau`` emissions on a frame the search moves on
    without a closing blank evaluation.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    tokens: list[int] = []
    t_idx: list[int] = []
    u_idx: list[int] = []
    labels: list[int] = []
    emits = np.zeros(n_frames, dtype=np.int64)
    t = 0
    u = 0
    while t < n_frames:
        if emits[t] == 0:
            # scan ahead: all frames share the prediction state until the first emission
            lab = np.asarray(frame_labels(t, n_frames, u))
            hits = np.flatnonzero(lab != BLANK)
            stop = n_frames if len(hits) == 0 else t + int(hits[0])
            t_idx.extend(range(t, min(stop + 1, n_frames)))
            u_idx.extend([u] * (min(stop + 1, n_frames) - t))
            labels.extend(int(v) for v in lab[: min(stop + 1, n_frames) - t])
            if stop == n_frames:
                break
            t = stop
            k = int(lab[hits[0]])
        else:
            k = int(np.asarray(frame_labels(t, t + 1, u))[0])
            t_idx.append(t)
            u_idx.append(u)
            labels.append(k)
            if k == BLANK:
                t += 1
                continue
        tokens.append(k)
        emits[t] += 1
        advance(k)
        u += 1
        if emits[t] >= tau:
            t += 1
    return DecodeTrace(tokens, np.asarray(t_idx, dtype=np.int64), np.asarray(u_idx, dtype=np.int64), emits,
                       labels=labels)


def greedy_decode(model: TransducerModel, frames: np.ndarray | None = None, tau: int = 1,
                  enc_out: np.ndarray | None = None) -> DecodeTrace:
    """Greedy decode of one utterance, recording the aligned (encoder, prediction) pairs."""
    if enc_out is None:
        enc, lengths, _ = model.encoder.forward_batch([np.asarray(frames, dtype=np.float64)])
        enc_out = enc[0, : lengths[0]]
    j = model.joint
    a = enc_out @ j.Q.value.T + j.b_z.value
    Vv, Wy, by = j.V.value, j.W_y.value, j.b_y.value
    pn = model.prediction
    # single-vector LSTM step with the token input projection precomputed
    H = pn.lstm.hidden
    Wh = pn.lstm.Wh.value
    x_proj = pn.embed.value @ pn.lstm.Wx.value.T + pn.lstm.b.value
    gate_scale = np.full(4 * H, 0.5)
    gate_scale[2 * H : 3 * H] = 1.0
    Pw, Pb = pn.proj.W.value, pn.proj.b.value
    out, (h0, c0) = pn.start()
    preds = [out]
    vps = [Vv @ out]
    cur = {"h": h0[0], "c": c0[0]}

    def frame_labels(t0: int, t1: int, u: int) -> np.ndarray:
        z = activate(j.act, a[t0:t1] + vps[u])
        return np.argmax(z @ Wy.T + by, axis=-1)

    def advance(token: int) -> None:
        s = np.tanh((x_proj[token] + Wh @ cur["h"]) * gate_scale)
        sig = 0.5 * (1.0 + s)
        c = sig[H : 2 * H] * cur["c"] + sig[:H] * s[2 * H : 3 * H]
        h = sig[3 * H :] * np.tanh(c)
        cur["h"], cur["c"] = h, c
        o = Pw @ h + Pb
        preds.append(o)
        vps.append(Vv @ o)

    trace = greedy_align(len(enc_out), tau, frame_labels, advance)
    trace.h_enc = enc_out
    trace.h_pred = np.vstack(preds)
    return trace


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for k, y in enumerate(b, 1):
            cur[k] = min(prev[k] + 1, cur[k - 1] + 1, prev[k - 1] + (x != y))
        prev = cur
    return prev[-1]


def token_accuracy(model: TransducerModel, utts, tau: int = 1) -> float:
    errs = 0
    total = 0
    for feats in utts:
        hyp = greedy_decode(model, feats.frames, tau).tokens
        errs += edit_distance(feats.tokens, hyp)
        total += len(feats.tokens)
    return 1.0 - errs / max(total, 1)


def train_rnnt(model: TransducerModel, train, valid, epochs: int = 3, batch_size: int = 8, lr: float = 1e-3,
               seed: int = 0, clip: float = 5.0, augment=None, max_utts: int | None = None,
               progress: Callable[[dict], None] | None = None) -> list[dict]:
    """Adam on the transducer loss with plateau decay; returns per-epoch history."""
    for utt in list(train) + list(valid):
        if utt.tokens is None or len(utt.tokens) == 0:
            raise ValueError(f"utterance {utt.utt_id} has no transcript")
    opt = Adam(model.params(), lr=lr)
    sched = PlateauDecay(opt, factor=0.5, patience=2, min_lr=1e-8)
    history = []
    for epoch in range(epochs):
        rng = make_rng(seed, 1000 + epoch)
        order = rng.permutation(len(train))
        if max_utts:
            order = order[:max_utts]
        train_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), batch_size):
            batch = [train[i] for i in order[start : start + batch_size]]
            frames = [augment(u, rng).frames if augment else u.frames for u in batch]
            opt.zero_grad()
            train_loss += model.loss_batch(frames, [u.tokens for u in batch])
            global_norm_clip(opt.params, clip)
            opt.step()
            n_batches += 1
        val = valid_loss(model, valid, batch_size)
        sched.step(val)
        rec = {"epoch": epoch + 1, "train_loss": train_loss / max(n_batches, 1), "valid_loss": val, "lr": opt.lr}
        history.append(rec)
        log.info("rnnt epoch %d train %.4f valid %.4f lr %.2e", epoch + 1, rec["train_loss"], val, opt.lr)
        if progress:
            progress(rec)
    return history


def valid_loss(model: TransducerModel, utts, batch_size: int = 16) -> float:
    total = 0.0
    for start in range(0, len(utts), batch_size):
        batch = utts[start : start + batch_size]
        total += model.loss_batch([u.frames for u in batch], [u.tokens for u in batch], backward=False) * len(batch)
    return total / max(len(utts), 1)

"""Neural building blocks with hand-written backward passes.

Everything works on padded batches: a ``(B, T, I)`` array plus per-row
lengths. Padded steps leave recurrent state untouched and receive no
gradient, so a batch gives the same numbers as its rows run one by one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numkit import DimensionError, Param, activate, activate_grad, sigmoid, xavier_uniform


def length_mask(lengths: Sequence[int], t_max: int) -> np.ndarray:
    lengths = np.asarray(lengths)
    return (np.arange(t_max)[None, :] < lengths[:, None]).astype(np.float64)


def pad_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    dim = seqs[0].shape[1]
    out = np.zeros((len(seqs), int(lengths.max()), dim))
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "linear"):
        self.W = Param(xavier_uniform(rng, n_out, n_in), f"{name}.W")
        self.b = Param(np.zeros(n_out), f"{name}.b")

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def params(self) -> list[Param]:
        return [self.W, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"{self.W.name}: input dim {x.shape[-1]} != {self.n_in}")
        return x @ self.W.value.T + self.b.value

    def backward(self, x: np.ndarray, dy: np.ndarray, need_dx: bool = True) -> np.ndarray | None:
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.W.add_grad(dy2.T @ x2)
        self.b.add_grad(dy2.sum(axis=0))
        return dy @ self.W.value if need_dx else None


@dataclass
class _LstmCache:
    x: np.ndarray
    mask: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates: np.ndarray
    c_new: np.ndarray
    tanh_c: np.ndarray


class LSTM:
    """Single unidirectional LSTM layer, gate order (i, f, g, o)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, name: str = "lstm"):
        self.hidden = hidden
        self.Wx = Param(xavier_uniform(rng, 4 * hidden, n_in), f"{name}.Wx")
        self.Wh = Param(xavier_uniform(rng, 4 * hidden, hidden), f"{name}.Wh")
        self.b = Param(np.zeros(4 * hidden), f"{name}.b")

    @property
    def n_in(self) -> int:
        return self.Wx.shape[1]

    def params(self) -> list[Param]:
        return [self.Wx, self.Wh, self.b]

    def zero_state(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros((batch, self.hidden)), np.zeros((batch, self.hidden))

    def step(self, x: np.ndarray, state: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
        """One cell update for a batch ``x`` of shape (B, I); returns (h', (h', c'))."""
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"{self.Wx.name}: input dim {x.shape[-1]} != {self.n_in}")
        h, c = state
        H = self.hidden
        a = x @ self.Wx.value.T + h @ self.Wh.value.T + self.b.value
        i = sigmoid(a[..., :H])
        f = sigmoid(a[..., H : 2 * H])
        g = np.tanh(a[..., 2 * H : 3 * H])
        o = sigmoid(a[..., 3 * H :])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        return h_new, (h_new, c_new)

    def forward(self, x: np.ndarray, lengths: Sequence[int], state=None) -> tuple[np.ndarray, _LstmCache]:
        B, T, _ = x.shape
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"{self.Wx.name}: input dim {x.shape[-1]} != {self.n_in}")
        H = self.hidden
        mask = length_mask(lengths, T)
        h, c = self.zero_state(B) if state is None else state
        Wh_T = self.Wh.value.T
        xw = x @ self.Wx.value.T + self.b.value
        out = np.empty((B, T, H))
        h_prev = np.empty((B, T, H))
        c_prev = np.empty((B, T, H))
        gates = np.empty((B, T, 4 * H))
        c_all = np.empty((B, T, H))
        tanh_all = np.empty((B, T, H))
        for t in range(T):
            h_prev[:, t] = h
            c_prev[:, t] = c
            a = xw[:, t] + h @ Wh_T
            g = gates[:, t]
            g[:, : 2 * H] = sigmoid(a[:, : 2 * H])
            g[:, 2 * H : 3 * H] = np.tanh(a[:, 2 * H : 3 * H])
            g[:, 3 * H :] = sigmoid(a[:, 3 * H :])
            cn = g[:, H : 2 * H] * c + g[:, :H] * g[:, 2 * H : 3 * H]
            tc = np.tanh(cn)
            hn = g[:, 3 * H :] * tc
            c_all[:, t] = cn
            tanh_all[:, t] = tc
            m = mask[:, t, None]
            h = m * hn + (1.0 - m) * h
            c = m * cn + (1.0 - m) * c
            out[:, t] = h
        return out, _LstmCache(x, mask, h_prev, c_prev, gates, c_all, tanh_all)

    def backward(self, cache: _LstmCache, d_out: np.ndarray, need_dx: bool = True) -> np.ndarray | None:
        x, mask = cache.x, cache.mask
        B, T, _ = x.shape
        H = self.hidden
        Wh = self.Wh.value
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        d_a = np.empty((B, T, 4 * H))
        dWh = np.zeros_like(Wh)
        for t in range(T - 1, -1, -1):
            m = mask[:, t, None]
            dh = dh + d_out[:, t]
            dh_new = m * dh
            dc_new = m * dc
            g = cache.gates[:, t]
            i, f, gg, o = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
            tc = cache.tanh_c[:, t]
            dc_new = dc_new + dh_new * o * (1.0 - tc * tc)
            da = d_a[:, t]
            da[:, :H] = dc_new * gg * i * (1.0 - i)
            da[:, H : 2 * H] = dc_new * cache.c_prev[:, t] * f * (1.0 - f)
            da[:, 2 * H : 3 * H] = dc_new * i * (1.0 - gg * gg)
            da[:, 3 * H :] = dh_new * tc * o * (1.0 - o)
            dWh += da.T @ cache.h_prev[:, t]
            dh = da @ Wh + (1.0 - m) * dh
            dc = dc_new * f + (1.0 - m) * dc
        da2 = d_a.reshape(-1, 4 * H)
        self.Wh.add_grad(dWh)
        self.Wx.add_grad(da2.T @ x.reshape(-1, x.shape[-1]))
        self.b.add_grad(da2.sum(axis=0))
        return d_a @ self.Wx.value if need_dx else None


def lstm_step(layer: LSTM, x: np.ndarray, state: tuple[np.ndarray, np.ndarray]):
    return layer.step(x, state)


def subsample(x: np.ndarray, lengths: Sequence[int], factor: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean over each group of ``factor`` valid frames; returns (out, new_lengths, counts)."""
    B, T, D = x.shape
    lengths = np.asarray(lengths)
    t_out = -(-T // factor)
    pad = t_out * factor - T
    mask = length_mask(lengths, T)
    xm = x * mask[..., None]
    if pad:
        xm = np.concatenate([xm, np.zeros((B, pad, D))], axis=1)
        mask = np.concatenate([mask, np.zeros((B, pad))], axis=1)
    sums = xm.reshape(B, t_out, factor, D).sum(axis=2)
    counts = mask.reshape(B, t_out, factor).sum(axis=2)
    out = sums / np.maximum(counts, 1.0)[..., None]
    return out, -(-lengths // factor), counts


class Encoder:
    """Mean-pool subsampling, stacked LSTMs, linear projection to the encoder dim."""

    def __init__(self, feat_dim: int, hidden: int, out_dim: int, rng: np.random.Generator,
                 n_layers: int = 2, subsample: int = 2):
        self.subsample = subsample
        self.layers = [LSTM(feat_dim if k == 0 else hidden, hidden, rng, f"enc.lstm{k}") for k in range(n_layers)]
        self.proj = Linear(hidden, out_dim, rng, "enc.proj")

    @property
    def out_dim(self) -> int:
        return self.proj.n_out

    @property
    def feat_dim(self) -> int:
        return self.layers[0].Wx.value.shape[1]

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()] + self.proj.params()

    def forward_batch(self, feats: Sequence[np.ndarray]):
        if any(len(f) == 0 for f in feats):
            raise ValueError("encoder input has an empty sequence")
        x, lengths = pad_batch(feats)
        h, out_lengths, _ = subsample(x, lengths, self.subsample)
        caches = []
        for layer in self.layers:
            h, cache = layer.forward(h, out_lengths)
            caches.append(cache)
        y = self.proj.forward(h)
        return y, out_lengths, (caches, h)

    def backward(self, cache, d_y: np.ndarray) -> None:
        caches, h_top = cache
        d = self.proj.backward(h_top, d_y)
        for k in range(len(self.layers) - 1, -1, -1):
            d = self.layers[k].backward(caches[k], d, need_dx=k > 0)


def encoder_forward(enc: Encoder, frames: np.ndarray) -> np.ndarray:
    """Encode one utterance ``(T, D)`` into ``(ceil(T/s), E)``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or len(frames) == 0:
        raise ValueError("encoder_forward needs a non-empty (T, D) sequence")
    y, lengths, _ = enc.forward_batch([frames])
    return y[0, : lengths[0]]


class PredictionNet:
    """Token embedding, one LSTM, projection; step 0 consumes a learned start vector."""

    def __init__(self, vocab: int, embed_dim: int, hidden: int, out_dim: int, rng: np.random.Generator,
                 blank: int = 0):
        self.blank = blank
        self.vocab = vocab
        self.embed = Param(xavier_uniform(rng, vocab, embed_dim), "pred.embed")
        self.sos = Param(rng.uniform(-0.1, 0.1, size=embed_dim), "pred.sos")
        self.lstm = LSTM(embed_dim, hidden, rng, "pred.lstm")
        self.proj = Linear(hidden, out_dim, rng, "pred.proj")

    @property
    def out_dim(self) -> int:
        return self.proj.n_out

    def params(self) -> list[Param]:
        return [self.embed, self.sos] + self.lstm.params() + self.proj.params()

    def _check_tokens(self, tokens: Sequence[int]) -> None:
        for tok in tokens:
            if tok == self.blank:
                raise ValueError("prediction network input contains the blank id")
            if not 0 <= tok < self.vocab:
                raise ValueError(f"token id {tok} outside vocabulary of size {self.vocab}")

    def _inputs(self, tokens: Sequence[int]) -> np.ndarray:
        return np.vstack([self.sos.value[None, :], self.embed.value[np.asarray(tokens, dtype=np.int64)]])

    def forward_batch(self, token_seqs: Sequence[Sequence[int]]):
        for toks in token_seqs:
            self._check_tokens(toks)
        x, lengths = pad_batch([self._inputs(t) for t in token_seqs])
        h, cache = self.lstm.forward(x, lengths)
        y = self.proj.forward(h)
        return y, lengths, (cache, h, [np.asarray(t, dtype=np.int64) for t in token_seqs])

    def backward(self, cache, d_y: np.ndarray) -> None:
        lstm_cache, h, token_seqs = cache
        dh = self.proj.backward(h, d_y)
        dx = self.lstm.backward(lstm_cache, dh, need_dx=True)
        if self.sos.frozen and self.embed.frozen:
            return
        self.sos.add_grad(dx[:, 0].sum(axis=0))
        d_embed = np.zeros_like(self.embed.value)
        for b, toks in enumerate(token_seqs):
            if len(toks):
                np.add.at(d_embed, toks, dx[b, 1 : len(toks) + 1])
        self.embed.add_grad(d_embed)

    def start(self):
        h, c = self.lstm.zero_state(1)
        h, state = self.lstm.step(self.sos.value[None, :], (h, c))
        return self.proj.forward(h)[0], state

    def step(self, token: int, state):
        h, state = self.lstm.step(self.embed.value[token][None, :], state)
        return self.proj.forward(h)[0], state


def prediction_forward(pn: PredictionNet, tokens: Sequence[int]) -> np.ndarray:
    """Outputs for the start condition and every prefix of ``tokens``: shape (U+1, P)."""
    y, lengths, _ = pn.forward_batch([list(tokens)])
    return y[0, : lengths[0]]


class FCStack:
    """Two fully-connected layers; the first layer's pre-activation is the embedding tap."""

    def __init__(self, n_in: int, width: int, rng: np.random.Generator, name: str = "fc", act: str = "relu"):
        self.fc1 = Linear(n_in, width, rng, f"{name}1")
        self.fc2 = Linear(width, width, rng, f"{name}2")
        self.act = act

    def params(self) -> list[Param]:
        return self.fc1.params() + self.fc2.params()

    def forward(self, x: np.ndarray):
        a1 = self.fc1.forward(x)
        h1 = activate(self.act, a1)
        a2 = self.fc2.forward(h1)
        return a1, a2, (x, h1)

    def backward(self, cache, d_a1: np.ndarray | None, d_a2: np.ndarray) -> np.ndarray:
        x, h1 = cache
        dh1 = self.fc2.backward(h1, d_a2)
        da1 = dh1 * activate_grad(self.act, h1)
        if d_a1 is not None:
            da1 = da1 + d_a1
        return self.fc1.backward(x, da1)


def fc_stack_forward(stack: FCStack, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a1, a2, _ = stack.forward(x)
    return a1, a2

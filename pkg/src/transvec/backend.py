"""LDA + length normalization + (mixture of) multinomial logistic regression."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.optimize

from .numkit import DimensionError, log_softmax, logsumexp, make_rng


@dataclass
class LdaModel:
    projection: np.ndarray  # (r, F)
    mean: np.ndarray  # (F,)
    eigenvalues: np.ndarray

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise DimensionError(f"LDA expects dim {self.mean.shape[0]}, got {x.shape[-1]}")
        return (x - self.mean) @ self.projection.T


def scatter_matrices(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    F = x.shape[1]
    sw = np.zeros((F, F))
    sb = np.zeros((F, F))
    for c in np.unique(y):
        xc = x[y == c]
        mc = xc.mean(axis=0)
        d = xc - mc
        sw += d.T @ d
        dm = (mc - mean)[:, None]
        sb += len(xc) * (dm @ dm.T)
    return sw, sb


def lda_fit(x: np.ndarray, y: Sequence[int], r: int) -> LdaModel:
    """Top-``r`` solutions of ``S_b v = lambda S_w v`` with a ridge on ``S_w``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    n_cls = len(classes)
    if n_cls < 2:
        raise ValueError("LDA needs at least two classes")
    if r < 1 or r > n_cls - 1:
        raise ValueError(f"LDA dim {r} must be in [1, {n_cls - 1}]")
    if np.any(counts < r + 1):
        raise ValueError(f"every class needs at least {r + 1} samples")
    sw, sb = scatter_matrices(x, y)
    F = x.shape[1]
    sw = sw + (1e-6 * np.trace(sw) / F) * np.eye(F)
    try:
        evals, evecs = scipy.linalg.eigh(sb, sw)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"within-class scatter is singular: {exc}") from exc
    order = np.argsort(evals)[::-1][:r]
    proj = evecs[:, order].T
    # deterministic sign: largest-magnitude coordinate positive
    signs = np.sign(proj[np.arange(r), np.argmax(np.abs(proj), axis=1)])
    proj *= signs[:, None]
    return LdaModel(proj, x.mean(axis=0), evals[order])


def length_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot length-normalize a zero vector")
    return x / norm


@dataclass
class LrModel:
    W: np.ndarray  # (M, N, r)
    b: np.ndarray  # (M, N)
    gate_W: np.ndarray | None = None  # (M, r)
    gate_b: np.ndarray | None = None  # (M,)

    @property
    def n_experts(self) -> int:
        return self.W.shape[0]

    def pack(self) -> np.ndarray:
        parts = [self.W.ravel(), self.b.ravel()]
        if self.gate_W is not None:
            parts += [self.gate_W.ravel(), self.gate_b.ravel()]
        return np.concatenate(parts)

    @classmethod
    def unpack(cls, theta: np.ndarray, M: int, N: int, r: int) -> "LrModel":
        k = M * N * r
        W = theta[:k].reshape(M, N, r)
        b = theta[k : k + M * N].reshape(M, N)
        if M == 1:
            return cls(W, b)
        o = k + M * N
        return cls(W, b, theta[o : o + M * r].reshape(M, r), theta[o + M * r : o + M * r + M])


def _log_post(model: LrModel, x: np.ndarray):
    """Log posteriors (n, N) plus the pieces the gradient needs."""
    expert = log_softmax(np.einsum("mnr,ir->imn", model.W, x) + model.b[None])  # (n, M, N)
    if model.n_experts == 1:
        return expert[:, 0], expert, None
    gate = log_softmax(x @ model.gate_W.T + model.gate_b)  # (n, M)
    joint = gate[:, :, None] + expert
    return logsumexp(joint, axis=1), expert, gate


def lr_objective(theta: np.ndarray, x: np.ndarray, y: np.ndarray, M: int, N: int, l2: float):
    """Mean cross-entropy plus ``l2/2 * ||weights||^2`` and its gradient."""
    n, r = x.shape
    model = LrModel.unpack(theta, M, N, r)
    lp, expert, gate = _log_post(model, x)
    loss = -np.mean(lp[np.arange(n), y])
    onehot = np.zeros((n, N))
    onehot[np.arange(n), y] = 1.0
    if M == 1:
        d_logits = (np.exp(expert[:, 0]) - onehot)[:, None, :] / n  # (n, 1, N)
        resp = None
    else:
        # responsibility of each expert for the true class
        ll = gate + expert[np.arange(n), :, y]  # (n, M)
        resp = np.exp(ll - logsumexp(ll, axis=1)[:, None])
        d_logits = resp[:, :, None] * (np.exp(expert) - onehot[:, None, :]) / n
    gW = np.einsum("imn,ir->mnr", d_logits, x)
    gb = d_logits.sum(axis=0)
    grads = [gW.ravel(), gb.ravel()]
    loss += 0.5 * l2 * np.sum(model.W ** 2)
    gW += l2 * model.W
    grads[0] = gW.ravel()
    if M > 1:
        d_gate = (np.exp(gate) - resp) / n
        g_gW = d_gate.T @ x + l2 * model.gate_W
        loss += 0.5 * l2 * np.sum(model.gate_W ** 2)
        grads += [g_gW.ravel(), d_gate.sum(axis=0)]
    return float(loss), np.concatenate(grads)


def lr_fit(x: np.ndarray, y: Sequence[int], n_classes: int | None = None, mixtures: int = 1, l2: float = 1e-3,
           iters: int = 500, seed: int = 0) -> LrModel:
    """Full-batch quasi-Newton (L-BFGS) fit of the regularized cross-entropy."""
    if mixtures < 1:
        raise ValueError("mixture count must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    N = int(n_classes if n_classes is not None else y.max() + 1)
    n, r = x.shape
    M = mixtures
    rng = make_rng(seed, 31)
    size = M * N * r + M * N + (M * r + M if M > 1 else 0)
    theta0 = np.zeros(size) if M == 1 else rng.normal(scale=0.1, size=size)
    res = scipy.optimize.minimize(lr_objective, theta0, args=(x, y, M, N, l2), jac=True, method="L-BFGS-B",
                                  options={"maxiter": iters, "gtol": 1e-10, "ftol": 1e-14})
    return LrModel.unpack(res.x, M, N, r)


def lr_score(model: LrModel, x: np.ndarray) -> np.ndarray:
    """Log posteriors; a single vector in gives a single vector out."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != model.W.shape[2]:
        raise DimensionError(f"LR expects dim {model.W.shape[2]}, got {x2.shape[1]}")
    lp, _, _ = _log_post(model, x2)
    return lp[0] if single else lp


@dataclass
class Backend:
    lda: LdaModel
    lr: LrModel

    def features(self, x: np.ndarray) -> np.ndarray:
        return length_normalize(self.lda.transform(x))

    def score(self, x: np.ndarray) -> np.ndarray:
        return lr_score(self.lr, self.features(x))

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"lda.projection": self.lda.projection, "lda.mean": self.lda.mean, "lda.eigenvalues": self.lda.eigenvalues,
               "lr.W": self.lr.W, "lr.b": self.lr.b}
        if self.lr.gate_W is not None:
            out["lr.gate_W"] = self.lr.gate_W
            out["lr.gate_b"] = self.lr.gate_b
        return out

    @classmethod
    def from_arrays(cls, arrs) -> "Backend":
        lda = LdaModel(arrs["lda.projection"], arrs["lda.mean"], arrs["lda.eigenvalues"])
        lr = LrModel(arrs["lr.W"], arrs["lr.b"], arrs.get("lr.gate_W"), arrs.get("lr.gate_b"))
        return cls(lda, lr)


def backend_fit(x: np.ndarray, y: Sequence[int], n_classes: int, lda_dim: int = 0, mixtures: int = 1,
                l2: float = 1e-3, iters: int = 500, seed: int = 0) -> Backend:
    r = lda_dim or n_classes - 1
    lda = lda_fit(x, y, r)
    feats = length_normalize(lda.transform(x))
    return Backend(lda, lr_fit(feats, y, n_classes, mixtures, l2, iters, seed))


# -- score file -----------------------------------------------------------------

def write_scores(path, utt_ids: Sequence[str], scores: np.ndarray) -> None:
    scores = np.atleast_2d(scores)
    N = scores.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("utt_id\t" + "\t".join(f"lang_{k}" for k in range(N)) + "\n")
        for uid, row in zip(utt_ids, scores):
            fh.write(uid + "\t" + "\t".join(f"{v:.6f}" for v in row) + "\n")


def read_scores(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if not header or header[0] != "utt_id":
            raise ValueError(f"{path}: missing utt_id header")
        ids, rows = [], []
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(header):
                raise ValueError(f"{path}: row {len(ids) + 2} has {len(parts)} columns, expected {len(header)}")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    return ids, np.array(rows).reshape(len(ids), len(header) - 1)

"""Closed-set LID scoring: hard decisions, Cavg, accuracy, confusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class TrialSet:
    utt_ids: list[str]
    truth: np.ndarray  # (n,)
    scores: np.ndarray  # (n, N)

    def __post_init__(self):
        self.truth = np.asarray(self.truth, dtype=np.int64)
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        if len(self.truth) != len(self.scores):
            raise ValueError("truth and score counts differ")
        if len(self.truth) and (self.truth.min() < 0 or self.truth.max() >= self.n_langs):
            raise ValueError(f"true language ids must lie in [0, {self.n_langs})")

    @property
    def n_langs(self) -> int:
        return self.scores.shape[1]

    def decisions(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lowest index
        return np.argmax(self.scores, axis=1)


def decide(scores: Sequence[float]) -> int:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no scores to decide from")
    return int(np.argmax(scores))


def confusion(trials: TrialSet) -> np.ndarray:
    N = trials.n_langs
    out = np.zeros((N, N), dtype=np.int64)
    np.add.at(out, (trials.truth, trials.decisions()), 1)
    return out


def accuracy(trials: TrialSet) -> float:
    c = confusion(trials)
    return float(np.trace(c) / max(c.sum(), 1))


def cavg(trials: TrialSet, p_target: float = 0.5) -> float:
    """Average detection cost over target languages from argmax decisions."""
    N = trials.n_langs
    c = confusion(trials)
    per_lang = c.sum(axis=1)
    if np.any(per_lang == 0):
        missing = np.flatnonzero(per_lang == 0).tolist()
        raise ValueError(f"languages {missing} have no trials")
    rates = c / per_lang[:, None]  # rates[true, decided]
    total = 0.0
    for lt in range(N):
        p_miss = 1.0 - rates[lt, lt]
        p_fa = sum(rates[ln, lt] for ln in range(N) if ln != lt)
        total += p_target * p_miss + (1.0 - p_target) / (N - 1) * p_fa
    return total / N


def random_decision_cavg(n_langs: int, p_target: float = 0.5) -> float:
    """Expected Cavg when decisions are uniform over the languages."""
    N = n_langs
    return p_target * (N - 1) / N + (1.0 - p_target) / N

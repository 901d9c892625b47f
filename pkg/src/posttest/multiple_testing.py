"""Bonferroni, Benjamini-Hochberg and Benjamini-Yekutieli over sequential p-values.

All procedures return the rejected positions as indices into the input order.
Equal p-values are ranked by label (stable), so results are permutation
equivariant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .distributions import InvalidArgument

__all__ = [
    "MultipleTestInput",
    "bonferroni",
    "benjamini_hochberg",
    "benjamini_yekutieli",
    "run_multiple_post",
    "PROCEDURES",
    "HorizonMismatchError",
]


class HorizonMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class MultipleTestInput:
    p_values: tuple[float, ...]
    alpha: float
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        p = tuple(float(v) for v in self.p_values)
        if not p:
            raise InvalidArgument("need at least one p-value")
        if not all(0.0 <= v <= 1.0 for v in p):
            raise InvalidArgument("p-values must lie in [0, 1]")
        if not (0.0 < self.alpha < 1.0):
            raise InvalidArgument("alpha must lie in (0, 1)")
        labels = self.labels
        if labels is None:
            labels = tuple(f"{i:09d}" for i in range(len(p)))
        labels = tuple(str(v) for v in labels)
        if len(labels) != len(p):
            raise InvalidArgument("labels and p-values differ in length")
        object.__setattr__(self, "p_values", p)
        object.__setattr__(self, "labels", labels)

    @property
    def m(self) -> int:
        return len(self.p_values)

    def order(self) -> list[int]:
        return sorted(range(self.m), key=lambda i: (self.p_values[i], self.labels[i]))


def _coerce(p_values, alpha, labels) -> MultipleTestInput:
    if isinstance(p_values, MultipleTestInput):
        return p_values
    return MultipleTestInput(tuple(np.asarray(p_values, dtype=float).reshape(-1)), alpha,
                             None if labels is None else tuple(labels))


def _step_up(inp: MultipleTestInput, thresholds: np.ndarray) -> list[int]:
    order = inp.order()
    p_sorted = np.array([inp.p_values[i] for i in order])
    hits = np.nonzero(p_sorted <= thresholds)[0]
    if hits.size == 0:
        return []
    return sorted(order[: hits[-1] + 1])


def bonferroni(p_values, alpha: float = 0.05, labels=None) -> list[int]:
    """Per-test form: reject i when p_i <= alpha / m."""
    inp = _coerce(p_values, alpha, labels)
    cut = inp.alpha / inp.m
    return [i for i, p in enumerate(inp.p_values) if p <= cut]


def benjamini_hochberg(p_values, alpha: float = 0.05, labels=None) -> list[int]:
    inp = _coerce(p_values, alpha, labels)
    j = np.arange(1, inp.m + 1)
    return _step_up(inp, inp.alpha * j / inp.m)


def benjamini_yekutieli(p_values, alpha: float = 0.05, labels=None) -> list[int]:
    """BH with every threshold divided by the harmonic number H_m."""
    inp = _coerce(p_values, alpha, labels)
    j = np.arange(1, inp.m + 1)
    h_m = math.fsum(1.0 / r for r in range(1, inp.m + 1))
    return _step_up(inp, inp.alpha * j / (inp.m * h_m))


PROCEDURES = {"bc": bonferroni, "bh": benjamini_hochberg, "by": benjamini_yekutieli}


def run_multiple_post(states: Sequence, alpha: float = 0.05, procedure: str = "by") -> np.ndarray:
    """0/1 decision per experiment from the current running-minimum p-values.

    Every experiment must sit at the same point of the batch schedule (same
    number of ingested batches and the same per-arm counts).
    """
    from .sequential import current_p_value

    if procedure not in PROCEDURES:
        raise InvalidArgument(f"unknown procedure {procedure!r}; choose from {sorted(PROCEDURES)}")
    if not states:
        raise InvalidArgument("no experiments")
    marks = {(s.last_sequence, s.n_control, s.n_treat) for s in states}
    if len(marks) != 1:
        raise HorizonMismatchError(f"experiments are at different horizons: {sorted(marks)}")
    p = [current_p_value(s) for s in states]
    labels = [s.experiment_id for s in states]
    rejected = PROCEDURES[procedure](p, alpha, labels)
    d = np.zeros(len(states), dtype=int)
    d[rejected] = 1
    return d

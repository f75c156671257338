"""Module partitioning and per-epoch active-set selection under a parameter budget."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class Role(str, enum.Enum):
    Wq = "Wq"
    Wk = "Wk"
    Wv = "Wv"
    Wo = "Wo"
    W1 = "W1"
    W2 = "W2"
    Other = "Other"


TRANSFORMER_ROLES = (Role.Wq, Role.Wk, Role.Wv, Role.Wo, Role.W1, Role.W2)


class Strategy(str, enum.Enum):
    Misa = "misa"
    Uniform = "uniform"
    TopK = "topk"
    BottomK = "bottomk"


class BudgetError(ValueError):
    """No module fits under the trainable-parameter budget."""


@dataclass(frozen=True)
class ModuleSpec:
    id: int
    layer_index: int
    role: Role
    rows: int
    cols: int

    @property
    def param_count(self) -> int:
        return self.rows * self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


@dataclass(frozen=True)
class ActiveSet:
    ids: frozenset
    total_params: int

    def __contains__(self, module_id) -> bool:
        return module_id in self.ids

    def sorted_ids(self) -> list[int]:
        return sorted(self.ids)


def partition_model(description: Iterable[tuple]) -> list[ModuleSpec]:
    """One :class:`ModuleSpec` per ``(layer_index, role, rows, cols)`` entry, ids in order."""
    specs = []
    for i, (layer, role, rows, cols) in enumerate(description):
        if rows <= 0 or cols <= 0:
            raise ValueError(f"module {i} has zero-sized shape {rows}x{cols}")
        if layer < 0:
            raise ValueError(f"module {i} has negative layer index {layer}")
        specs.append(ModuleSpec(i, int(layer), Role(role), int(rows), int(cols)))
    if not specs:
        raise ValueError("model description is empty")
    return specs


def model_size(specs: Sequence[ModuleSpec]) -> int:
    return sum(s.param_count for s in specs)


def _budget(specs, delta):
    if not 0 < delta <= 1:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    n_model = model_size(specs)
    budget = delta * n_model
    if delta < 1 and budget <= min(s.param_count for s in specs):
        raise BudgetError(
            f"budget {budget:g} of {n_model} parameters admits no module "
            f"(smallest has {min(s.param_count for s in specs)})")
    return budget


def _everything(specs) -> ActiveSet:
    return ActiveSet(frozenset(s.id for s in specs), model_size(specs))


def _greedy(specs, order, budget) -> ActiveSet:
    # strict inequality: a module that exactly fills the budget is rejected
    chosen, total = [], 0
    for i in order:
        count = specs[i].param_count
        if total + count < budget:
            chosen.append(specs[i].id)
            total += count
    return ActiveSet(frozenset(chosen), total)


def select_budgeted(specs: Sequence[ModuleSpec], probs, delta: float,
                    rng: np.random.Generator) -> ActiveSet:
    """Draw modules without replacement by ``probs`` and keep those that fit.

    The remaining probabilities are renormalized after each draw. Every module
    is drawn once; a module is kept iff the running total plus its size stays
    strictly under ``delta * n_model``. ``delta == 1`` keeps everything.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (len(specs),):
        raise ValueError(f"{p.size} probabilities for {len(specs)} modules")
    budget = _budget(specs, delta)
    if delta == 1:
        return _everything(specs)
    remaining = list(range(len(specs)))
    order = []
    while remaining:
        w = p[remaining]
        total = w.sum()
        if total > 0:
            k = rng.choice(len(remaining), p=w / total)
        else:
            k = rng.integers(len(remaining))
        order.append(remaining.pop(int(k)))
    return _greedy(specs, order, budget)


def select_uniform(specs: Sequence[ModuleSpec], delta: float,
                   rng: np.random.Generator) -> ActiveSet:
    return select_budgeted(specs, np.full(len(specs), 1.0 / len(specs)), delta, rng)


def _ranked(specs, gains, delta, descending):
    g = np.asarray(gains, dtype=np.float64)
    if g.shape != (len(specs),):
        raise ValueError(f"{g.size} gains for {len(specs)} modules")
    budget = _budget(specs, delta)
    if delta == 1:
        return _everything(specs)
    sign = -1.0 if descending else 1.0
    # ties go to the lower module id
    order = sorted(range(len(specs)), key=lambda i: (sign * g[i], specs[i].id))
    return _greedy(specs, order, budget)


def select_topk(specs: Sequence[ModuleSpec], gains, delta: float) -> ActiveSet:
    return _ranked(specs, gains, delta, descending=True)


def select_bottomk(specs: Sequence[ModuleSpec], gains, delta: float) -> ActiveSet:
    return _ranked(specs, gains, delta, descending=False)


def select(strategy: Strategy, specs, probs, gains, delta, rng) -> ActiveSet:
    strategy = Strategy(strategy)
    if strategy is Strategy.Misa:
        return select_budgeted(specs, probs, delta, rng)
    if strategy is Strategy.Uniform:
        return select_uniform(specs, delta, rng)
    if strategy is Strategy.TopK:
        return select_topk(specs, gains, delta)
    return select_bottomk(specs, gains, delta)

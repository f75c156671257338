"""Peak-memory and backward-FLOPs formulas for layer-, module-wise and low-rank training.

Every count is in parameter elements (multiply by bytes per element for
memory). Formulas that involve the trainable fraction ``delta`` are evaluated
in exact rational arithmetic and return :class:`fractions.Fraction`; the rest
return ``int``.

Notation: ``L`` layers, hidden size ``h``, ``a`` heads, batch ``b``, sequence
length ``s``, low rank ``r``. Embedding and LM head are frozen and excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

Number = Union[int, Fraction]

MODULE_ROWS = ("Wq", "Wk", "Wv", "Wo", "W1", "W2", "All")

# indicator upkeep: squared-norm accumulation (2 flops per element) and
# exp + normalize per module (4 flops per module)
INDICATOR_NORM_FLOPS = 2
INDICATOR_PROB_FLOPS = 4


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


def _tidy(x: Fraction) -> Number:
    return int(x) if x.denominator == 1 else x


@dataclass(frozen=True)
class ArchShape:
    L: int
    h: int
    a: int
    b: int
    s: int
    r: int = 0
    delta: Fraction = field(default=Fraction(1))
    v: Optional[int] = None  # vocabulary size; appears in no formula

    def __post_init__(self):
        for name in ("L", "h", "a", "b", "s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.r < 0:
            raise ValueError("r must be nonnegative")
        if self.h % self.a:
            raise ValueError(f"h={self.h} is not divisible by a={self.a}")
        d = _frac(self.delta)
        if not 0 <= d <= 1:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        object.__setattr__(self, "delta", d)

    @property
    def bsh(self) -> int:
        return self.b * self.s * self.h

    @property
    def abs2(self) -> int:
        return self.a * self.b * self.s * self.s


def replace(shape: ArchShape, **kw) -> ArchShape:
    values = {k: getattr(shape, k) for k in ("L", "h", "a", "b", "s", "r", "delta", "v")}
    values.update(kw)
    return ArchShape(**values)


@dataclass(frozen=True)
class MemoryReport:
    method: str
    target: Optional[str]
    parameters: Number
    activations: Number
    optimizer_and_grads: Number

    @property
    def peak_elements(self) -> Number:
        return _tidy(_frac(self.parameters) + _frac(self.activations)
                     + _frac(self.optimizer_and_grads))

    def as_dict(self) -> dict:
        return {"method": self.method, "target": self.target,
                "peak_elements": _num(self.peak_elements),
                "breakdown": {"parameters": _num(self.parameters),
                              "activations": _num(self.activations),
                              "optimizer_and_grads": _num(self.optimizer_and_grads)}}


def _num(x):
    return x if isinstance(x, int) else float(x)


# -- activation accounting ---------------------------------------------------

def frozen_layer_activations(shape: ArchShape) -> int:
    """Q, K, V, S, U and the ReLU mask."""
    return shape.abs2 + 8 * shape.bsh


def active_layer_activations(shape: ArchShape) -> int:
    """Frozen set plus X, O, Z and Z1."""
    return shape.abs2 + 15 * shape.bsh


# -- peak memory -------------------------------------------------------------

def layerwise_report(shape: ArchShape) -> MemoryReport:
    L, h = shape.L, shape.h
    return MemoryReport("LayerwiseBCD", None, 12 * h * h * L,
                        L * frozen_layer_activations(shape) + 7 * shape.bsh, 36 * h * h)


def layerwise_peak(shape: ArchShape) -> int:
    """``L(abs^2 + 8bsh) + 7bsh + 12h^2 L + 36h^2``."""
    return layerwise_report(shape).peak_elements


def misa_report(shape: ArchShape) -> MemoryReport:
    L, h, d = shape.L, shape.h, shape.delta
    return MemoryReport("MISA", None, 12 * h * h * L,
                        _tidy(L * frozen_layer_activations(shape) + 12 * shape.bsh * d * L),
                        _tidy(36 * h * h * d * L))


def misa_peak(shape: ArchShape) -> Number:
    """``L(abs^2 + 8bsh + 12h^2 + 12bsh delta + 36h^2 delta)``."""
    return misa_report(shape).peak_elements


# per-row (extra activation in bsh units, optimizer+grad in h^2 units)
_MODULEWISE_EXTRA = {"Wq": (1, 3), "Wk": (1, 3), "Wv": (1, 3), "Wo": (1, 3),
                     "W1": (1, 12), "W2": (4, 12), "All": (7, 36)}
# per-row (activation bsh coefficient, adapter term hr coefficient), literal table values
_LORA_ROWS = {"Wq": (9, 8), "Wk": (9, 8), "Wv": (9, 8), "Wo": (9, 4),
              "W1": (9, 20), "W2": (12, 20), "All": (15, 72)}
_GALORE_ROWS = {"Wq": (9, 4), "Wk": (9, 4), "Wv": (9, 4), "Wo": (9, 8),
                "W1": (9, 13), "W2": (12, 13), "All": (15, 42)}


def _row(table, target):
    if target not in table:
        raise ValueError(f"unknown target {target!r}; expected one of {MODULE_ROWS}")
    return table[target]


def modulewise_report(shape: ArchShape, role: str) -> MemoryReport:
    act, opt = _row(_MODULEWISE_EXTRA, role)
    L, h = shape.L, shape.h
    return MemoryReport("ModulewiseBCD", role, 12 * h * h * L,
                        L * frozen_layer_activations(shape) + act * shape.bsh, opt * h * h)


def modulewise_peak(shape: ArchShape, role: str) -> int:
    return modulewise_report(shape, role).peak_elements


def lora_report(shape: ArchShape, target: str) -> MemoryReport:
    # the table folds adapter activations, states and parameters into one hr term
    act, hr = _row(_LORA_ROWS, target)
    L, h = shape.L, shape.h
    return MemoryReport("LoRA", target, 12 * h * h * L,
                        L * (shape.abs2 + act * shape.bsh), hr * h * shape.r * L)


def lora_peak(shape: ArchShape, target: str) -> int:
    return lora_report(shape, target).peak_elements


def galore_report(shape: ArchShape, target: str) -> MemoryReport:
    act, hr = _row(_GALORE_ROWS, target)
    L, h = shape.L, shape.h
    return MemoryReport("GaLore", target, 12 * h * h * L,
                        L * (shape.abs2 + act * shape.bsh), hr * h * shape.r * L)


def galore_peak(shape: ArchShape, target: str) -> int:
    return galore_report(shape, target).peak_elements


def lora_trainable_params(shape: ArchShape) -> int:
    """Adapter parameter count used in the parameters-per-memory comparison."""
    return 18 * shape.r * shape.h * shape.L


def layerwise_trainable_params(shape: ArchShape) -> int:
    return 12 * shape.h * shape.h


# -- crossover thresholds ----------------------------------------------------

def delta_threshold_vs_layerwise(shape: ArchShape) -> Fraction:
    """MISA peaks below layer-wise iff ``delta`` is below this value."""
    b, s, h, L = shape.b, shape.s, shape.h, shape.L
    return Fraction(7 * b * s + 36 * h, 12 * b * s * L + 36 * h * L)


def seqlen_crossover_vs_lora(shape: ArchShape) -> Fraction:
    """Sequence length above which layer-wise peaks below all-module GaLore and LoRA.

    Uses the ``42 rL`` coefficient (the all-module GaLore row); since the LoRA
    row carries ``72 hr`` the same bound also beats LoRA. Returns 0 when the
    numerator is nonpositive: layer-wise then wins at every length.
    """
    b, h, r, L = shape.b, shape.h, shape.r, shape.L
    if L == 1:
        raise ValueError("crossover is undefined for a single layer")
    num = 36 * h - 42 * r * L
    if num <= 0:
        return Fraction(0)
    return Fraction(num, 7 * b * (L - 1))


def params_per_memory_dominance(shape: ArchShape) -> bool:
    """Sufficient condition ``r < 2h/(3L)`` for layer-wise to update more parameters per peak element than LoRA."""
    return 3 * shape.r * shape.L < 2 * shape.h


# -- backward FLOPs ----------------------------------------------------------

def _attention_and_norm_flops(shape: ArchShape) -> int:
    b, s, h, a = shape.b, shape.s, shape.h, shape.a
    return 8 * b * s * s * h + 2 * b * a * s * s + 14 * b * s * h


def backward_flops_active(shape: ArchShape) -> int:
    """``34bsh^2 + 8bs^2h + 2bas^2 + 14bsh`` for one layer with weight gradients."""
    return 34 * shape.bsh * shape.h + _attention_and_norm_flops(shape)


def backward_flops_frozen(shape: ArchShape) -> int:
    """``10bsh^2 + 8bs^2h + 2bas^2 + 14bsh``; the 24bsh^2 weight-gradient terms are skipped."""
    return 10 * shape.bsh * shape.h + _attention_and_norm_flops(shape)


def layerwise_total_flops(shape: ArchShape) -> int:
    return (shape.L - 1) * backward_flops_frozen(shape) + backward_flops_active(shape)


def modulewise_max_flops(shape: ArchShape) -> Number:
    return _tidy(shape.L * backward_flops_frozen(shape)
                 + 24 * shape.bsh * shape.h * shape.L * shape.delta)


def indicator_overhead(B: int, h: int) -> tuple[int, int]:
    """Memory (gains and probabilities) and FLOPs to maintain the sampling indicators."""
    if B <= 0:
        raise ValueError("B must be positive")
    if h <= 0:
        raise ValueError("h must be positive")
    return 2 * B, INDICATOR_NORM_FLOPS * h * h + INDICATOR_PROB_FLOPS * B


def plan(shape: ArchShape) -> dict:
    """Every report and threshold for one shape, as plain JSON-ready values."""
    rows = [layerwise_report(shape).as_dict(), misa_report(shape).as_dict()]
    rows += [modulewise_report(shape, t).as_dict() for t in MODULE_ROWS]
    rows += [lora_report(shape, t).as_dict() for t in MODULE_ROWS]
    rows += [galore_report(shape, t).as_dict() for t in MODULE_ROWS]
    thr = delta_threshold_vs_layerwise(shape)
    out = {
        "shape": {"L": shape.L, "h": shape.h, "a": shape.a, "b": shape.b, "s": shape.s,
                  "r": shape.r, "v": shape.v, "delta": float(shape.delta), "delta_exact": str(shape.delta)},
        "memory": rows,
        "flops": {
            "backward_active_layer": backward_flops_active(shape),
            "backward_frozen_layer": backward_flops_frozen(shape),
            "layerwise_total": layerwise_total_flops(shape),
            "modulewise_max": _num(modulewise_max_flops(shape)),
        },
        "thresholds": {
            "delta_vs_layerwise": float(thr),
            "misa_cheaper_than_layerwise": shape.delta < thr,
            "seqlen_crossover_vs_lora": (float(seqlen_crossover_vs_lora(shape))
                                         if shape.L > 1 else None),
            "layerwise_params_per_memory_beats_lora": params_per_memory_dominance(shape),
        },
    }
    return out

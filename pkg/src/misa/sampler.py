"""Importance sampling over modules.

Gains are EMA estimates of each module's scaled squared gradient norm. The
sampling distribution maximizes expected descent minus a KL penalty towards
uniform, which has a softmax closed form with temperature ``eta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

# exp(700) is still finite in float64
_EXP_CAP = 700.0


@dataclass(frozen=True)
class SamplerConfig:
    eta: float = 0.5
    ema_beta: float = 0.9
    gain_clamp: Optional[float] = None

    def __post_init__(self):
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise ValueError(f"eta must be a finite nonnegative number, got {self.eta}")
        if not 0 <= self.ema_beta < 1:
            raise ValueError(f"ema_beta must lie in [0, 1), got {self.ema_beta}")
        if self.gain_clamp is not None and not self.gain_clamp >= 0:
            raise ValueError(f"gain_clamp must be nonnegative, got {self.gain_clamp}")


def _as_distribution(probs, atol=1e-12) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probabilities must be a nonempty vector")
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise ValueError("probabilities must be finite and nonnegative")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return p


def kl_regularized_objective(probs, gains, eta: float) -> float:
    """Expected gain minus ``(1/eta) * KL(probs || uniform)``.

    Zero probabilities contribute nothing to the KL term (``0 ln 0 = 0``).
    """
    if not eta > 0:
        raise ValueError("eta must be strictly positive for the regularized objective")
    p = _as_distribution(probs, atol=1e-9)
    g = np.asarray(gains, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError(f"length mismatch: {p.size} probabilities vs {g.size} gains")
    nz = p > 0
    kl = float(np.sum(p[nz] * np.log(p[nz] * p.size)))
    return float(p @ g) - kl / eta


def optimal_distribution(gains, eta: float) -> np.ndarray:
    """Softmax of ``eta * gains``; exactly uniform when ``eta == 0``."""
    g = np.asarray(gains, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ValueError("gains must be a nonempty vector")
    if not np.all(np.isfinite(g)):
        raise ValueError("gains must be finite")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if eta == 0:
        return np.full(g.size, 1.0 / g.size)
    z = np.minimum(eta * g, _EXP_CAP)
    w = np.exp(z - z.max())
    return w / w.sum()


def scaled_sq_norm(grad, param_count: int) -> float:
    """Squared Frobenius norm divided by the module's parameter count."""
    if param_count <= 0:
        raise ValueError("param_count must be positive")
    g = np.asarray(grad, dtype=np.float64)
    if g.size != param_count:
        raise ValueError(f"param_count {param_count} does not match gradient size {g.size}")
    return float(np.vdot(g, g)) / param_count


def update_gains(prev, sampled, period_avg_sq_norms: Mapping[int, float],
                 cfg: SamplerConfig) -> np.ndarray:
    """EMA refresh of the gains of sampled modules; unsampled gains are frozen.

    With ``cfg.gain_clamp`` set, refreshed gains are capped at the clamp so the
    probability lower bound of :func:`probability_lower_bound` applies.
    """
    out = np.array(prev, dtype=np.float64)
    beta = cfg.ema_beta
    for b in sampled:
        if not 0 <= b < out.size:
            raise IndexError(f"module index {b} out of range for {out.size} modules")
        avg = float(period_avg_sq_norms[b])
        if avg < 0:
            raise ValueError("period averages must be nonnegative")
        out[b] = beta * out[b] + (1.0 - beta) * avg
        if cfg.gain_clamp is not None:
            out[b] = min(out[b], cfg.gain_clamp)
    return out


def modulewise_dominance_gap(layer_partition: Sequence[Sequence[float]], eta: float) -> float:
    """Objective advantage of module-wise over layer-wise importance sampling.

    The layer-wise competitor samples a layer and spreads its mass evenly over
    the layer's modules, so it is the module problem restricted to
    layer-uniform distributions; its optimum weights each layer by the mean
    gain of its modules. The advantage equals ``KL(lifted || module_opt) / eta``
    and that form is used for accuracy.
    """
    if not eta > 0:
        raise ValueError("eta must be strictly positive")
    if len(layer_partition) == 0:
        raise ValueError("need at least one layer")
    layers = [np.asarray(layer, dtype=np.float64) for layer in layer_partition]
    for layer in layers:
        if layer.size == 0:
            raise ValueError("empty layer in partition")
        if np.any(layer < 0):
            raise ValueError("gains must be nonnegative")
    flat = np.concatenate(layers)
    p_mod = optimal_distribution(flat, eta)
    p_layer = optimal_distribution(np.array([layer.mean() for layer in layers]), eta)
    lifted = np.concatenate([np.full(layer.size, p_layer[i] / layer.size)
                             for i, layer in enumerate(layers)])
    kl = float(np.sum(lifted * (np.log(lifted) - np.log(p_mod))))
    return max(kl, 0.0) / eta


def layerwise_lifted_distribution(layer_partition: Sequence[Sequence[float]], eta: float) -> np.ndarray:
    """The layer-wise optimum spread evenly over each layer's modules."""
    layers = [np.asarray(layer, dtype=np.float64) for layer in layer_partition]
    p_layer = optimal_distribution(np.array([layer.mean() for layer in layers]), eta)
    return np.concatenate([np.full(layer.size, p_layer[i] / layer.size)
                           for i, layer in enumerate(layers)])


def probability_lower_bound(B: int, eta: float, gain_upper: float) -> float:
    """Smallest probability any module can get when all gains lie in ``[0, gain_upper]``."""
    if B <= 0:
        raise ValueError("B must be positive")
    if not math.isfinite(gain_upper) or gain_upper < 0:
        raise ValueError("gain_upper must be finite and nonnegative")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    return 1.0 / (B * math.exp(min(eta * gain_upper, _EXP_CAP)))

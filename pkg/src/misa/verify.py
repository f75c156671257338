"""Oracle suites behind ``misa verify``.

Each suite checks a component against an independent reference: an exact
dynamic-programming search over the probability simplex grid, central finite
differences, brute-force evaluation of both sides of each cost comparison,
and live activation caches.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import cost_model as cm
from .engine import EngineConfig, Variant, run_misa
from .model_zoo import (
    QuadraticTask,
    QuarticTask,
    TransformerLayerParams,
    cache_elements,
    count_stored_activation_elems,
    finite_difference_grad,
    layer_forward,
    layer_backward,
    relative_error,
)
from .partition import TRANSFORMER_ROLES
from .sampler import (
    SamplerConfig,
    kl_regularized_objective,
    layerwise_lifted_distribution,
    modulewise_dominance_gap,
    optimal_distribution,
    probability_lower_bound,
)


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    total: int = 0
    failures: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.total > 0 and self.passed == self.total

    def check(self, condition: bool, what: str):
        self.total += 1
        if condition:
            self.passed += 1
        else:
            self.failures.append(what)

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"[{status}] {self.name}: {self.passed}/{self.total}"


# -- sampling optimum --------------------------------------------------------

def _phi(gains_b, eta, B, M):
    p = np.arange(M + 1) / M
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(p > 0, p * np.log(p * B), 0.0)
    return p * gains_b - ent / eta


def grid_maximum(gains, eta, step=1e-3) -> float:
    """Best objective value over all simplex points whose coordinates are multiples of ``step``.

    Exact max-plus dynamic program over coordinates; does not use the softmax.
    """
    gains = np.asarray(gains, dtype=np.float64)
    B = gains.size
    M = int(round(1 / step))
    j = np.arange(M + 1)[:, None]
    k = np.arange(M + 1)[None, :]
    valid = k <= j
    idx = np.where(valid, j - k, 0)
    best = _phi(gains[0], eta, B, M)
    for b in range(1, B - 1):
        phi = _phi(gains[b], eta, B, M)
        cand = np.where(valid, best[idx] + phi[None, :], -np.inf)
        best = cand.max(axis=1)
    phi = _phi(gains[-1], eta, B, M)
    return float(np.max(best[::-1] + phi))


def grid_argmax_2(gains, eta, step=1e-4) -> np.ndarray:
    M = int(round(1 / step))
    vals = _phi(gains[0], eta, 2, M) + _phi(gains[1], eta, 2, M)[::-1]
    x = int(np.argmax(vals)) / M
    return np.array([x, 1 - x])


def suite_sampling(n_instances: int = 200, seed: int = 0) -> SuiteResult:
    res = SuiteResult("sampling")
    rng = np.random.default_rng(seed)
    worst = math.inf
    for i in range(n_instances):
        B = int(rng.integers(2, 7))
        gains = rng.uniform(0, 5, B)
        eta = float(rng.choice([0.1, 0.5, 1.0]))
        p = optimal_distribution(gains, eta)
        closed = kl_regularized_objective(p, gains, eta)
        margin = closed - grid_maximum(gains, eta, 1e-3)
        worst = min(worst, margin)
        ok = margin >= -1e-9
        if B == 2:
            ok = ok and bool(np.all(np.abs(grid_argmax_2(gains, eta) - p) <= 1e-4))
        res.check(ok, f"instance {i}: B={B} eta={eta} margin={margin:.3e}")
    res.stats["worst_margin"] = worst
    return res


# -- module vs layer dominance -------------------------------------------------

def suite_dominance(n_instances: int = 1000, seed: int = 1) -> SuiteResult:
    res = SuiteResult("dominance")
    rng = np.random.default_rng(seed)
    for i in range(n_instances):
        layers = [rng.uniform(0, 5, int(rng.integers(1, 7))).tolist()
                  for _ in range(int(rng.integers(1, 7)))]
        eta = float(rng.choice([0.1, 0.5, 1.0]))
        gap = modulewise_dominance_gap(layers, eta)
        flat = np.concatenate(layers)
        direct = (kl_regularized_objective(optimal_distribution(flat, eta), flat, eta)
                  - kl_regularized_objective(layerwise_lifted_distribution(layers, eta), flat, eta))
        ok = gap >= -1e-12 and abs(gap - direct) <= 1e-9
        spread = max(max(l) - min(l) for l in layers)
        if spread >= 0.1 and eta >= 0.5:
            ok = ok and gap > 1e-8
        res.check(ok, f"instance {i}: gap={gap:.3e} direct={direct:.3e} spread={spread:.3f} eta={eta}")
    return res


# -- gradient exactness ------------------------------------------------------

GRAD_SHAPES = list(itertools.product((4, 8), (2, 4), (1, 2), (1, 2)))


def suite_gradients(seed: int = 7, step: float = 1e-5, tol: float = 1e-6) -> SuiteResult:
    res = SuiteResult("gradients")
    worst = 0.0
    for h, s, b, a in GRAD_SHAPES:
        rng = np.random.default_rng([seed, h, s, b, a])
        params = TransformerLayerParams.random(h, a, rng)
        X = rng.standard_normal((b, s, h))
        probe = rng.standard_normal((b, s, h))
        _, cache = layer_forward(X, params, TRANSFORMER_ROLES)
        grads, _ = layer_backward(probe, cache, params, TRANSFORMER_ROLES)
        for role in TRANSFORMER_ROLES:
            W = params.weight(role)

            def loss(w, role=role, W=W):
                out, _ = layer_forward(X, params.replace(**{role.value: w.reshape(W.shape)}))
                return float(np.sum(out * probe))

            err = relative_error(grads[role], finite_difference_grad(loss, W, step).reshape(W.shape))
            worst = max(worst, err)
            res.check(err < tol, f"h={h} s={s} b={b} a={a} {role.value}: rel err {err:.2e}")
    res.stats["worst_rel_err"] = worst
    return res


# -- preconditioner diagnostics ----------------------------------------------

def gamma_run(N: int = 200, seed: int = 0):
    task = QuadraticTask(seed=seed)
    cfg = EngineConfig(alpha=1e-2, T=10, N=N, delta=0.3, seed=seed,
                       variant=Variant.Analytical, diagnostics=True)
    return cfg, run_misa(task, cfg)


def suite_gamma(N: int = 200, seed: int = 0) -> SuiteResult:
    res = SuiteResult("gamma")
    cfg, trace = gamma_run(N, seed)
    total = sum(r.gamma["sum_dgamma_norm"] for r in trace.records)
    total_sq = sum(r.gamma["sum_dgamma_sq"] for r in trace.records)
    violations = sum(r.gamma["psd_violations"] for r in trace.records)
    res.check(violations == 0, f"{violations} steps with a negative dGamma diagonal")
    res.check(total <= 2 / math.sqrt(cfg.eps), f"sum ||dGamma|| = {total:.4g} > 2/sqrt(eps)")
    res.check(total_sq <= 2 / cfg.eps, f"sum ||dGamma||^2 = {total_sq:.4g} > 2/eps")
    crossings = [(prev.gamma["gamma_end_min"], cur.gamma["gamma_start_max"])
                 for prev, cur in zip(trace.records, trace.records[1:])]
    res.check(all(start <= end * (1 + 1e-12) for end, start in crossings),
              "inherited preconditioner exceeds the previous epoch's")
    res.stats.update(sum_dgamma_norm=total, sum_dgamma_sq=total_sq, psd_violations=violations)
    return res


# -- sampling lower bound during training ------------------------------------

def suite_lower_bound(seed: int = 0, clamp: float = 0.02, eta: float = 1.0) -> SuiteResult:
    res = SuiteResult("lowerbound")
    task = QuarticTask(seed=seed)
    cfg = EngineConfig(alpha=1e-3, T=10, N=200, delta=0.3, seed=seed,
                       sampler_cfg=SamplerConfig(eta=eta, gain_clamp=clamp))
    trace = run_misa(task, cfg)
    bound = probability_lower_bound(len(task.specs), eta, clamp)
    probs = trace.all_probs
    res.check(bool(np.all(probs >= bound)), f"min recorded prob {probs.min():.6g} < bound {bound:.6g}")
    res.check(bool(np.all(trace.column("gains") <= clamp)), "gains exceed the clamp")
    res.stats.update(bound=bound, min_prob=float(probs.min()), max_gain=float(trace.final_gains.max()))
    return res


# -- cost-model formulas -----------------------------------------------------

def formula_examples() -> list:
    """(label, computed, expected) triples of hand-derived cost values."""
    S = cm.ArchShape
    s1 = S(L=2, h=4, a=2, b=1, s=2, delta=Fraction(1, 2))
    s2 = S(L=1, h=4, a=2, b=1, s=2)
    big = S(L=32, h=4096, a=32, b=1, s=1, r=16)
    return [
        ("layerwise_peak", cm.layerwise_peak(s1), 1160),
        ("misa_peak", cm.misa_peak(s1), 1200),
        ("misa_peak delta=0", cm.misa_peak(cm.replace(s1, delta=0)), 2 * (8 + 64 + 192)),
        ("modulewise_peak W2", cm.modulewise_peak(s2, "W2"), 488),
        ("modulewise_peak Wq", cm.modulewise_peak(s2, "Wq"), (8 + 64 + 192) + 8 + 48),
        ("lora_peak All r=0", cm.lora_peak(cm.replace(s1, r=0), "All"), 2 * (8 + 120 + 192)),
        ("galore-lora Wq", cm.lora_peak(cm.replace(s1, r=2), "Wq") - cm.galore_peak(cm.replace(s1, r=2), "Wq"),
         4 * 4 * 2 * 2),
        ("delta_threshold", cm.delta_threshold_vs_layerwise(s1), Fraction(158, 336)),
        ("seqlen_crossover", cm.seqlen_crossover_vs_lora(big), Fraction(147456 - 21504, 217)),
        ("params_per_memory", cm.params_per_memory_dominance(big), True),
        ("backward_active", cm.backward_flops_active(s1), 1344),
        ("backward_frozen", cm.backward_flops_frozen(s1), 576),
        ("layerwise_total_flops", cm.layerwise_total_flops(s1), 1920),
        ("modulewise_max_flops", cm.modulewise_max_flops(s1), 1920),
        ("indicator_memory", cm.indicator_overhead(12, 4)[0], 24),
    ]


def random_shape(rng) -> cm.ArchShape:
    a = int(rng.choice([1, 2, 4, 8, 16, 32]))
    h = a * int(rng.integers(1, 257))
    return cm.ArchShape(L=int(rng.integers(1, 81)), h=h, a=a, b=int(rng.integers(1, 33)),
                        s=int(rng.integers(1, 8193)), r=int(rng.integers(1, 129)),
                        delta=Fraction(int(rng.integers(1, 1001)), 1000))


def suite_formulas(n_shapes: int = 10_000, seed: int = 2) -> SuiteResult:
    res = SuiteResult("formulas")
    for label, got, want in formula_examples():
        res.check(got == want and type(got) is not float, f"{label}: {got!r} != {want!r}")
    rng = np.random.default_rng(seed)
    disagreements = {"delta": 0, "seqlen": 0, "params_per_memory": 0, "flops": 0}
    for _ in range(n_shapes):
        sh = random_shape(rng)
        lw = cm.layerwise_peak(sh)
        # MISA beats layer-wise iff delta is below the threshold
        if (sh.delta < cm.delta_threshold_vs_layerwise(sh)) != (cm.misa_peak(sh) < lw):
            disagreements["delta"] += 1
        if sh.L > 1:
            above = sh.s > cm.seqlen_crossover_vs_lora(sh)
            # exact for all-module GaLore, sufficient for all-module LoRA
            if above != (lw < cm.galore_peak(sh, "All")) or (above and not lw < cm.lora_peak(sh, "All")):
                disagreements["seqlen"] += 1
        if cm.params_per_memory_dominance(sh):
            lhs = Fraction(cm.lora_trainable_params(sh), cm.lora_peak(sh, "All"))
            rhs = Fraction(cm.layerwise_trainable_params(sh), lw)
            if not lhs < rhs:
                disagreements["params_per_memory"] += 1
        if sh.delta < Fraction(1, sh.L) and not cm.modulewise_max_flops(sh) < cm.layerwise_total_flops(sh):
            disagreements["flops"] += 1
    for key, count in disagreements.items():
        res.check(count == 0, f"{key}: {count} disagreements")
    res.stats["disagreements"] = disagreements
    return res


# -- activation counting -----------------------------------------------------

def suite_activations(n_configs: int = 50, seed: int = 3) -> SuiteResult:
    res = SuiteResult("activations")
    rng = np.random.default_rng(seed)
    for i in range(n_configs):
        a = int(rng.choice([1, 2]))
        h = a * int(rng.integers(2, 5))
        L, b, s = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
        shape = cm.ArchShape(L=L, h=h, a=a, b=b, s=s)
        active = [{r for r in TRANSFORMER_ROLES if rng.random() < 0.3} for _ in range(L)]
        X = rng.standard_normal((b, s, h))
        live = 0
        for need in active:
            X, cache = layer_forward(X, TransformerLayerParams.random(h, a, rng), need)
            live += cache_elements(cache)
        counted = count_stored_activation_elems(shape, active)
        res.check(live == counted, f"config {i}: cache {live} != formula {counted}")
    return res


SUITES = {
    "sampling": suite_sampling,
    "dominance": suite_dominance,
    "gradients": suite_gradients,
    "gamma": suite_gamma,
    "lowerbound": suite_lower_bound,
    "formulas": suite_formulas,
    "activations": suite_activations,
}


def run_suite(name: str) -> list:
    if name == "all":
        return [fn() for fn in SUITES.values()]
    if name not in SUITES:
        raise KeyError(name)
    return [SUITES[name]()]

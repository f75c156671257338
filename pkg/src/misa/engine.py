"""Block-coordinate Adam driven by module-wise importance sampling.

One block epoch samples an active set of modules, runs ``T`` Adam steps on
them, refreshes the importance gains and sampling probabilities, applies one
extra momentum step and discards the optimizer state. The analytical variant
swaps in AMSGrad-style normalization with second-moment inheritance and
exposes the preconditioner diagnostics used in the convergence argument.

Adam here has no bias correction and keeps ``eps`` inside the square root.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import sampler
from .partition import ActiveSet, Strategy, select, model_size
from .sampler import SamplerConfig

log = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy.random.Generator(PCG64) seeded via SeedSequence(seed).spawn(2): [selection, data]"


class Variant(str, enum.Enum):
    Standard = "standard"
    Analytical = "analytical"


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class EngineConfig:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    T: int = 50
    N: int = 100
    variant: Variant = Variant.Standard
    strategy: Strategy = Strategy.Misa
    delta: float = 0.25
    sampler_cfg: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    # disables the extra momentum step and state clearing (exact-equivalence tests)
    comparison_mode: bool = False
    # "zero" follows the uniform start; "probe" seeds gains from the initial full gradient
    gain_init: str = "auto"
    diagnostics: bool = False
    record_params: bool = False

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.strategy = Strategy(self.strategy)
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.alpha >= 0 or not self.eps > 0:
            raise ValueError("alpha must be nonnegative and eps positive")
        if self.T < 1 or self.N < 1:
            raise ValueError("T and N must be positive")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if self.gain_init not in ("auto", "zero", "probe"):
            raise ValueError(f"unknown gain_init {self.gain_init!r}")

    @property
    def resolved_gain_init(self) -> str:
        if self.gain_init != "auto":
            return self.gain_init
        return "probe" if self.strategy in (Strategy.TopK, Strategy.BottomK) else "zero"


@dataclass
class AdamModuleState:
    m: np.ndarray
    v: np.ndarray
    vtilde_max: Optional[float] = None
    step: int = 0
    # elementwise AMSGrad-normalized second moment of the latest step
    vtilde: Optional[np.ndarray] = None

    @classmethod
    def fresh(cls, shape, dtype=np.float64, v0: float = 0.0, analytical: bool = False):
        v = np.full(shape, v0, dtype=dtype)
        if not analytical:
            return cls(np.zeros(shape, dtype=dtype), v)
        return cls(np.zeros(shape, dtype=dtype), v, float(v0), 0, v.copy())


def _check(theta, grad):
    if theta.shape != grad.shape:
        raise ValueError(f"shape mismatch: parameter {theta.shape} vs gradient {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient")


def adam_step(theta, grad, state: AdamModuleState, cfg: EngineConfig):
    """One Adam update; returns ``(theta', state')`` and leaves the inputs untouched."""
    _check(theta, grad)
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    theta = theta - cfg.alpha * m / np.sqrt(v + cfg.eps)
    return theta, replace(state, m=m, v=v, step=state.step + 1)


def amsgrad_step(theta, grad, state: AdamModuleState, cfg: EngineConfig):
    """Adam moments, then normalize by ``max(v, running max of the previous normalizer)``."""
    _check(theta, grad)
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    prev_max = state.vtilde_max or 0.0
    vtilde = np.maximum(v, prev_max)
    theta = theta - cfg.alpha * m / np.sqrt(vtilde + cfg.eps)
    return theta, replace(state, m=m, v=v, step=state.step + 1, vtilde=vtilde,
                          vtilde_max=max(prev_max, float(vtilde.max())))


def _normalizer(state: AdamModuleState, variant: Variant):
    if variant is Variant.Analytical and state.vtilde is not None:
        return state.vtilde
    return state.v


def extra_momentum_step(theta, state: AdamModuleState, cfg: EngineConfig):
    """Flush the remaining momentum: ``theta - alpha * beta1/(1-beta1) * m / sqrt(v + eps)``.

    The analytical variant normalizes by the AMSGrad second moment instead of ``v``.
    """
    v = _normalizer(state, cfg.variant)
    return theta - cfg.alpha * (cfg.beta1 / (1 - cfg.beta1)) * state.m / np.sqrt(v + cfg.eps)


def auxiliary_iterate(theta, state: AdamModuleState, cfg: EngineConfig):
    """``x = theta - alpha * beta1/(1-beta1) * Gamma m`` with ``Gamma = 1/sqrt(vtilde + eps)``."""
    v = state.vtilde if state.vtilde is not None else state.v
    return theta - cfg.alpha * (cfg.beta1 / (1 - cfg.beta1)) * state.m / np.sqrt(v + cfg.eps)


def inherit_second_moment(prev_states) -> float:
    """Scalar initial second moment for the next epoch: the largest normalizer seen last epoch.

    ``prev_states`` is ``None`` (or empty) for the first epoch, which starts from zero.
    """
    if not prev_states:
        return 0.0
    if isinstance(prev_states, AdamModuleState):
        prev_states = [prev_states]
    values = [s.vtilde_max for s in prev_states]
    if any(v is None for v in values):
        raise ValueError("previous states carry no AMSGrad running maximum")
    return float(max(values))


def gamma_diagnostics(vtilde_stream, eps: float):
    """Summaries of ``dGamma_t = Gamma_{t-1} - Gamma_t`` for ``Gamma_t = diag(1/sqrt(vtilde_t + eps))``.

    ``vtilde_stream`` holds the normalizers for ``t = 0..T``; pass the active
    block's coordinates concatenated so the norm is taken over the whole block.
    Returns the summed operator norms (largest diagonal entry), their squares
    and the number of steps where some diagonal entry falls below ``-1e-12``.
    """
    sum_norm = sum_sq = 0.0
    violations = 0
    prev = None
    for vt in vtilde_stream:
        gamma = 1.0 / np.sqrt(np.asarray(vt, dtype=np.float64) + eps)
        if prev is not None:
            dg = prev - gamma
            if dg.min() < -1e-12:
                violations += 1
            norm = max(float(dg.max()), 0.0)
            sum_norm += norm
            sum_sq += norm * norm
        prev = gamma
    return sum_norm, sum_sq, violations


class StateRegistry:
    """Optimizer states keyed by module id; cleared after every block epoch."""

    def __init__(self):
        self._states = {}

    def __contains__(self, module_id):
        return module_id in self._states

    def __getitem__(self, module_id) -> AdamModuleState:
        return self._states[module_id]

    def __setitem__(self, module_id, state):
        self._states[module_id] = state

    def get(self, module_id):
        return self._states.get(module_id)

    def ids(self) -> set:
        return set(self._states)

    def elements(self) -> int:
        return sum(s.m.size + s.v.size + (s.vtilde.size if s.vtilde is not None else 0)
                   for s in self._states.values())


def clear_states(active, store: StateRegistry) -> None:
    ids = active.ids if isinstance(active, ActiveSet) else active
    for i in ids:
        store._states.pop(i, None)


@dataclass
class EpochRecord:
    epoch: int
    sampled: list
    loss: float
    grad_sq_norm: float
    full_loss: float
    gains: np.ndarray
    probs: np.ndarray
    gamma: Optional[dict] = None
    wall_time: float = 0.0


@dataclass
class TrainTrace:
    method: str
    records: list = field(default_factory=list)
    final_params: list = field(default_factory=list)
    final_gains: Optional[np.ndarray] = None
    final_probs: Optional[np.ndarray] = None
    params_history: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    @property
    def all_probs(self) -> np.ndarray:
        return np.stack([r.probs for r in self.records] + [self.final_probs])


def _rngs(seed):
    sel, data = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(sel), np.random.default_rng(data)


def _finite(x, what):
    if not np.isfinite(x):
        raise NumericalError(f"non-finite {what}: {x!r}")
    return x


def _probe_gains(task, params):
    _, grads = task.full_loss_grad(params)
    return np.array([sampler.scaled_sq_norm(g, s.param_count) for g, s in zip(grads, task.specs)])


def _run_blocks(task, cfg: EngineConfig, choose: Callable, method: str,
                refresh_probs: bool = True, on_epoch: Optional[Callable] = None) -> TrainTrace:
    """Shared outer loop. ``choose(n, probs, gains, rng)`` returns the epoch's ActiveSet."""
    specs = task.specs
    B = len(specs)
    params = [np.array(p) for p in task.init_params()]
    sel_rng, data_rng = _rngs(cfg.seed)
    scfg = cfg.sampler_cfg
    analytical = cfg.variant is Variant.Analytical
    step_fn = amsgrad_step if analytical else adam_step

    gains = np.zeros(B)
    if cfg.resolved_gain_init == "probe":
        gains = _probe_gains(task, params)
        if scfg.gain_clamp is not None:
            gains = np.minimum(gains, scfg.gain_clamp)
    probs = sampler.optimal_distribution(gains, scfg.eta) if refresh_probs else np.full(B, 1.0 / B)

    store = StateRegistry()
    trace = TrainTrace(method)
    prev_states = None
    for n in range(cfg.N):
        t0 = time.perf_counter()
        full_loss, full_grads = task.full_loss_grad(params)
        grad_sq = float(sum(np.vdot(g, g) for g in full_grads))
        _finite(full_loss, "loss")
        active = choose(n, probs, gains, sel_rng)
        ids = active.sorted_ids()

        v0 = inherit_second_moment(prev_states) if analytical else 0.0
        streams = {}
        for i in ids:
            if i not in store:
                store[i] = AdamModuleState.fresh(specs[i].shape, params[i].dtype, v0, analytical)
            if analytical and cfg.diagnostics:
                streams[i] = [store[i].vtilde]

        sq_norm_sums = dict.fromkeys(ids, 0.0)
        losses = []
        for _ in range(cfg.T):
            batch = task.sample_batch(data_rng)
            loss, grads = task.loss_grad(params, batch, ids)
            losses.append(_finite(loss, "loss"))
            for i in ids:
                g = grads[i]
                sq_norm_sums[i] += sampler.scaled_sq_norm(g, specs[i].param_count)
                params[i], store[i] = step_fn(params[i], g, store[i], cfg)
                if i in streams:
                    streams[i].append(store[i].vtilde)

        gamma = None
        if streams:
            # Gamma is one diagonal matrix over the whole active block
            joint = [np.concatenate([streams[i][t].ravel() for i in ids]) for t in range(cfg.T + 1)]
            total, total_sq, violations = gamma_diagnostics(joint, cfg.eps)
            gamma = {
                "sum_dgamma_norm": total,
                "sum_dgamma_sq": total_sq,
                "psd_violations": violations,
                "gamma_start_max": float(np.max(1 / np.sqrt(joint[0] + cfg.eps))),
                "gamma_end_min": float(np.min(1 / np.sqrt(joint[-1] + cfg.eps))),
            }

        record = EpochRecord(n, ids, float(np.mean(losses)), grad_sq, full_loss,
                             gains.copy(), probs.copy(), gamma)

        avg = {i: sq_norm_sums[i] / cfg.T for i in ids}
        gains = sampler.update_gains(gains, ids, avg, scfg)
        if refresh_probs:
            probs = sampler.optimal_distribution(gains, scfg.eta)

        if not cfg.comparison_mode:
            for i in ids:
                params[i] = extra_momentum_step(params[i], store[i], cfg)
            prev_states = [store[i] for i in ids]
            clear_states(active, store)
            assert not store.ids(), "optimizer state leaked past its block epoch"

        for i in ids:
            if not np.all(np.isfinite(params[i])):
                raise NumericalError(f"non-finite parameters in module {i} at epoch {n}")
        record.wall_time = time.perf_counter() - t0
        trace.records.append(record)
        if cfg.record_params:
            trace.params_history.append([p.copy() for p in params])
        if on_epoch is not None:
            on_epoch(record, params, store)

    trace.final_params = params
    trace.final_gains = gains
    trace.final_probs = probs
    return trace


def run_misa(task, cfg: EngineConfig, on_epoch=None) -> TrainTrace:
    """Module-wise importance-sampled block-coordinate Adam over ``task``."""
    specs = task.specs

    def choose(n, probs, gains, rng):
        return select(cfg.strategy, specs, probs, gains, cfg.delta, rng)

    return _run_blocks(task, cfg, choose, f"misa-{cfg.strategy.value}", on_epoch=on_epoch)


def run_full_adam(task, cfg: EngineConfig, on_epoch=None) -> TrainTrace:
    """Plain Adam on every module; epochs of ``T`` steps only structure the trace."""
    everything = ActiveSet(frozenset(s.id for s in task.specs), model_size(task.specs))
    full = replace(cfg, comparison_mode=True)
    return _run_blocks(task, full, lambda n, p, g, rng: everything, "full_adam",
                       on_epoch=on_epoch)


def _layer_set(task, layer):
    ids = task.layers()[layer]
    return ActiveSet(frozenset(ids), sum(task.specs[i].param_count for i in ids))


def run_layerwise_cyclic(task, cfg: EngineConfig, on_epoch=None) -> TrainTrace:
    """One layer per block epoch, visiting layers in order."""
    L = len(task.layers())
    return _run_blocks(task, cfg, lambda n, p, g, rng: _layer_set(task, n % L),
                       "layerwise_cyclic", refresh_probs=False, on_epoch=on_epoch)


def run_layerwise_uniform(task, cfg: EngineConfig, on_epoch=None) -> TrainTrace:
    """One uniformly drawn layer per block epoch."""
    L = len(task.layers())
    return _run_blocks(task, cfg, lambda n, p, g, rng: _layer_set(task, int(rng.integers(L))),
                       "layerwise_uniform", refresh_probs=False, on_epoch=on_epoch)


RUNNERS = {
    "misa": run_misa,
    "full_adam": run_full_adam,
    "layerwise_cyclic": run_layerwise_cyclic,
    "layerwise_uniform": run_layerwise_uniform,
}

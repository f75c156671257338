"""Seeded benchmark problems exposing the per-module loss/gradient contract.

A task owns its frozen pieces (data, biases, readout). The trainable state is
a list of matrices, one per :class:`~misa.partition.ModuleSpec`, in spec order.
Every task provides

* ``specs`` and ``init_params()``,
* ``sample_batch(rng)`` drawing one stochastic mini-batch,
* ``loss_grad(params, batch, ids)`` returning the batch loss and the gradients
  of the requested modules from a single backward pass,
* ``full_loss_grad(params)`` for deterministic diagnostics.
"""

from __future__ import annotations

from typing import Collection

import numpy as np

from ..partition import Role, TRANSFORMER_ROLES, partition_model
from .transformer import TransformerLayerParams, layer_backward, layer_forward


class Task:
    name = "task"
    specs: list

    def init_params(self) -> list:
        raise NotImplementedError

    def sample_batch(self, rng: np.random.Generator):
        raise NotImplementedError

    def loss_grad(self, params, batch, ids: Collection[int]):
        raise NotImplementedError

    def full_loss_grad(self, params):
        raise NotImplementedError

    def full_loss(self, params) -> float:
        return self.full_loss_grad(params)[0]

    @property
    def n_model(self) -> int:
        return sum(s.param_count for s in self.specs)

    def layers(self) -> list[list[int]]:
        """Module ids grouped by layer index, in layer order."""
        groups = {}
        for s in self.specs:
            groups.setdefault(s.layer_index, []).append(s.id)
        return [groups[k] for k in sorted(groups)]


class QuadraticTask(Task):
    """``f(theta) = 1/2 ||A theta - c||^2`` with block-diagonal ``A`` and ``c = A theta_star``.

    The system is consistent, so every row-sampled stochastic gradient also
    vanishes at the optimum. Each block is one module.

    Block Adam with per-epoch state resets moves each coordinate by roughly
    ``60 * alpha`` per epoch no matter how small the gradient is, so the
    iterate settles in a neighbourhood of fixed width. ``curvature`` scales
    ``A`` (the Hessian by its square) and the defaults keep that
    neighbourhood's gradient norm below 1e-3 at ``alpha = 1e-2``;
    ``target_scale`` places the optimum far enough away for a visible descent.
    """

    name = "quadratic"

    def __init__(self, dim: int = 50, blocks: int = 5, rows_per_coord: int = 2,
                 batch_rows: int = 20, curvature: float = 0.05, target_scale: float = 10.0,
                 seed: int = 0, dtype=np.float64):
        if dim % blocks:
            raise ValueError(f"dim={dim} is not divisible into {blocks} blocks")
        rng = np.random.default_rng(seed)
        self.dtype = dtype
        d = dim // blocks
        m = d * rows_per_coord
        self.block_dim = d
        self.A = np.zeros((m * blocks, dim))
        for k in range(blocks):
            self.A[k * m:(k + 1) * m, k * d:(k + 1) * d] = curvature * rng.standard_normal((m, d)) / np.sqrt(m)
        self.theta_star = target_scale * rng.standard_normal(dim)
        self.c = self.A @ self.theta_star
        self.batch_rows = min(batch_rows, self.A.shape[0])
        self.specs = partition_model([(k, Role.Other, d, 1) for k in range(blocks)])

    def init_params(self):
        return [np.zeros((self.block_dim, 1), dtype=self.dtype) for _ in self.specs]

    def optimum(self):
        d = self.block_dim
        return [self.theta_star[k * d:(k + 1) * d].reshape(d, 1).astype(self.dtype)
                for k in range(len(self.specs))]

    def _flat(self, params):
        return np.concatenate([p.ravel() for p in params])

    def _split(self, g):
        d = self.block_dim
        return [g[k * d:(k + 1) * d].reshape(d, 1).astype(self.dtype) for k in range(len(self.specs))]

    def sample_batch(self, rng):
        return np.sort(rng.choice(self.A.shape[0], size=self.batch_rows, replace=False))

    def loss_grad(self, params, batch, ids):
        A, c = self.A[batch], self.c[batch]
        scale = self.A.shape[0] / len(batch)
        r = A @ self._flat(params) - c
        grads = self._split(scale * (A.T @ r))
        return 0.5 * scale * float(r @ r), {i: grads[i] for i in ids}

    def full_loss_grad(self, params):
        r = self.A @ self._flat(params) - self.c
        return 0.5 * float(r @ r), self._split(self.A.T @ r)


class QuarticTask(Task):
    """Coupled double wells: ``sum_b w_b sum_i (theta_bi^2 - 1)^2 / 4 + kappa/2 sum_b ||theta_b - theta_b+1||^2``.

    Mini-batches add a zero-mean linear perturbation ``xi . theta`` with
    ``xi ~ N(0, noise^2)``. Block weights ``w_b`` are log-spaced so modules
    differ in importance.
    """

    name = "quartic"

    def __init__(self, blocks: int = 8, block_dim: int = 4, coupling: float = 0.1,
                 weight_range: tuple = (0.05, 5.0), noise: float = 0.05,
                 init_scale: float = 0.5, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.block_dim = block_dim
        self.coupling = coupling
        self.noise = noise
        self.weights = np.geomspace(weight_range[0], weight_range[1], blocks)
        rng.shuffle(self.weights)
        self.theta0 = init_scale * rng.standard_normal((blocks, block_dim))
        self.specs = partition_model([(k, Role.Other, block_dim, 1) for k in range(blocks)])

    def init_params(self):
        return [row.reshape(-1, 1).astype(self.dtype) for row in self.theta0]

    def _loss_grad(self, params):
        X = np.stack([p.ravel() for p in params]).astype(np.float64)
        w = self.weights[:, None]
        loss = float(np.sum(w * (X ** 2 - 1) ** 2) / 4)
        grad = w * X * (X ** 2 - 1)
        diff = X[:-1] - X[1:]
        loss += 0.5 * self.coupling * float(np.sum(diff ** 2))
        grad[:-1] += self.coupling * diff
        grad[1:] -= self.coupling * diff
        return loss, grad

    def sample_batch(self, rng):
        return self.noise * rng.standard_normal((len(self.specs), self.block_dim))

    def loss_grad(self, params, batch, ids):
        loss, grad = self._loss_grad(params)
        X = np.stack([p.ravel() for p in params])
        loss += float(np.sum(batch * X))
        grad = grad + batch
        return loss, {i: grad[i].reshape(-1, 1).astype(self.dtype) for i in ids}

    def full_loss_grad(self, params):
        loss, grad = self._loss_grad(params)
        return loss, [g.reshape(-1, 1).astype(self.dtype) for g in grad]


def transformer_description(layers: int, hidden: int) -> list[tuple]:
    h = hidden
    shapes = {Role.Wq: (h, h), Role.Wk: (h, h), Role.Wv: (h, h), Role.Wo: (h, h),
              Role.W1: (h, 4 * h), Role.W2: (4 * h, h)}
    return [(layer, role, *shapes[role]) for layer in range(layers) for role in TRANSFORMER_ROLES]


class CopyTask(Task):
    """Stacked transformer layers on a shifted token-copy problem.

    Position ``i`` must reproduce the token at ``i - 1`` (position 0 copies
    itself). Embeddings, positional codes, biases and the linear readout are
    frozen; the loss is half the mean squared error against one-hot targets.
    """

    name = "copy"

    def __init__(self, layers: int = 2, hidden: int = 8, heads: int = 2, seq_len: int = 4,
                 batch: int = 4, vocab: int = 8, eval_size: int = 64, seed: int = 0,
                 dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.hidden, self.heads, self.seq_len, self.batch, self.vocab = hidden, heads, seq_len, batch, vocab
        self.n_layers = layers
        self.embed = rng.standard_normal((vocab, hidden))
        self.pos = 0.5 * rng.standard_normal((seq_len, hidden))
        self.readout = rng.standard_normal((hidden, vocab)) / np.sqrt(hidden)
        self._init = [TransformerLayerParams.random(hidden, heads, rng, scale=0.5, dtype=dtype)
                      for _ in range(layers)]
        self.eval_tokens = rng.integers(vocab, size=(eval_size, seq_len))
        self.specs = partition_model(transformer_description(layers, hidden))

    def init_params(self):
        return [self._init[s.layer_index].weight(s.role).copy() for s in self.specs]

    def layer_params(self, params) -> list[TransformerLayerParams]:
        out = []
        for layer in range(self.n_layers):
            chunk = params[6 * layer:6 * layer + 6]
            base = self._init[layer]
            out.append(base.replace(**{r.value: w for r, w in zip(TRANSFORMER_ROLES, chunk)}))
        return out

    def sample_batch(self, rng):
        return rng.integers(self.vocab, size=(self.batch, self.seq_len))

    def _inputs(self, tokens):
        X = self.embed[tokens] + self.pos[None, :, :]
        target_tokens = np.concatenate([tokens[:, :1], tokens[:, :-1]], axis=1)
        Y = np.eye(self.vocab)[target_tokens]
        return X.astype(self.dtype), Y

    def forward_loss(self, params, tokens, need_per_layer=None):
        X, Y = self._inputs(tokens)
        layers = self.layer_params(params)
        if need_per_layer is None:
            need_per_layer = [()] * self.n_layers
        caches = []
        for lp, need in zip(layers, need_per_layer):
            X, cache = layer_forward(X, lp, need)
            caches.append(cache)
        resid = X @ self.readout - Y
        n = tokens.shape[0] * tokens.shape[1]
        loss = 0.5 * float(np.sum(resid ** 2)) / n
        return loss, resid / n, caches, layers

    def loss_grad(self, params, batch, ids):
        ids = set(ids)
        need = [set() for _ in range(self.n_layers)]
        for i in ids:
            spec = self.specs[i]
            need[spec.layer_index].add(spec.role)
        loss, dlogits, caches, layers = self.forward_loss(params, batch, need)
        grads = {}
        lowest = min((s.layer_index for s in self.specs if s.id in ids), default=self.n_layers)
        dX = dlogits @ self.readout.T
        for layer in range(self.n_layers - 1, lowest - 1, -1):
            g, dX = layer_backward(dX, caches[layer], layers[layer], need[layer])
            for role, grad in g.items():
                grads[6 * layer + TRANSFORMER_ROLES.index(role)] = grad.astype(self.dtype)
        return loss, grads

    def full_loss_grad(self, params):
        loss, grads = self.loss_grad(params, self.eval_tokens, range(len(self.specs)))
        return loss, [grads[i] for i in range(len(self.specs))]


TASKS = {"quadratic": QuadraticTask, "quartic": QuarticTask, "copy": CopyTask}


def make_task(name: str, **kwargs) -> Task:
    try:
        cls = TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
    return cls(**kwargs)


def synthetic_tasks() -> dict:
    """Registry of the available benchmark constructors."""
    return dict(TASKS)

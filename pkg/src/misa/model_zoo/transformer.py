"""A single transformer layer with a hand-derived backward pass.

Flow per layer (no LayerNorm after the FFN)::

    Q, K, V = X Wq, X Wk, X Wv
    S = softmax(Q K^T / sqrt(d_k))        per head, d_k = h / a
    O = S V ;  U = O Wo + X ;  Z = LayerNorm(U)
    Z1 = ReLU(Z W1 + b1) ;  Z2 = Z1 W2 + b2

The forward keeps only the activations backward needs for the requested
modules. A frozen layer keeps Q, K, V, S, U and the ReLU mask, which is enough
to propagate the gradient to its input. Weight gradients add X (for Wq, Wk,
Wv), O (Wo), Z (W1) and Z1 (W2).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Collection

import numpy as np

from ..partition import Role, TRANSFORMER_ROLES

LN_EPS = 1e-5

FROZEN_CACHE = ("Q", "K", "V", "S", "U", "relu_mask")
_EXTRA_FOR_ROLE = {Role.Wq: "X", Role.Wk: "X", Role.Wv: "X", Role.Wo: "O", Role.W1: "Z", Role.W2: "Z1"}


@dataclass
class TransformerLayerParams:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    heads: int = 1

    def __post_init__(self):
        h = self.Wq.shape[0]
        expected = {"Wq": (h, h), "Wk": (h, h), "Wv": (h, h), "Wo": (h, h),
                    "W1": (h, 4 * h), "W2": (4 * h, h), "b1": (4 * h,), "b2": (h,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if h % self.heads:
            raise ValueError(f"hidden size {h} is not divisible by {self.heads} heads")

    @property
    def hidden(self) -> int:
        return self.Wq.shape[0]

    def weight(self, role) -> np.ndarray:
        return getattr(self, Role(role).value)

    def replace(self, **weights) -> "TransformerLayerParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(weights)
        return TransformerLayerParams(**kw)

    @classmethod
    def random(cls, h: int, heads: int, rng: np.random.Generator, scale: float = 1.0,
               dtype=np.float64) -> "TransformerLayerParams":
        def w(r, c):
            return (rng.standard_normal((r, c)) * scale / np.sqrt(r)).astype(dtype)
        return cls(w(h, h), w(h, h), w(h, h), w(h, h), w(h, 4 * h), w(4 * h, h),
                   (0.1 * rng.standard_normal(4 * h)).astype(dtype),
                   (0.1 * rng.standard_normal(h)).astype(dtype), heads)


def _split_heads(x, a):
    b, s, h = x.shape
    return x.reshape(b, s, a, h // a).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, a, s, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, a * d)


def softmax(A: np.ndarray) -> np.ndarray:
    e = np.exp(A - A.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layernorm(U: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    mu = U.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(((U - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    return (U - mu) / sigma


def layernorm_backward(dZ: np.ndarray, U: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Gradient through ``Z = LayerNorm(U)`` using only ``dZ`` and ``U``; mu and sigma are recomputed."""
    mu = U.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(((U - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    zhat = (U - mu) / sigma
    return (dZ - dZ.mean(axis=-1, keepdims=True)
            - zhat * (dZ * zhat).mean(axis=-1, keepdims=True)) / sigma


def softmax_backward(dS: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Row-wise softmax Jacobian-vector product: ``S * (dS - sum(dS * S))``."""
    if not np.allclose(S.sum(axis=-1), 1.0, rtol=0, atol=1e-8):
        raise ValueError("rows of S are not normalized")
    return S * (dS - (dS * S).sum(axis=-1, keepdims=True))


def _need_roles(need: Collection) -> frozenset:
    roles = frozenset(Role(r) for r in need)
    bad = roles - set(TRANSFORMER_ROLES)
    if bad:
        raise ValueError(f"roles {sorted(r.value for r in bad)} have no weight in the layer")
    return roles


def cache_fields(need: Collection) -> tuple:
    """Names of the activations a forward pass retains for ``need``."""
    roles = _need_roles(need)
    extra = []
    for name in ("X", "O", "Z", "Z1"):
        if any(_EXTRA_FOR_ROLE[r] == name for r in roles):
            extra.append(name)
    return FROZEN_CACHE + tuple(extra)


def layer_forward(X: np.ndarray, params: TransformerLayerParams, need: Collection = ()):
    """Run the layer on ``X`` of shape ``(b, s, h)``; returns ``(Z2, cache)``."""
    if X.ndim != 3 or X.shape[-1] != params.hidden:
        raise ValueError(f"input shape {X.shape} incompatible with hidden size {params.hidden}")
    a = params.heads
    d = params.hidden // a
    Q, K, V = X @ params.Wq, X @ params.Wk, X @ params.Wv
    A = _split_heads(Q, a) @ _split_heads(K, a).transpose(0, 1, 3, 2) / np.sqrt(d)
    S = softmax(A)
    O = _merge_heads(S @ _split_heads(V, a))
    U = O @ params.Wo + X
    Z = layernorm(U)
    P = Z @ params.W1 + params.b1
    mask = P > 0
    Z1 = P * mask
    Z2 = Z1 @ params.W2 + params.b2
    live = {"X": X, "Q": Q, "K": K, "V": V, "S": S, "O": O, "U": U, "Z": Z, "Z1": Z1,
            "relu_mask": mask}
    cache = {name: live[name] for name in cache_fields(need)}
    return Z2, cache


def cache_elements(cache: dict) -> int:
    return sum(int(np.asarray(t).size) for t in cache.values())


def _outer(x, dy):
    # sum over batch and sequence of x^T dy
    return np.einsum("bsi,bsj->ij", x, dy)


def layer_backward(dOut: np.ndarray, cache: dict, params: TransformerLayerParams,
                   need: Collection = ()):
    """Backpropagate ``dOut`` through one layer.

    Returns ``(grads, dX)`` where ``grads`` maps each requested :class:`Role`
    to the gradient of its weight matrix.
    """
    roles = _need_roles(need)
    missing = [f for f in cache_fields(roles) if f not in cache]
    if missing:
        raise ValueError(f"cache lacks {missing} required for {sorted(r.value for r in roles)}")
    a = params.heads
    d = params.hidden // a
    grads = {}

    if Role.W2 in roles:
        grads[Role.W2] = _outer(cache["Z1"], dOut)
    dP = (dOut @ params.W2.T) * cache["relu_mask"]
    if Role.W1 in roles:
        grads[Role.W1] = _outer(cache["Z"], dP)
    dU = layernorm_backward(dP @ params.W1.T, cache["U"])
    if Role.Wo in roles:
        grads[Role.Wo] = _outer(cache["O"], dU)

    dOh = _split_heads(dU @ params.Wo.T, a)
    S = cache["S"]
    Qh, Kh, Vh = (_split_heads(cache[n], a) for n in ("Q", "K", "V"))
    dS = dOh @ Vh.transpose(0, 1, 3, 2)
    dV = _merge_heads(S.transpose(0, 1, 3, 2) @ dOh)
    dA = softmax_backward(dS, S)
    dQ = _merge_heads(dA @ Kh) / np.sqrt(d)
    dK = _merge_heads(dA.transpose(0, 1, 3, 2) @ Qh) / np.sqrt(d)

    for role, dY in ((Role.Wq, dQ), (Role.Wk, dK), (Role.Wv, dV)):
        if role in roles:
            grads[role] = _outer(cache["X"], dY)
    dX = dQ @ params.Wq.T + dK @ params.Wk.T + dV @ params.Wv.T + dU
    return grads, dX

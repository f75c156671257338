"""Central finite differences and activation-element accounting."""

from __future__ import annotations

from typing import Callable, Collection, Sequence

import numpy as np

from ..cost_model import ArchShape
from ..partition import Role, TRANSFORMER_ROLES


def finite_difference_grad(loss: Callable[[np.ndarray], float], theta: np.ndarray,
                           step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar ``loss`` of a flat parameter vector."""
    if not step > 0:
        raise ValueError("step must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    for j in range(theta.size):
        orig = theta[j]
        theta[j] = orig + step
        f_plus = loss(theta)
        theta[j] = orig - step
        f_minus = loss(theta)
        theta[j] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite loss while perturbing coordinate {j}")
        grad[j] = (f_plus - f_minus) / (2 * step)
    return grad


def relative_error(analytic, reference) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = max(np.linalg.norm(reference), np.linalg.norm(analytic), 1e-300)
    return float(np.linalg.norm(analytic - reference) / scale)


def count_stored_activation_elems(shape: ArchShape,
                                  active: Sequence[Collection]) -> int:
    """Activation elements retained by a forward pass over ``len(active)`` layers.

    ``active[i]`` holds the roles that need weight gradients in layer ``i``.
    Modules sharing a stored tensor (Wq, Wk and Wv all read X) count it once.
    """
    b, s, h, a = shape.b, shape.s, shape.h, shape.a
    bsh = b * s * h
    total = 0
    for roles in active:
        roles = {Role(r) for r in roles}
        unknown = roles - set(TRANSFORMER_ROLES)
        if unknown:
            raise ValueError(f"unknown roles {sorted(r.value for r in unknown)}")
        total += a * b * s * s + 8 * bsh
        if roles & {Role.Wq, Role.Wk, Role.Wv}:
            total += bsh
        if Role.Wo in roles:
            total += bsh
        if Role.W1 in roles:
            total += bsh
        if Role.W2 in roles:
            total += 4 * bsh
    return total

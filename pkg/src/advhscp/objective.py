"""Attack/defense losses and their hand-derived gradients.

Notation in comments: Y_r = W_1 ... W_r (Y_0 = I), B(r, n) = W_{r+1} ... W_n,
T(r, n, i) = B(r, n) diag(lam_n^i) B(r, n)^T. The level-n reconstruction is
then Y_{r-1} W_r T(r, n, i) W_r^T Y_{r-1}^T for every r <= n, which gives

    dH/dW_r = sum_i sum_{n>=r} -4 A^T Theta_i A W_r T + 4 A^T A W_r T W_r^T A^T A W_r T

with A = Y_{r-1}. Finite differences confirm this reading of the product
indices (the factors strictly between levels r and n, and the level-n
loadings); the quartic term ends in "... W_r T", not "... W_r^T".
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch
from .model import (
    AdversaryModel,
    FactorModel,
    as_stack,
    build_product_cache,
    check_shapes,
    level_residual_norms,
    reconstruction_loss,
)


@dataclass
class LossBreakdown:
    attack_proximity: float = 0.0
    attack_fit: float = 0.0
    defense_perturbed: float = 0.0
    defense_clean: float = 0.0
    total_J: float = 0.0

    FIELDS = ("attack_proximity", "attack_fit", "defense_perturbed", "defense_clean", "total_J")

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def _comps(x) -> list[np.ndarray]:
    return list(getattr(x, "components", x))


def _check_pair(adversary, model: FactorModel):
    adv = _comps(adversary)
    if len(adv) != model.depth or any(a.shape != w.shape for a, w in zip(adv, model.components)):
        raise ShapeMismatch("adversary components do not match the model")
    return adv


def _check_data(theta: np.ndarray, model: FactorModel):
    if theta.shape != (model.subject_count, model.node_count, model.node_count):
        raise ShapeMismatch(
            f"data shape {theta.shape} does not match S={model.subject_count}, P={model.node_count}"
        )


def proximity(adversary, model: FactorModel, level: int | None = None) -> float:
    """Squared Frobenius distance between W~_r and W_r (summed over levels if level is None)."""
    adv = _check_pair(adversary, model)
    levels = range(1, model.depth + 1) if level is None else [level]
    return math.fsum(float(np.sum((adv[r - 1] - model.components[r - 1]) ** 2)) for r in levels)


def attack_objective(adversary, model: FactorModel, perturbed_data, level: int, alpha: float) -> float:
    """alpha ||W~_r - W_r||_F^2 + H(W~, loadings, perturbed data)."""
    adv = _check_pair(adversary, model)
    gamma = as_stack(perturbed_data)
    _check_data(gamma, model)
    return alpha * proximity(adv, model, level) + reconstruction_loss(adv, model, gamma)


def defense_objective(adversary, model: FactorModel, data, beta: float) -> LossBreakdown:
    adv = _check_pair(adversary, model)
    theta = as_stack(data)
    _check_data(theta, model)
    perturbed = reconstruction_loss(adv, model, theta)
    clean = beta * reconstruction_loss(model.components, model, theta)
    return LossBreakdown(defense_perturbed=perturbed, defense_clean=clean, total_J=perturbed + clean)


def full_breakdown(adversary, model: FactorModel, data, perturbed_data, alpha: float, beta: float) -> LossBreakdown:
    """Every term of the bilevel objective, evaluated at the current parameters."""
    out = defense_objective(adversary, model, data, beta)
    out.attack_proximity = alpha * proximity(adversary, model)
    out.attack_fit = reconstruction_loss(_comps(adversary), model, perturbed_data)
    return out


# -- gradients ----------------------------------------------------------------

def grad_reconstruction_wrt_component(components, loadings, data, level: int) -> np.ndarray:
    """dH(components, loadings, data)/dW_r for 1-based ``level``."""
    comps = _comps(components)
    check_shapes(comps, loadings)
    theta = as_stack(data)
    cache = build_product_cache(comps, loadings)
    r = level
    w = comps[r - 1]
    if r == 1:
        # Y_0 = I
        ata = np.eye(theta.shape[1])
        gram = theta
    else:
        a = cache.cumulative[r - 1]
        ata = a.T @ a
        gram = a.T @ theta @ a  # (S, k_{r-1}, k_{r-1})
    grad = np.zeros_like(w)
    for n in range(r, len(comps) + 1):
        wt = w @ cache.inner[(r, n)]  # (S, k_{r-1}, k_r)
        mwt = ata @ wt
        term = -4.0 * (gram @ wt) + 4.0 * (mwt @ (w.T @ mwt))
        grad += term.sum(axis=0)
    return grad


def grad_reconstruction_wrt_loadings(components, loadings, data, level: int) -> np.ndarray:
    """dH/d(loadings at ``level``) for all subjects, shape (S, k_r).

    Only the diagonal of -2 Y^T Theta Y + 2 Y^T Y diag(lam) Y^T Y survives; its
    second part reduces to 2 (M o M) lam with M = Y^T Y.
    """
    comps = _comps(components)
    check_shapes(comps, loadings)
    theta = as_stack(data)
    y = build_product_cache(comps, loadings).cumulative[level]
    m = y.T @ y
    proj = np.sum((theta @ y) * y, axis=1)
    return -2.0 * proj + 2.0 * loadings[level - 1] @ (m * m).T


def grad_attack_wrt_adversary(adversary, model: FactorModel, perturbed_data, level: int, alpha: float) -> np.ndarray:
    adv = _check_pair(adversary, model)
    gamma = as_stack(perturbed_data)
    _check_data(gamma, model)
    return 2.0 * alpha * (adv[level - 1] - model.components[level - 1]) + grad_reconstruction_wrt_component(
        adv, model.loadings, gamma, level
    )


def grad_J_wrt_loadings(adversary, model: FactorModel, data, level: int, beta: float) -> np.ndarray:
    """dJ/dlam_r for every subject, shape (S, k_r); coefficients (1, beta) as in J."""
    adv = _check_pair(adversary, model)
    theta = as_stack(data)
    _check_data(theta, model)
    return grad_reconstruction_wrt_loadings(adv, model.loadings, theta, level) + beta * grad_reconstruction_wrt_loadings(
        model.components, model.loadings, theta, level
    )


def grad_J_wrt_loading(adversary, model: FactorModel, data, level: int, subject: int, beta: float) -> np.ndarray:
    return grad_J_wrt_loadings(adversary, model, data, level, beta)[subject]


def grad_J_wrt_component(model: FactorModel, data, level: int, beta: float) -> np.ndarray:
    """dJ/dW_r; only the clean term depends on W_r once W~ is fixed."""
    theta = as_stack(data)
    _check_data(theta, model)
    return beta * grad_reconstruction_wrt_component(model.components, model.loadings, theta, level)


def finite_difference_gradient(loss_fn: Callable[[np.ndarray], float], parameter, step: float = 1e-6) -> np.ndarray:
    """Central differences (f(x + h e) - f(x - h e)) / 2h, one coordinate at a time."""
    if not step > 0:
        raise ValueError("step must be positive")
    x0 = np.array(parameter, dtype=float)
    grad = np.zeros_like(x0)
    x = x0.copy()
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = loss_fn(x)
        flat[j] = orig - step
        fm = loss_fn(x)
        flat[j] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteLoss(f"non-finite loss at coordinate {j}")
        gflat[j] = (fp - fm) / (2.0 * step)
    return grad


__all__ = [
    "LossBreakdown",
    "attack_objective",
    "defense_objective",
    "full_breakdown",
    "proximity",
    "grad_attack_wrt_adversary",
    "grad_J_wrt_loading",
    "grad_J_wrt_loadings",
    "grad_J_wrt_component",
    "grad_reconstruction_wrt_component",
    "grad_reconstruction_wrt_loadings",
    "finite_difference_gradient",
    "level_residual_norms",
]

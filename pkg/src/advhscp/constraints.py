"""Projections onto the feasible set of the factorization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLoading, NonFiniteInput

_BISECTION_ITERS = 200


@dataclass
class ProjectionReport:
    columns_modified: int = 0
    max_l1_violation_before: float = 0.0
    max_linf_violation_before: float = 0.0


def _clipped_l1(a: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(a - theta, 0.0), 1.0).sum(axis=0)


def project_columns(matrix: np.ndarray, lam: float) -> tuple[np.ndarray, ProjectionReport]:
    """Project every column onto {x : ||x||_1 <= lam, ||x||_inf <= 1}.

    Columns are clipped to [-1, 1]; columns whose L1 norm still exceeds
    ``lam`` are soft-thresholded, x -> sign(x) min(max(|x| - theta, 0), 1),
    with theta found by bisection. The upper end of the final bracket is
    returned, so the output never exceeds the budget and re-projecting it is a
    no-op.
    """
    x = np.asarray(matrix, dtype=float)
    if not lam > 0:
        raise ValueError("lam must be positive")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("projection input contains non-finite entries")
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]

    a = np.abs(x)
    l1 = a.sum(axis=0)
    linf = a.max(axis=0, initial=0.0)
    report = ProjectionReport(
        columns_modified=int(np.count_nonzero((l1 > lam) | (linf > 1.0))),
        max_l1_violation_before=float(max(0.0, (l1 - lam).max(initial=0.0))),
        max_linf_violation_before=float(max(0.0, (linf - 1.0).max(initial=0.0))),
    )

    clipped = np.minimum(a, 1.0)
    active = clipped.sum(axis=0) > lam
    if np.any(active):
        ac = a[:, active]
        lo = np.zeros(ac.shape[1])
        hi = ac.max(axis=0)
        for _ in range(_BISECTION_ITERS):
            mid = 0.5 * (lo + hi)
            over = _clipped_l1(ac, mid) > lam
            lo = np.where(over, mid, lo)
            hi = np.where(over, hi, mid)
            if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(hi, 1.0)):
                break
        clipped[:, active] = np.minimum(np.maximum(ac - hi, 0.0), 1.0)
    out = np.sign(x) * clipped
    # sign(0) is 0, so zero entries stay zero
    return (out[:, 0] if squeeze else out), report


def project_l1_linf(column, lam: float) -> np.ndarray:
    """Euclidean projection of one vector onto the L1 ball of radius lam intersected with the unit box."""
    col = np.asarray(column, dtype=float)
    if col.ndim != 1:
        raise ValueError("expected a vector")
    return project_columns(col, lam)[0]


def project_nonneg(matrix) -> np.ndarray:
    return np.maximum(np.asarray(matrix, dtype=float), 0.0)


def project_loading(diag_vector) -> np.ndarray:
    """Clamp negatives to zero, then rescale to unit sum."""
    v = np.maximum(np.asarray(diag_vector, dtype=float), 0.0)
    total = v.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DegenerateLoading("loading vector has no positive entry")
    return v / total


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex (sort-based)."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, v.shape[1] + 1)
    cond = u - css / idx > 0
    rho = v.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(v.shape[0]), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def project_component(matrix: np.ndarray, lam: float, nonneg: bool) -> tuple[np.ndarray, ProjectionReport]:
    """Feasibility projection for one W_r.

    For the nonnegative levels the negative part is zeroed first; the
    L1/box projection of a nonnegative vector stays nonnegative, so this
    composition is the exact projection onto the intersection.
    """
    if nonneg:
        matrix = project_nonneg(matrix)
    return project_columns(matrix, lam)

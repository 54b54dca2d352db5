"""Domain types, reconstruction and the reconstruction loss.

Levels are 1-based in the public API (``level=1`` is the finest level, whose
components are the columns of ``W1``); list indices inside are 0-based.
Loadings are stored per level as an ``(S, k_r)`` array whose row ``i`` is the
diagonal of the subject's loading matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidSpec,
    NonFiniteInput,
    ShapeMismatch,
    ZeroVarianceNode,
)

SYMMETRY_TOL = 1e-10


@dataclass
class TimeSeriesPanel:
    """Per-subject T x P time series (T may differ between subjects)."""

    subjects: list[np.ndarray]

    def __post_init__(self):
        self.subjects = [np.asarray(x, dtype=float) for x in self.subjects]
        if not self.subjects:
            raise InvalidSpec("panel has no subjects")
        p = self.subjects[0].shape[1] if self.subjects[0].ndim == 2 else -1
        for i, x in enumerate(self.subjects):
            if x.ndim != 2 or x.shape[1] != p:
                raise DimensionMismatch(f"subject {i}: expected T x {p}, got {x.shape}")
            if x.shape[0] < 2:
                raise InvalidSpec(f"subject {i}: need at least 2 time points")
            if not np.all(np.isfinite(x)):
                raise NonFiniteInput(f"subject {i}: non-finite entries")

    @property
    def node_count(self) -> int:
        return self.subjects[0].shape[1]

    @property
    def subject_count(self) -> int:
        return len(self.subjects)


@dataclass
class CorrelationSet:
    """Stack of S symmetric P x P correlation matrices.

    Semidefinite matrices are accepted; only symmetry, unit diagonal and
    entry bounds are checked.
    """

    matrices: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=float)
        if m.ndim != 3 or m.shape[1] != m.shape[2]:
            raise DimensionMismatch(f"expected S x P x P, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NonFiniteInput("correlation matrices contain non-finite entries")
        if np.max(np.abs(m - m.transpose(0, 2, 1)), initial=0.0) > SYMMETRY_TOL:
            raise InvalidSpec("correlation matrices must be symmetric")
        diag = np.diagonal(m, axis1=1, axis2=2)
        if np.max(np.abs(diag - 1.0), initial=0.0) > SYMMETRY_TOL:
            raise InvalidSpec("correlation matrices must have unit diagonal")
        if np.max(np.abs(m), initial=0.0) > 1.0 + SYMMETRY_TOL:
            raise InvalidSpec("correlation entries must lie in [-1, 1]")
        self.matrices = m

    @property
    def node_count(self) -> int:
        return self.matrices.shape[1]

    @property
    def subject_count(self) -> int:
        return self.matrices.shape[0]


def as_stack(data) -> np.ndarray:
    """Return data (CorrelationSet, perturbed set or raw array) as an S x P x P array."""
    m = np.asarray(getattr(data, "matrices", data), dtype=float)
    if m.ndim != 3 or m.shape[1] != m.shape[2]:
        raise ShapeMismatch(f"expected S x P x P data, got {m.shape}")
    return m


@dataclass
class HierarchySpec:
    widths: list[int]
    sparsity: list[float]
    alpha: float = 1e-3
    beta: float = 0.5

    def __post_init__(self):
        self.widths = [int(k) for k in self.widths]
        self.sparsity = [float(s) for s in self.sparsity]
        if not self.widths:
            raise InvalidSpec("hierarchy needs at least one level")
        if len(self.sparsity) != len(self.widths):
            raise InvalidSpec("need one sparsity budget per level")
        if any(b >= a for a, b in zip(self.widths, self.widths[1:])) or self.widths[-1] < 1:
            raise InvalidSpec(f"widths must be strictly decreasing and >= 1, got {self.widths}")
        if any(not (s > 0) for s in self.sparsity):
            raise InvalidSpec("sparsity budgets must be positive")
        if not (self.alpha > 0 and self.beta > 0):
            raise InvalidSpec("alpha and beta must be positive")

    @property
    def depth(self) -> int:
        return len(self.widths)

    def check_nodes(self, p: int):
        if not p > self.widths[0]:
            raise DimensionMismatch(f"need P > k1, got P={p}, k1={self.widths[0]}")


@dataclass
class FactorModel:
    """Shared components W_r and per-subject loadings (one (S, k_r) array per level)."""

    components: list[np.ndarray]
    loadings: list[np.ndarray]

    def __post_init__(self):
        check_shapes(self.components, self.loadings)

    @property
    def depth(self) -> int:
        return len(self.components)

    @property
    def node_count(self) -> int:
        return self.components[0].shape[0]

    @property
    def subject_count(self) -> int:
        return self.loadings[0].shape[0]

    @property
    def widths(self) -> list[int]:
        return [w.shape[1] for w in self.components]

    def copy(self) -> "FactorModel":
        return FactorModel([w.copy() for w in self.components], [l.copy() for l in self.loadings])

    def patterns(self) -> list[np.ndarray]:
        """Cumulative products W1, W1 W2, ... (the node-space components per level)."""
        return cumulative_products(self.components)[1:]


@dataclass
class AdversaryModel:
    components: list[np.ndarray]

    def copy(self) -> "AdversaryModel":
        return AdversaryModel([w.copy() for w in self.components])

    @classmethod
    def from_model(cls, model: FactorModel) -> "AdversaryModel":
        return cls([w.copy() for w in model.components])


@dataclass
class PerturbationConfig:
    magnitude_factor: float = 0.1
    sigma: float | None = None  # None: estimate from the data
    sigma_mode: str = "pooled"  # "pooled" | "per_subject" | "upper"

    def __post_init__(self):
        if self.magnitude_factor < 0:
            raise InvalidSpec("magnitude_factor must be nonnegative")
        if self.sigma is not None and self.sigma < 0:
            raise InvalidSpec("sigma must be nonnegative")
        if self.sigma_mode not in ("pooled", "per_subject", "upper"):
            raise InvalidSpec(f"unknown sigma_mode {self.sigma_mode!r}")


def check_shapes(components: Sequence[np.ndarray], loadings: Sequence[np.ndarray] | None = None):
    if not components:
        raise ShapeMismatch("no components")
    for r in range(1, len(components)):
        if components[r].ndim != 2 or components[r].shape[0] != components[r - 1].shape[1]:
            raise ShapeMismatch(
                f"W{r + 1} has shape {components[r].shape}, expected ({components[r - 1].shape[1]}, k)"
            )
    if loadings is None:
        return
    if len(loadings) != len(components):
        raise ShapeMismatch("need one loading table per level")
    s = loadings[0].shape[0]
    for r, (w, lam) in enumerate(zip(components, loadings)):
        if lam.ndim != 2 or lam.shape != (s, w.shape[1]):
            raise ShapeMismatch(f"level {r + 1} loadings have shape {lam.shape}, expected ({s}, {w.shape[1]})")


# -- correlation ------------------------------------------------------------

def pearson_correlation(panel: TimeSeriesPanel) -> CorrelationSet:
    out = []
    for i, x in enumerate(panel.subjects):
        xc = x - x.mean(axis=0)
        norms = np.sqrt(np.einsum("tp,tp->p", xc, xc))
        bad = np.flatnonzero(norms <= 1e-12 * max(1.0, float(np.abs(x).max())))
        if bad.size:
            raise ZeroVarianceNode(i, int(bad[0]))
        z = xc / norms
        c = z.T @ z
        c = 0.5 * (c + c.T)
        np.fill_diagonal(c, 1.0)
        out.append(np.clip(c, -1.0, 1.0))
    return CorrelationSet(np.stack(out))


# -- products and reconstruction ---------------------------------------------

def cumulative_products(components: Sequence[np.ndarray]) -> list[np.ndarray]:
    """[Y0, Y1, ..., YK] with Y0 = I_P and Yr = Y(r-1) Wr."""
    ys = [np.eye(components[0].shape[0])]
    for w in components:
        ys.append(ys[-1] @ w)
    return ys


def _sandwich(y: np.ndarray, lam: np.ndarray) -> np.ndarray:
    # y diag(lam) y^T for a single vector (k,) or a stack (S, k)
    return (y * lam[..., None, :]) @ y.T


def reconstruct(model: FactorModel, subject: int, level: int) -> np.ndarray:
    if not 1 <= level <= model.depth:
        raise IndexError(f"level {level} out of range 1..{model.depth}")
    if not 0 <= subject < model.subject_count:
        raise IndexError(f"subject {subject} out of range")
    y = cumulative_products(model.components)[level]
    r = _sandwich(y, model.loadings[level - 1][subject])
    # exact symmetry; matmul rounding can differ across the diagonal
    return np.triu(r) + np.triu(r, 1).T


def level_residual_norms(components, loadings, data) -> np.ndarray:
    """Squared Frobenius residuals, shape (S, K)."""
    check_shapes(components, loadings)
    theta = as_stack(data)
    p = components[0].shape[0]
    if theta.shape[1] != p or theta.shape[0] != loadings[0].shape[0]:
        raise ShapeMismatch(f"data shape {theta.shape} incompatible with P={p}, S={loadings[0].shape[0]}")
    ys = cumulative_products(components)
    out = np.empty((theta.shape[0], len(components)))
    for r in range(len(components)):
        resid = theta - _sandwich(ys[r + 1], loadings[r])
        out[:, r] = np.einsum("spq,spq->s", resid, resid)
    return out


def reconstruction_loss(components, model: FactorModel, data) -> float:
    """Sum over subjects and levels of squared Frobenius residuals.

    ``components`` may be the model's own W_r or an adversary's; the loadings
    always come from ``model``.
    """
    comps = getattr(components, "components", components)
    norms = level_residual_norms(comps, model.loadings, data)
    # subject-major, level-minor; fsum is order independent anyway
    return math.fsum(norms.ravel())


# -- product cache ------------------------------------------------------------

@dataclass
class ProductCache:
    """Cached products used by the gradients.

    ``cumulative[r]`` is Y_r (Y_0 = I). ``between[(r, n)]`` for 1 <= r <= n <= K
    is W_{r+1} ... W_n (identity when n == r), and ``inner[(r, n)]`` is the
    (S, k_r, k_r) stack  between[(r, n)] diag(lam_n^i) between[(r, n)]^T.
    """

    cumulative: list[np.ndarray]
    between: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    inner: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)


def build_product_cache(components, loadings) -> ProductCache:
    comps = list(getattr(components, "components", components))
    check_shapes(comps, loadings)
    k = len(comps)
    cache = ProductCache(cumulative_products(comps))
    for r in range(1, k + 1):
        b = np.eye(comps[r - 1].shape[1])
        for n in range(r, k + 1):
            if n > r:
                b = b @ comps[n - 1]
            cache.between[(r, n)] = b
            cache.inner[(r, n)] = _sandwich(b, loadings[n - 1])
    return cache

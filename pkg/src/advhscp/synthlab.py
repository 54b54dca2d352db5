"""Synthetic ground truth, time-series simulation and evaluation metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import HscpError, InsufficientSubjects, InvalidParams, InvalidSpec, ZeroColumn
from .model import FactorModel, HierarchySpec, TimeSeriesPanel, as_stack, cumulative_products

log = logging.getLogger(__name__)

# columns with an L2 norm at or below this carry no usable signal (their
# share of any reconstruction is below 1e-16); evaluation scores them 0
COLLAPSE_TOL = 1e-8


@dataclass
class GroundTruth:
    """Planted hierarchy: W1 (P x k1), mixing matrices for deeper levels, per-subject loadings."""

    components: list[np.ndarray]
    loadings: list[np.ndarray]
    seed: int
    sparsity_fraction: float
    noise: dict = field(default_factory=dict)

    @property
    def widths(self) -> list[int]:
        return [w.shape[1] for w in self.components]

    def patterns(self) -> list[np.ndarray]:
        return cumulative_products(self.components)[1:]

    def as_model(self) -> FactorModel:
        return FactorModel([w.copy() for w in self.components], [l.copy() for l in self.loadings])


@dataclass
class MatchResult:
    assignment: list[tuple[int, int]]
    per_component_similarity: list[float]
    mean_accuracy: float


def _supports(rng, p: int, k: int, nnz: int) -> list[np.ndarray]:
    # every node gets into at least one column when capacity allows
    chosen = [set() for _ in range(k)]
    if nnz * k >= p and -(-p // k) <= nnz:
        for j, node in enumerate(rng.permutation(p)):
            chosen[j % k].add(int(node))
    out = []
    for c in chosen:
        rest = np.array([q for q in range(p) if q not in c])
        extra = rng.choice(rest, size=nnz - len(c), replace=False) if nnz > len(c) else []
        out.append(np.sort(np.concatenate([np.fromiter(c, int, len(c)), np.asarray(extra, int)])))
    return out


def generate_ground_truth(
    P: int,
    widths,
    sparsity_fraction: float,
    seed: int,
    n_subjects: int = 100,
    concentration: float = 1.0,
) -> GroundTruth:
    widths = [int(k) for k in widths]
    if not widths or any(k < 1 for k in widths) or any(b >= a for a, b in zip(widths, widths[1:])):
        raise InvalidSpec(f"invalid widths {widths}")
    if not P > widths[0]:
        raise InvalidSpec("need P > k1")
    if not 0.0 <= sparsity_fraction < 1.0:
        raise InvalidSpec("sparsity_fraction must be in [0, 1)")
    if n_subjects < 1 or concentration <= 0:
        raise InvalidSpec("need n_subjects >= 1 and a positive concentration")

    rng = np.random.default_rng(seed)
    n_zero = int(round(sparsity_fraction * P))
    nnz = P - n_zero
    if nnz < 1:
        raise InvalidSpec("sparsity_fraction leaves no nonzero entries")

    w1 = np.zeros((P, widths[0]))
    for col, rows in enumerate(_supports(rng, P, widths[0], nnz)):
        vals = rng.uniform(-1.0, 1.0, size=rows.size)
        if rows.size > 1 and (np.all(vals > 0) or np.all(vals < 0)):
            vals[0] = -vals[0]
        w1[rows, col] = vals / np.abs(vals).max()
    comps = [w1]

    for k_prev, k in zip(widths, widths[1:]):
        # disjoint groups of finer components merge into each coarser one
        groups = np.array_split(rng.permutation(k_prev), k)
        m = np.zeros((k_prev, k))
        for col, rows in enumerate(groups):
            vals = rng.uniform(0.5, 1.0, size=rows.size)
            m[rows, col] = vals / vals.max()
        comps.append(m)

    loadings = [rng.dirichlet(np.full(k, concentration), size=n_subjects) for k in widths]
    return GroundTruth(comps, loadings, int(seed), float(sparsity_fraction))


def synthesize_panel(
    truth: GroundTruth,
    S: int,
    T: int,
    gaussian_sigma: float = 0.0,
    poisson_mean: float = 0.0,
    seed: int = 0,
) -> TimeSeriesPanel:
    """Linear latent-factor time series.

    x_t = sum_r Y_r diag(lam_r^i)^(1/2) z_{r,t} + gaussian_sigma e_t + (Poisson(poisson_mean) - poisson_mean)

    so the expected covariance is sum_r Y_r diag(lam_r^i) Y_r^T plus a
    diagonal noise floor. For a single level this is the W1 term alone.
    """
    if T < 2 or S < 1:
        raise InvalidParams("need T >= 2 and S >= 1")
    if gaussian_sigma < 0 or poisson_mean < 0:
        raise InvalidParams("noise parameters must be nonnegative")
    if S > truth.loadings[0].shape[0]:
        raise InvalidParams(f"truth holds loadings for {truth.loadings[0].shape[0]} subjects, asked for {S}")
    rng = np.random.default_rng(seed)
    patterns = truth.patterns()
    p = patterns[0].shape[0]
    subjects = []
    for i in range(S):
        x = np.zeros((T, p))
        for y, lam in zip(patterns, truth.loadings):
            z = rng.standard_normal((T, y.shape[1]))
            x += (z * np.sqrt(lam[i])) @ y.T
        if gaussian_sigma > 0:
            x += gaussian_sigma * rng.standard_normal((T, p))
        if poisson_mean > 0:
            x += rng.poisson(poisson_mean, size=(T, p)) - poisson_mean
        subjects.append(x)
    truth.noise = {"gaussian_sigma": float(gaussian_sigma), "poisson_mean": float(poisson_mean)}
    return TimeSeriesPanel(subjects)


def similarity_matrix(estimated, truth, allow_zero: bool = False) -> np.ndarray:
    """|cos| between every estimated column (rows) and every truth column (columns).

    With ``allow_zero`` a collapsed column (norm <= COLLAPSE_TOL) scores 0
    against everything instead of raising.
    """
    a = np.asarray(estimated, dtype=float)
    b = np.asarray(truth, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    if not allow_zero and (np.any(na == 0) or np.any(nb == 0)):
        raise ZeroColumn("cannot compare a zero column")
    if allow_zero:
        na = np.where(na > COLLAPSE_TOL, na, 0.0)
        nb = np.where(nb > COLLAPSE_TOL, nb, 0.0)
    denom = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(denom > 0, np.abs(a.T @ b) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(sim, 0.0, 1.0)


def match_accuracy(estimated, truth, allow_zero: bool = False) -> MatchResult:
    sim = similarity_matrix(estimated, truth, allow_zero)
    rows, cols = linear_sum_assignment(sim, maximize=True)
    vals = sim[rows, cols]
    return MatchResult(
        assignment=[(int(r), int(c)) for r, c in zip(rows, cols)],
        per_component_similarity=[float(v) for v in vals],
        mean_accuracy=float(np.mean(vals)),
    )


def accuracy_by_level(model: FactorModel, truth: GroundTruth) -> list[float]:
    """Matched accuracy of each level's pattern; a collapsed component scores 0."""
    return [match_accuracy(e, t, allow_zero=True).mean_accuracy for e, t in zip(model.patterns(), truth.patterns())]


# -- reproducibility and lambda selection -----------------------------------

@dataclass
class ReproducibilityResult:
    per_run: np.ndarray  # (n_runs, K)

    @property
    def mean(self) -> np.ndarray:
        return self.per_run.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.per_run.std(axis=0)


def _fit(method: str, data, spec, fit_config, perturb_config):
    from .trainer import fit_adv_hscp, fit_hscp

    if method == "hscp":
        return fit_hscp(data, spec, fit_config)[0]
    if method in ("adv", "adv-hscp"):
        return fit_adv_hscp(data, spec, fit_config, perturb_config)[0]
    raise InvalidParams(f"unknown method {method!r}")


def split_sample_reproducibility(
    data,
    spec: HierarchySpec,
    fit_config,
    method: str = "hscp",
    n_runs: int = 20,
    seed: int = 0,
    perturb_config=None,
) -> ReproducibilityResult:
    """Fit each random half of the subjects and compare the level patterns of the two fits."""
    theta = as_stack(data)
    s = theta.shape[0]
    if s < 2:
        raise InsufficientSubjects("split-sample reproducibility needs at least 2 subjects")
    if n_runs < 1:
        raise InvalidParams("n_runs must be >= 1")
    rng = np.random.default_rng(seed)
    half = s // 2
    rows = []
    for run in range(n_runs):
        perm = rng.permutation(s)
        a = _fit(method, theta[perm[:half]], spec, fit_config, perturb_config)
        b = _fit(method, theta[perm[half:2 * half]], spec, fit_config, perturb_config)
        rows.append([match_accuracy(x, y, allow_zero=True).mean_accuracy for x, y in zip(a.patterns(), b.patterns())])
        log.debug("split run %d: %s", run, rows[-1])
    return ReproducibilityResult(np.asarray(rows))


def candidate_lambdas(P: int, exponent_grid) -> list[float]:
    # dividing for negative exponents keeps e.g. 12 * 10**-1 at exactly 1.2
    return [float(P * 10 ** e) if e >= 0 else P / 10 ** (-e) for e in exponent_grid]


@dataclass
class GridResult:
    chosen: list[float]
    table: list[dict]


def grid_search_lambda(
    data,
    spec_template: HierarchySpec,
    exponent_grid=(-2, -1, 0, 1),
    fit_config=None,
    method: str = "hscp",
    n_runs: int = 20,
    seed: int = 0,
    perturb_config=None,
) -> GridResult:
    """Pick the sparsity budget of each level by split-sample reproducibility.

    Levels are searched one after another (coordinate-wise): level r tries
    every candidate P * 10**e while the other levels keep their current
    values, and keeps the candidate with the highest mean reproducibility at
    level r. Ties go to the smaller budget. A cell whose fits fail is kept in
    the table with its error and scores as -inf.
    """
    exponent_grid = list(exponent_grid)
    if not exponent_grid:
        raise InvalidParams("empty exponent grid")
    from .trainer import FitConfig

    fit_config = fit_config or FitConfig()
    theta = as_stack(data)
    cands = sorted(candidate_lambdas(theta.shape[1], exponent_grid))
    current = list(spec_template.sparsity)
    table = []
    for level in range(1, spec_template.depth + 1):
        best, best_score = None, -np.inf
        for lam in cands:
            trial = list(current)
            trial[level - 1] = lam
            spec = replace(spec_template, sparsity=trial)
            row = {"lambda": lam, "level": level, "mean": float("nan"), "std": float("nan"),
                   "n_runs": n_runs, "error": ""}
            try:
                res = split_sample_reproducibility(theta, spec, fit_config, method, n_runs, seed, perturb_config)
                row["mean"] = float(res.mean[level - 1])
                row["std"] = float(res.std[level - 1])
                score = row["mean"]
            except HscpError as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
                score = -np.inf
            table.append(row)
            if score > best_score:
                best, best_score = lam, score
        current[level - 1] = best if best is not None else current[level - 1]
    return GridResult(chosen=current, table=table)

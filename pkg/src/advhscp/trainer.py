"""Plain hierarchical fit and the adversarial attack/defense training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .constraints import project_component, project_loading, project_simplex
from .errors import DimensionMismatch, InvalidSpec, NonFiniteLoss
from .model import (
    AdversaryModel,
    FactorModel,
    HierarchySpec,
    PerturbationConfig,
    as_stack,
    reconstruction_loss,
)
from .objective import (
    LossBreakdown,
    full_breakdown,
    grad_attack_wrt_adversary,
    grad_J_wrt_component,
    grad_J_wrt_loadings,
    grad_reconstruction_wrt_component,
    grad_reconstruction_wrt_loadings,
)
from .optimizer import OptimizerState, amsgrad_step

log = logging.getLogger(__name__)

Callback = Callable[[int, FactorModel, "AdversaryModel | None"], None]


@dataclass
class FitConfig:
    max_outer_iterations: int = 500
    convergence_tol: float = 1e-5
    inner_attack_steps: int = 1
    seed: int = 0
    record_trace: bool = True
    # outer iterations of the adversarial phase; None -> max_outer_iterations
    adversarial_iterations: int | None = None
    window: int = 10
    eta: float = 0.1
    # step size of the plain fit (also the one initializing an adversarial fit); None -> eta
    init_eta: float | None = 0.03
    divergence_factor: float = 1e6
    # adversarial phase reuses the plain fit's moment estimates
    carry_moments: bool = True

    def __post_init__(self):
        if self.max_outer_iterations < 1 or self.inner_attack_steps < 1 or self.window < 1:
            raise InvalidSpec("iteration counts must be >= 1")
        if self.adversarial_iterations is not None and self.adversarial_iterations < 0:
            raise InvalidSpec("adversarial_iterations must be >= 0")
        if self.init_eta is not None and not self.init_eta > 0:
            raise InvalidSpec("init_eta must be positive")
        if not (self.convergence_tol > 0 and self.eta > 0 and self.divergence_factor > 0):
            raise InvalidSpec("tolerances and step size must be positive")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed must be an unsigned 64-bit integer")

    @property
    def plain_eta(self) -> float:
        return self.eta if self.init_eta is None else self.init_eta

    @property
    def adversarial_cap(self) -> int:
        return self.max_outer_iterations if self.adversarial_iterations is None else self.adversarial_iterations


@dataclass
class FitReport:
    iterations_run: int = 0
    converged: bool = False
    loss_trace: list[LossBreakdown] = field(default_factory=list)
    final_objective: float = 0.0
    wall_time: float = 0.0
    init: "FitReport | None" = None  # the plain fit that seeded an adversarial run


# -- perturbation ---------------------------------------------------------------

def data_sigma(data, mode: str = "pooled") -> np.ndarray | float:
    theta = as_stack(data)
    if mode == "pooled":
        return float(theta.std())
    if mode == "per_subject":
        return theta.reshape(theta.shape[0], -1).std(axis=1)
    if mode == "upper":
        iu = np.triu_indices(theta.shape[1], 1)
        return float(theta[:, iu[0], iu[1]].std())
    raise InvalidSpec(f"unknown sigma mode {mode!r}")


def perturb_data(data, config: PerturbationConfig | None = None) -> np.ndarray:
    """Shift every entry of every matrix by magnitude_factor * sigma.

    The result is not a valid correlation set (diagonal and bounds move) and
    is returned as a plain (S, P, P) array.
    """
    config = config or PerturbationConfig()
    theta = as_stack(data)
    sigma = config.sigma if config.sigma is not None else data_sigma(theta, config.sigma_mode)
    shift = config.magnitude_factor * np.asarray(sigma, dtype=float)
    if shift.ndim == 1:
        shift = shift[:, None, None]
    return theta + shift


# -- stopping ---------------------------------------------------------------------

def _objective_values(trace) -> list[float]:
    return [t.total_J if isinstance(t, LossBreakdown) else float(t) for t in trace]


def windowed_relative_change(trace, window: int = 10) -> float | None:
    """Mean of |J_t - J_{t-1}| / |J_{t-1}| over the last ``window`` steps, or None if too short."""
    vals = _objective_values(trace)
    if len(vals) < window + 1:
        return None
    tail = vals[-(window + 1):]
    rel = [abs(b - a) / max(abs(a), 1e-300) for a, b in zip(tail, tail[1:])]
    return math.fsum(rel) / window


def check_stopping(trace, config: FitConfig, cap: int | None = None) -> bool:
    if not trace:
        raise ValueError("empty trace")
    cap = config.max_outer_iterations if cap is None else cap
    if len(trace) >= cap:
        return True
    change = windowed_relative_change(trace, config.window)
    return change is not None and change < config.convergence_tol


def _converged(trace, config: FitConfig) -> bool:
    change = windowed_relative_change(trace, config.window)
    return change is not None and change < config.convergence_tol


# -- shared pieces ------------------------------------------------------------------

def _validate(theta: np.ndarray, spec: HierarchySpec):
    if theta.shape[0] < 1:
        raise DimensionMismatch("no subjects")
    spec.check_nodes(theta.shape[1])


def initial_model(theta: np.ndarray, spec: HierarchySpec, seed: int) -> FactorModel:
    """Seeded nonnegative start with uniform loadings.

    Level by level, uniform random entries are rescaled by the least-squares
    optimal factor for that level's reconstruction of the data, then
    projected. Without the rescaling the first AMSgrad step (a unit step on
    every coordinate) can zero whole nonnegative columns, which never recover.
    """
    rng = np.random.default_rng(seed)
    s, p = theta.shape[0], theta.shape[1]
    comps = []
    rows = p
    y = np.eye(p)
    for r, (k, lam) in enumerate(zip(spec.widths, spec.sparsity)):
        w = project_component(rng.uniform(0.0, 1.0, size=(rows, k)), lam, nonneg=True)[0]
        yr = y @ w
        recon = (yr / k) @ yr.T
        denom = float(np.sum(recon * recon))
        if denom > 0:
            fit = float(np.einsum("spq,pq->", theta, recon)) / (s * denom)
            if fit > 0:
                # reconstruction is quadratic in W_r
                w = project_component(w * np.sqrt(fit), lam, nonneg=True)[0]
        comps.append(w)
        y = y @ w
        rows = k
    loadings = [np.full((s, k), 1.0 / k) for k in spec.widths]
    return FactorModel(comps, loadings)


def _update_loadings(state: OptimizerState, grad: np.ndarray, lam: np.ndarray) -> np.ndarray:
    stepped = amsgrad_step(state, grad, lam)
    ok = np.maximum(stepped, 0.0).sum(axis=1) > 0
    out = np.empty_like(stepped)
    if np.any(ok):
        out[ok] = project_loading(stepped[ok])
    if not np.all(ok):
        # clamp-and-rescale is undefined when every entry went negative
        out[~ok] = project_simplex(stepped[~ok])
    return out


def _step_component(model: FactorModel, r: int, grad: np.ndarray, state: OptimizerState, spec: HierarchySpec):
    stepped = amsgrad_step(state, grad, model.components[r - 1])
    w, report = project_component(stepped, spec.sparsity[r - 1], nonneg=r > 1)
    model.components[r - 1] = w
    if report.columns_modified:
        log.debug(
            "W%d: projected %d columns (l1 over %.3g, linf over %.3g)",
            r, report.columns_modified, report.max_l1_violation_before, report.max_linf_violation_before,
        )


def _guard(value: float, reference: float, config: FitConfig):
    if not math.isfinite(value) or value > config.divergence_factor * max(reference, 1e-300):
        raise NonFiniteLoss(f"objective diverged: {value!r} (reference {reference!r})")


def _guard_reference(initial: float, theta: np.ndarray) -> float:
    # an initial loss near zero (a start at an exact fit) says nothing about
    # the problem's scale; the data energy, the loss of the zero model, does
    if not math.isfinite(initial):
        raise NonFiniteLoss(f"initial objective is {initial!r}")
    return max(initial, float(np.sum(theta * theta)))


@dataclass
class _States:
    components: list[OptimizerState]
    loadings: list[OptimizerState]
    adversary: list[OptimizerState] | None = None


def _new_states(model: FactorModel, eta: float) -> _States:
    return _States(
        [OptimizerState.zeros_like(w, eta=eta) for w in model.components],
        [OptimizerState.zeros_like(l, eta=eta) for l in model.loadings],
    )


# -- plain fit --------------------------------------------------------------------------

def _fit_plain(theta, spec, config, callback, model=None):
    model = model or initial_model(theta, spec, config.seed)
    states = _new_states(model, config.plain_eta)
    start = time.perf_counter()
    report = FitReport()
    initial = _guard_reference(reconstruction_loss(model.components, model, theta), theta)
    trace: list[LossBreakdown] = []
    for it in range(config.max_outer_iterations):
        for r in range(1, model.depth + 1):
            g = grad_reconstruction_wrt_component(model.components, model.loadings, theta, r)
            _step_component(model, r, g, states.components[r - 1], spec)
            g = grad_reconstruction_wrt_loadings(model.components, model.loadings, theta, r)
            model.loadings[r - 1] = _update_loadings(states.loadings[r - 1], g, model.loadings[r - 1])
        h = reconstruction_loss(model.components, model, theta)
        _guard(h, initial, config)
        trace.append(LossBreakdown(defense_clean=h, total_J=h))
        if callback is not None:
            callback(it, model, None)
        if check_stopping(trace, config):
            break
    report.iterations_run = len(trace)
    report.converged = _converged(trace, config)
    report.loss_trace = trace if config.record_trace else []
    report.final_objective = trace[-1].total_J
    report.wall_time = time.perf_counter() - start
    return model, report, states


def fit_hscp(data, spec: HierarchySpec, config: FitConfig | None = None, callback: Callback | None = None):
    """Alternating projected AMSgrad on the clean reconstruction loss.

    Per outer iteration and level: one step on W_r followed by its
    feasibility projection, then one step on every subject's loadings
    followed by clamp-and-rescale. Trace entries carry the loss in
    ``defense_clean`` and ``total_J``.
    """
    config = config or FitConfig()
    theta = as_stack(data)
    _validate(theta, spec)
    model, report, _ = _fit_plain(theta, spec, config, callback)
    return model, report


# -- adversarial fit -----------------------------------------------------------------------

def fit_adv_hscp(
    data,
    spec: HierarchySpec,
    fit_config: FitConfig | None = None,
    perturb_config: PerturbationConfig | None = None,
    callback: Callback | None = None,
):
    """Plain fit for initialization, then alternate attack and defense.

    For each level r: ``inner_attack_steps`` unprojected steps on W~_r against
    the perturbed data, one projected step on W_r, one step on the level-r
    loadings of every subject. The moment estimates of W and the loadings
    carry over from the initializing fit, and W~ starts from W together with
    a copy of W's moments; fresh moments would make the first update a unit
    step on every coordinate and discard the initialization.
    """
    config = fit_config or FitConfig()
    theta = as_stack(data)
    _validate(theta, spec)
    gamma = perturb_data(theta, perturb_config)

    model, init_report, states = _fit_plain(theta, spec, config, None)
    adversary = AdversaryModel.from_model(model)
    if not config.carry_moments:
        states = _new_states(model, config.eta)
    for st in states.components + states.loadings:
        st.eta = config.eta
    states.adversary = [s.copy() for s in states.components]
    alpha, beta = spec.alpha, spec.beta

    start = time.perf_counter()
    first = full_breakdown(adversary, model, theta, gamma, alpha, beta)
    initial = _guard_reference(first.total_J, theta)
    trace: list[LossBreakdown] = []
    cap = config.adversarial_cap
    for it in range(cap):
        for r in range(1, model.depth + 1):
            for _ in range(config.inner_attack_steps):
                g = grad_attack_wrt_adversary(adversary, model, gamma, r, alpha)
                adversary.components[r - 1] = amsgrad_step(states.adversary[r - 1], g, adversary.components[r - 1])
            g = grad_J_wrt_component(model, theta, r, beta)
            _step_component(model, r, g, states.components[r - 1], spec)
            g = grad_J_wrt_loadings(adversary, model, theta, r, beta)
            model.loadings[r - 1] = _update_loadings(states.loadings[r - 1], g, model.loadings[r - 1])
        bd = full_breakdown(adversary, model, theta, gamma, alpha, beta)
        _guard(bd.total_J, initial, config)
        trace.append(bd)
        if callback is not None:
            callback(it, model, adversary)
        if check_stopping(trace, config, cap):
            break

    report = FitReport(init=init_report)
    report.iterations_run = len(trace)
    report.converged = _converged(trace, config) if trace else init_report.converged
    report.loss_trace = trace if config.record_trace else []
    report.final_objective = trace[-1].total_J if trace else first.total_J
    report.wall_time = time.perf_counter() - start + init_report.wall_time
    return model, adversary, report


def feasibility_violations(model: FactorModel, sparsity: Sequence[float]) -> dict[str, float]:
    """Largest violation of each constraint (0 when satisfied)."""
    out = {"l1": 0.0, "linf": 0.0, "nonneg": 0.0, "loading_neg": 0.0, "loading_sum": 0.0}
    for r, (w, lam) in enumerate(zip(model.components, sparsity)):
        out["l1"] = max(out["l1"], float((np.abs(w).sum(axis=0) - lam).max(initial=0.0)))
        out["linf"] = max(out["linf"], float(np.abs(w).max(initial=0.0) - 1.0))
        if r > 0:
            out["nonneg"] = max(out["nonneg"], float(-w.min(initial=0.0)))
    for lam in model.loadings:
        out["loading_neg"] = max(out["loading_neg"], float(-lam.min(initial=0.0)))
        out["loading_sum"] = max(out["loading_sum"], float(np.abs(lam.sum(axis=1) - 1.0).max()))
    return {k: max(v, 0.0) for k, v in out.items()}

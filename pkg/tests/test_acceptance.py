"""The acceptance gate: one test per criterion, each reporting a pass/fail line.

Full-scale experiments (criteria 4, 5, 6, 10) use P=50, k1=8, S=100,
T=300, Gaussian noise sigma 0.5, sparsity fraction 0.8 and a fixed budget
lambda=5 per level, over ground-truth seeds 0..9 (panel seed = seed + 1000).
Only the direction of the comparison is tested; absolute accuracies depend
on the generator.
"""

import functools
import os
import subprocess
import sys

import numpy as np
import pytest

from advhscp.constraints import project_l1_linf
from advhscp.model import AdversaryModel, FactorModel, HierarchySpec, pearson_correlation
from advhscp.objective import (
    attack_objective,
    defense_objective,
    finite_difference_gradient,
    grad_attack_wrt_adversary,
    grad_J_wrt_component,
    grad_J_wrt_loading,
)
from advhscp.optimizer import OptimizerState, amsgrad_step
from advhscp.synthlab import (
    accuracy_by_level,
    generate_ground_truth,
    match_accuracy,
    split_sample_reproducibility,
    synthesize_panel,
)
from advhscp.trainer import FitConfig, feasibility_violations, fit_adv_hscp, fit_hscp
from conftest import random_correlations, random_model
from oracles import dykstra_l1_box

SEEDS = range(10)
ALPHA, BETA = 1e-3, 0.5


@functools.lru_cache(maxsize=None)
def full_scale_data(seed, widths=(8,), poisson=0.0):
    truth = generate_ground_truth(50, list(widths), 0.8, seed, n_subjects=100)
    panel = synthesize_panel(truth, 100, 300, gaussian_sigma=0.5, poisson_mean=poisson, seed=seed + 1000)
    return truth, pearson_correlation(panel).matrices


def compare(widths=(8,), poisson=0.0):
    """Per-seed level accuracies of both methods, shape (10, K) each."""
    spec = HierarchySpec(list(widths), [5.0] * len(widths))
    plain, adv = [], []
    for seed in SEEDS:
        truth, theta = full_scale_data(seed, tuple(widths), poisson)
        plain.append(accuracy_by_level(fit_hscp(theta, spec, FitConfig())[0], truth))
        adv.append(accuracy_by_level(fit_adv_hscp(theta, spec, FitConfig())[0], truth))
    return np.asarray(plain), np.asarray(adv)


def directional(plain, adv):
    wins = int(np.sum(adv > plain))
    ok = adv.mean() >= plain.mean() - 0.01 and wins >= 6
    return ok, f"hSCP {plain.mean():.4f}, Adv {adv.mean():.4f}, Adv better in {wins}/10"


# -- 1 -------------------------------------------------------------------------------------------

def _instance(seed):
    rng = np.random.default_rng(seed)
    k = seed % 3 + 1
    widths = [[4], [5, 3], [6, 4, 2]][k - 1]
    p = int(rng.integers(widths[0] + 1, 13))
    s = int(rng.integers(1, 6))
    model = random_model(rng, p, widths, s)
    adv = AdversaryModel([w + 0.05 * rng.standard_normal(w.shape) for w in model.components])
    theta = random_correlations(rng, p, s, t=30)
    return model, adv, theta, theta + 0.03


def _rel(a, n):
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), 1e-12)


def test_criterion_1_gradients(criterion):
    worst = {"attack": 0.0, "loadings": 0.0, "components": 0.0}
    for seed in range(20):
        model, adv, theta, gamma = _instance(seed)
        for r in range(1, model.depth + 1):
            def fa(x, r=r):
                c = [w.copy() for w in adv.components]
                c[r - 1] = x
                return attack_objective(AdversaryModel(c), model, gamma, r, ALPHA)

            worst["attack"] = max(worst["attack"], _rel(grad_attack_wrt_adversary(adv, model, gamma, r, ALPHA),
                                                          finite_difference_gradient(fa, adv.components[r - 1])))

            def fw(x, r=r):
                c = [w.copy() for w in model.components]
                c[r - 1] = x
                return defense_objective(adv, FactorModel(c, model.loadings), theta, BETA).total_J

            worst["components"] = max(worst["components"], _rel(grad_J_wrt_component(model, theta, r, BETA),
                                                                  finite_difference_gradient(fw, model.components[r - 1])))
            for i in range(model.subject_count):
                def fl(x, r=r, i=i):
                    loads = [l.copy() for l in model.loadings]
                    loads[r - 1][i] = x
                    return defense_objective(adv, FactorModel(model.components, loads), theta, BETA).total_J

                worst["loadings"] = max(worst["loadings"], _rel(grad_J_wrt_loading(adv, model, theta, r, i, BETA),
                                                                  finite_difference_gradient(fl, model.loadings[r - 1][i])))
    ok = max(worst.values()) < 1e-5
    criterion(1, "gradients vs finite differences", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# -- 2 -------------------------------------------------------------------------------------------

def test_criterion_2_projection(criterion):
    rng = np.random.default_rng(2024)
    worst_oracle = worst_l1 = worst_linf = 0.0
    idempotent = True
    for _ in range(200):
        n = int(rng.integers(1, 9))
        x = rng.uniform(-3, 3, size=n)
        lam = float(rng.uniform(0.1, 6.0))
        y = project_l1_linf(x, lam)
        worst_oracle = max(worst_oracle, np.linalg.norm(y - dykstra_l1_box(x, lam)))
        worst_l1 = max(worst_l1, np.abs(y).sum() - lam)
        worst_linf = max(worst_linf, np.abs(y).max() - 1.0)
        idempotent &= bool(np.array_equal(project_l1_linf(y, lam), y))
    ok = worst_oracle < 1e-6 and idempotent and worst_l1 <= 1e-9 and worst_linf <= 1e-12
    criterion(2, "projection vs QP oracle", ok, f"max L2 gap {worst_oracle:.1e}, idempotent {idempotent}")
    assert ok


# -- 3 -------------------------------------------------------------------------------------------

def test_criterion_3_exact_recovery(criterion):
    truth = generate_ground_truth(20, [4], 0.5, 0, n_subjects=10)
    w, lam = truth.components[0], truth.loadings[0]
    theta = (w * lam[:, None, :]) @ w.T
    spec = HierarchySpec([4], [float(np.abs(w).sum(axis=0).max())])
    model, rep = fit_hscp(theta, spec, FitConfig(max_outer_iterations=2000, convergence_tol=1e-12))
    rel = rep.final_objective / float(np.sum(theta ** 2))
    acc = match_accuracy(model.components[0], w).mean_accuracy
    ok = rel < 1e-6 and acc >= 0.99
    criterion(3, "exact recovery on noiseless data", ok, f"relative loss {rel:.1e}, accuracy {acc:.4f}")
    assert ok


# -- 4, 5, 6 -------------------------------------------------------------------------------------

def test_criterion_4_gaussian_direction(criterion):
    plain, adv = compare()
    ok, detail = directional(plain[:, 0], adv[:, 0])
    criterion(4, "Adv. hSCP vs hSCP accuracy, Gaussian noise", ok, detail)
    assert ok


def test_criterion_5_poisson_direction(criterion):
    plain, adv = compare(poisson=0.4)
    ok, detail = directional(plain[:, 0], adv[:, 0])
    criterion(5, "Adv. hSCP vs hSCP accuracy, Poisson stress", ok, detail)
    assert ok


def test_criterion_6_two_levels(criterion):
    plain, adv = compare(widths=(8, 4))
    valid = bool(np.all((plain >= 0) & (plain <= 1) & (adv >= 0) & (adv <= 1)))
    alive = bool(np.all(plain.mean(axis=0) > 0) and np.all(adv.mean(axis=0) > 0))
    ok = valid and alive and adv[:, 0].mean() >= plain[:, 0].mean() - 0.01
    criterion(6, "two-level hierarchy", ok,
              f"level 1 hSCP {plain[:, 0].mean():.4f} Adv {adv[:, 0].mean():.4f}; "
              f"level 2 hSCP {plain[:, 1].mean():.4f} Adv {adv[:, 1].mean():.4f}")
    assert ok


# -- 7 -------------------------------------------------------------------------------------------

def test_criterion_7_feasibility(criterion):
    _, theta = full_scale_data(0, (8, 4))
    spec = HierarchySpec([8, 4], [5.0, 5.0])
    worst = {}
    count = [0]

    def audit(it, model, adv):
        count[0] += 1
        for k, v in feasibility_violations(model, spec.sparsity).items():
            worst[k] = max(worst.get(k, 0.0), v)

    cfg = FitConfig(max_outer_iterations=150)
    fit_hscp(theta, spec, cfg, audit)
    fit_adv_hscp(theta, spec, cfg, callback=audit)
    ok = (worst["l1"] <= 1e-9 and worst["linf"] <= 1e-12 and worst["nonneg"] == 0.0
          and worst["loading_neg"] == 0.0 and worst["loading_sum"] <= 1e-9)
    criterion(7, "feasibility at every iteration", ok,
              f"{count[0]} iterations audited, " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# -- 8 -------------------------------------------------------------------------------------------

def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def test_criterion_8_determinism(criterion, tmp_path):
    import json

    cfg = {"P": 20, "S": 10, "T": 120, "widths": [5, 2], "sparsity": [4.0, 2.0], "sparsity_fraction": 0.6,
           "data": str(tmp_path / "sim" / "data"), "fit": {"max_outer_iterations": 60}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))

    def run(*args, threads=None):
        env = {k: v for k, v in os.environ.items() if k != "HSCP_THREADS"}
        cmd = [sys.executable, "-m", "advhscp", *args, "--config", str(tmp_path / "c.json"), "--seed", "3"]
        if threads:
            cmd += ["--threads", str(threads)]
        return subprocess.run(cmd, env=env, capture_output=True, text=True).returncode

    assert run("simulate", "--out", str(tmp_path / "sim")) == 0
    same = True
    for method in ("hscp", "adv-hscp"):
        codes = [run("fit", "--method", method, "--out", str(tmp_path / f"{method}{t}"), threads=t) for t in (1, 4)]
        assert codes[0] == codes[1] and codes[0] in (0, 2)
        a, b = _tree(tmp_path / f"{method}1"), _tree(tmp_path / f"{method}4")
        same &= a == b and "trace.csv" in a and "W2.csv" in a
    criterion(8, "byte-identical fits at 1 and 4 threads", same)
    assert same


# -- 9 -------------------------------------------------------------------------------------------

def test_criterion_9_amsgrad(criterion):
    st = OptimizerState.zeros_like(np.zeros(1))
    w = amsgrad_step(st, np.array([1.0]), np.array([0.0]))
    first = abs(w[0] - (-0.1 * 1.0 / (0.1 + 1e-8)))
    rng = np.random.default_rng(9)
    st = OptimizerState.zeros_like(np.zeros(5))
    x, prev, mono = rng.standard_normal(5), np.zeros(5), True
    for _ in range(100):
        x = amsgrad_step(st, rng.standard_normal(5) * rng.uniform(0.01, 10), x)
        mono &= bool(np.all(st.v_hat >= prev))
        prev = st.v_hat.copy()
    ok = first < 1e-9 and mono
    criterion(9, "AMSgrad first step and v_hat monotonicity", ok, f"first-step error {first:.1e}")
    assert ok


# -- 10 ------------------------------------------------------------------------------------------

def test_criterion_10_split_sample(criterion):
    spec = HierarchySpec([8], [5.0])
    plain, adv = [], []
    for seed in SEEDS:
        _, theta = full_scale_data(seed)
        # same seed -> same random splits for both methods
        plain.append(split_sample_reproducibility(theta, spec, FitConfig(), "hscp", n_runs=2, seed=seed).mean[0])
        adv.append(split_sample_reproducibility(theta, spec, FitConfig(), "adv", n_runs=2, seed=seed).mean[0])
    plain, adv = np.asarray(plain), np.asarray(adv)
    in_range = bool(np.all((plain >= 0) & (plain <= 1) & (adv >= 0) & (adv <= 1)))
    ok, detail = directional(plain, adv)
    ok = ok and in_range
    criterion(10, "split-sample reproducibility (synthetic substitute)", ok, detail)
    assert ok

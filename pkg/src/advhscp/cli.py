"""Command-line harness: ``simulate``, ``fit``, ``eval`` and ``grid``.

Every command reads a JSON config; ``--seed`` and ``--method`` override the
matching config entries. The config is validated in full before any output
is written.

Exit codes: 0 success (and, for ``fit``, convergence), 2 iteration cap hit
without convergence, 3 invalid input, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .archive import ModelArchive, load_dataset, save_dataset, write_table, write_trace
from .errors import HscpError, InvalidSpec
from .model import HierarchySpec, PerturbationConfig
from .synthlab import accuracy_by_level, generate_ground_truth, grid_search_lambda, split_sample_reproducibility, synthesize_panel
from .trainer import FitConfig, fit_adv_hscp, fit_hscp

log = logging.getLogger("advhscp")

EXIT_OK, EXIT_CAP, EXIT_INPUT, EXIT_IO = 0, 2, 3, 4
METHODS = ("hscp", "adv-hscp")


@dataclass
class ExperimentConfig:
    # generation
    P: int = 50
    S: int = 100
    T: int = 300
    widths: list = field(default_factory=lambda: [8])
    sparsity_fraction: float = 0.8
    gaussian_sigma: float = 0.5
    poisson_mean: float = 0.0
    concentration: float = 1.0
    # model
    sparsity: list | None = None  # lambda per level; None -> P / 10 per level
    alpha: float = 1e-3
    beta: float = 0.5
    method: str = "hscp"
    seed: int = 0
    fit: dict = field(default_factory=dict)
    perturb: dict = field(default_factory=dict)
    # paths
    data: str | None = None
    truth: str | None = None
    archives: list = field(default_factory=list)
    # eval / grid
    reproducibility_runs: int = 0
    methods: list | None = None
    exponent_grid: list = field(default_factory=lambda: [-2, -1, 0, 1])
    n_runs: int = 20

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise InvalidSpec("config must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise InvalidSpec(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def validate(self):
        for name in ("P", "S", "T", "n_runs"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise InvalidSpec(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed must be an unsigned 64-bit integer")
        if self.method not in METHODS:
            raise InvalidSpec(f"method must be one of {METHODS}, got {self.method!r}")
        for m in self.methods or []:
            if m not in METHODS:
                raise InvalidSpec(f"unknown method {m!r}")
        if not all(isinstance(e, int) for e in self.exponent_grid) or not self.exponent_grid:
            raise InvalidSpec("exponent_grid must be a nonempty list of integers")
        if self.gaussian_sigma < 0 or self.poisson_mean < 0:
            raise InvalidSpec("noise parameters must be nonnegative")
        self.spec()
        self.fit_config()
        self.perturb_config()

    def spec(self) -> HierarchySpec:
        lam = self.sparsity if self.sparsity is not None else [self.P / 10.0] * len(self.widths)
        return HierarchySpec(list(self.widths), list(lam), self.alpha, self.beta)

    def fit_config(self) -> FitConfig:
        try:
            return FitConfig(**{"seed": self.seed, **self.fit})
        except TypeError as exc:
            raise InvalidSpec(f"fit: {exc}") from None

    def perturb_config(self) -> PerturbationConfig:
        try:
            return PerturbationConfig(**self.perturb)
        except TypeError as exc:
            raise InvalidSpec(f"perturb: {exc}") from None


def load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"{args.config}: invalid JSON ({exc})") from None
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.method is not None:
        raw["method"] = args.method
    cfg = ExperimentConfig.from_dict(raw)
    cfg.validate()
    return cfg


def _staged(out: Path):
    """Temporary sibling directory that replaces ``out`` once everything is written."""
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    tmp.chmod(0o755)
    return tmp


def _commit(tmp: Path, out: Path):
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


def _require(path, what):
    if not path:
        raise InvalidSpec(f"config needs '{what}'")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# -- commands -------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out: Path) -> int:
    """Ground-truth archive under truth/, per-subject time series under data/."""
    spec = cfg.spec()
    truth = generate_ground_truth(cfg.P, cfg.widths, cfg.sparsity_fraction, cfg.seed, cfg.S, cfg.concentration)
    panel = synthesize_panel(truth, cfg.S, cfg.T, cfg.gaussian_sigma, cfg.poisson_mean, seed=cfg.seed + 1)
    tmp = _staged(out)
    try:
        ModelArchive(truth.as_model(), spec.sparsity, seed=cfg.seed, method="truth",
                     extra={"sparsity_fraction": cfg.sparsity_fraction}).save(tmp / "truth")
        save_dataset(tmp / "data", panel, "timeseries", extra={
            "T": cfg.T, "seed": cfg.seed, "gaussian_sigma": cfg.gaussian_sigma, "poisson_mean": cfg.poisson_mean,
        })
        _commit(tmp, out)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    print(f"wrote {cfg.S} subjects ({cfg.T} x {cfg.P}) and ground truth to {out}")
    return EXIT_OK


def _run_fit(cfg: ExperimentConfig, theta, method: str):
    spec, fc = cfg.spec(), cfg.fit_config()
    if method == "hscp":
        model, report = fit_hscp(theta, spec, fc)
        return model, None, report
    return fit_adv_hscp(theta, spec, fc, cfg.perturb_config())


def cmd_fit(cfg: ExperimentConfig, out: Path) -> int:
    theta = load_dataset(_require(cfg.data, "data"))
    spec = cfg.spec()
    spec.check_nodes(theta.shape[1])
    model, adversary, report = _run_fit(cfg, theta, cfg.method)
    arch = ModelArchive(model, spec.sparsity, adversary, spec.alpha, spec.beta, cfg.seed, cfg.method, extra={
        "converged": report.converged,
        "iterations_run": report.iterations_run,
        "final_objective": report.final_objective,
    })
    tmp = _staged(out)
    try:
        arch.save(tmp)
        write_trace(tmp / "trace.csv", report)
        _commit(tmp, out)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    status = "converged" if report.converged else "hit the iteration cap"
    print(f"{cfg.method}: {status} after {report.iterations_run} iterations, objective {report.final_objective:.6g}")
    return EXIT_OK if report.converged else EXIT_CAP


def _width_cols(depth: int) -> list[str]:
    return [f"k{r}" for r in range(1, depth + 1)]


def cmd_eval(cfg: ExperimentConfig, out: Path) -> int:
    """Accuracy of every archive against the ground truth, grouped by (method, widths).

    mean/std are over the archives in a group of the level-1 accuracy;
    deeper levels get their own level<r>_mean / level<r>_std columns.
    """
    truth = ModelArchive.load(_require(cfg.truth, "truth")).model
    archives = [ModelArchive.load(_require(a, "archive")) for a in cfg.archives]
    if not archives:
        raise InvalidSpec("config needs a nonempty 'archives' list")
    depth = truth.depth
    groups: dict[tuple, list] = {}
    for a in archives:
        if a.model.depth != depth or a.model.node_count != truth.node_count:
            raise InvalidSpec(f"archive {a.method} {a.model.widths} does not match the truth's shape")
        groups.setdefault((a.method, tuple(a.model.widths)), []).append(accuracy_by_level(a.model, truth))
    header = ["method"] + _width_cols(depth) + ["mean", "std"]
    header += [f"level{r}_{s}" for r in range(2, depth + 1) for s in ("mean", "std")]
    rows = []
    for (method, widths), accs in groups.items():
        a = np.asarray(accs)
        row = {"method": method, **dict(zip(_width_cols(depth), widths))}
        row["mean"], row["std"] = float(a[:, 0].mean()), float(a[:, 0].std())
        for r in range(2, depth + 1):
            row[f"level{r}_mean"], row[f"level{r}_std"] = float(a[:, r - 1].mean()), float(a[:, r - 1].std())
        rows.append(row)

    repro_rows = []
    if cfg.reproducibility_runs > 0:
        theta = load_dataset(_require(cfg.data, "data"))
        spec = cfg.spec()
        for method in cfg.methods or [cfg.method]:
            res = split_sample_reproducibility(theta, spec, cfg.fit_config(), method, cfg.reproducibility_runs,
                                               cfg.seed, cfg.perturb_config())
            row = {"method": method, **dict(zip(_width_cols(depth), spec.widths))}
            row["mean"], row["std"] = float(res.mean[0]), float(res.std[0])
            for r in range(2, depth + 1):
                row[f"level{r}_mean"], row[f"level{r}_std"] = float(res.mean[r - 1]), float(res.std[r - 1])
            repro_rows.append(row)

    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "accuracy.csv", header, rows)
    if repro_rows:
        write_table(out / "reproducibility.csv", header, repro_rows)
    for (method, widths), row in zip(groups, rows):
        print(f"{method} {list(widths)}: accuracy {row['mean']:.4f} +/- {row['std']:.4f}")
    return EXIT_OK


def cmd_grid(cfg: ExperimentConfig, out: Path) -> int:
    theta = load_dataset(_require(cfg.data, "data"))
    spec = cfg.spec()
    spec.check_nodes(theta.shape[1])
    res = grid_search_lambda(theta, spec, cfg.exponent_grid, cfg.fit_config(), cfg.method, cfg.n_runs, cfg.seed,
                             cfg.perturb_config())
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "grid.csv", ["lambda", "level", "mean", "std", "n_runs", "error"], res.table)
    for r, lam in enumerate(res.chosen, 1):
        print(f"level {r}: lambda = {lam:.17g}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "eval": cmd_eval, "grid": cmd_grid}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hscp", description="Hierarchical sparse connectivity patterns.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, help="BLAS thread cap (default: $HSCP_THREADS)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _threads(arg) -> int | None:
    if arg is not None:
        n = arg
    elif os.environ.get("HSCP_THREADS"):
        try:
            n = int(os.environ["HSCP_THREADS"])
        except ValueError:
            raise InvalidSpec("HSCP_THREADS must be an integer") from None
    else:
        return None
    if n < 1:
        raise InvalidSpec("thread count must be >= 1")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args)
        threads = _threads(args.threads)
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](cfg, Path(args.out))
    except (HscpError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

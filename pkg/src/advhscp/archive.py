"""On-disk formats: matrix CSVs, model archives, datasets and loss traces.

Matrices are comma-separated decimal text, one row per line, no header,
17 significant digits (enough for an exact double round-trip). Shapes live
in the JSON manifests.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InvalidSpec
from .model import AdversaryModel, CorrelationSet, FactorModel, TimeSeriesPanel, pearson_correlation

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
DATASET_MANIFEST = "dataset.json"


def write_matrix(path, matrix) -> None:
    a = np.asarray(matrix, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    lines = [",".join(format(float(x), ".17g") for x in row) for row in a]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_matrix(path, shape=None) -> np.ndarray:
    text = Path(path).read_text()
    try:
        rows = [[float(x) for x in line.split(",")] for line in text.splitlines() if line.strip()]
        a = np.array(rows, dtype=float)
    except ValueError as exc:
        raise InvalidSpec(f"{path}: malformed matrix file ({exc})") from None
    if a.ndim != 2:
        raise InvalidSpec(f"{path}: ragged rows")
    if shape is not None and a.shape != tuple(shape):
        raise DimensionMismatch(f"{path}: expected shape {tuple(shape)}, found {a.shape}")
    return a


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"{path}: invalid JSON ({exc})") from None


@dataclass
class ModelArchive:
    """A fitted (or planted) model plus the settings it was produced under."""

    model: FactorModel
    sparsity: list[float]
    adversary: AdversaryModel | None = None
    alpha: float = 1e-3
    beta: float = 0.5
    seed: int = 0
    method: str = "hscp"
    extra: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        m = self.model
        out = {
            "P": m.node_count,
            "S": m.subject_count,
            "K": m.depth,
            "widths": m.widths,
            "lambda": [float(x) for x in self.sparsity],
            "alpha": float(self.alpha),
            "beta": float(self.beta),
            "seed": int(self.seed),
            "method": self.method,
            "format_version": FORMAT_VERSION,
            "adversarial": self.adversary is not None,
        }
        out.update(self.extra)
        return out

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for r, w in enumerate(self.model.components, 1):
            write_matrix(d / f"W{r}.csv", w)
            write_matrix(d / f"loadings{r}.csv", self.model.loadings[r - 1])
            if self.adversary is not None:
                write_matrix(d / f"Wtilde{r}.csv", self.adversary.components[r - 1])
        _write_json(d / MANIFEST, self.manifest())
        return d

    @classmethod
    def load(cls, directory) -> "ModelArchive":
        d = Path(directory)
        man = _read_json(d / MANIFEST)
        try:
            version = man["format_version"]
            p, s, k, widths = man["P"], man["S"], man["K"], list(man["widths"])
        except KeyError as exc:
            raise InvalidSpec(f"{d}: manifest lacks {exc}") from None
        if version != FORMAT_VERSION:
            raise InvalidSpec(f"{d}: unsupported format_version {version}")
        if len(widths) != k:
            raise DimensionMismatch(f"{d}: K={k} but {len(widths)} widths")
        rows = [p] + widths[:-1]
        comps = [read_matrix(d / f"W{r}.csv", (rows[r - 1], widths[r - 1])) for r in range(1, k + 1)]
        loads = [read_matrix(d / f"loadings{r}.csv", (s, widths[r - 1])) for r in range(1, k + 1)]
        adv = None
        if man.get("adversarial"):
            adv = AdversaryModel([read_matrix(d / f"Wtilde{r}.csv", comps[r - 1].shape) for r in range(1, k + 1)])
        known = {"P", "S", "K", "widths", "lambda", "alpha", "beta", "seed", "method", "format_version", "adversarial"}
        return cls(
            model=FactorModel(comps, loads),
            sparsity=[float(x) for x in man.get("lambda", [])],
            adversary=adv,
            alpha=float(man.get("alpha", 1e-3)),
            beta=float(man.get("beta", 0.5)),
            seed=int(man.get("seed", 0)),
            method=str(man.get("method", "")),
            extra={key: v for key, v in man.items() if key not in known},
        )


# -- datasets ---------------------------------------------------------------------

def _subject_name(i: int) -> str:
    return f"subject_{i:03d}.csv"


def save_dataset(directory, data, kind: str, extra: dict | None = None) -> Path:
    """Write per-subject CSVs (time series or correlation matrices) and a dataset manifest."""
    d = Path(directory)
    if kind == "timeseries":
        mats = list(data.subjects) if isinstance(data, TimeSeriesPanel) else list(data)
    elif kind == "correlation":
        mats = list(data.matrices if isinstance(data, CorrelationSet) else np.asarray(data))
    else:
        raise InvalidSpec(f"unknown dataset kind {kind!r}")
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for i, m in enumerate(mats):
        files.append(_subject_name(i))
        write_matrix(d / files[-1], m)
    man = {"kind": kind, "S": len(mats), "P": int(np.asarray(mats[0]).shape[1]), "files": files}
    man.update(extra or {})
    _write_json(d / DATASET_MANIFEST, man)
    return d


def load_dataset(directory) -> np.ndarray:
    """Read a dataset directory as an (S, P, P) stack of correlation matrices."""
    d = Path(directory)
    man = _read_json(d / DATASET_MANIFEST)
    kind, files, p = man.get("kind"), man.get("files"), man.get("P")
    if kind not in ("timeseries", "correlation") or not isinstance(files, list) or not isinstance(p, int):
        raise InvalidSpec(f"{d}: malformed dataset manifest")
    if man.get("S", len(files)) != len(files):
        raise DimensionMismatch(f"{d}: manifest S={man.get('S')} but {len(files)} files listed")
    mats = []
    for name in files:
        m = read_matrix(d / name)
        if m.shape[1] != p:
            raise DimensionMismatch(f"{d / name}: expected {p} columns, found {m.shape[1]}")
        mats.append(m)
    if kind == "timeseries":
        return pearson_correlation(TimeSeriesPanel(mats)).matrices
    return CorrelationSet(np.stack(mats)).matrices


# -- loss traces ------------------------------------------------------------------

def write_trace(path, report) -> None:
    """CSV of every recorded iteration; an adversarial fit's initializing run comes first."""
    from .objective import LossBreakdown

    rows = ["phase,iteration," + ",".join(LossBreakdown.FIELDS)]
    phases = [("init", report.init), ("main", report)] if report.init is not None else [("main", report)]
    for phase, rep in phases:
        for it, bd in enumerate(rep.loss_trace):
            rows.append(f"{phase},{it}," + ",".join(format(float(x), ".17g") for x in bd.as_row()))
    Path(path).write_text("\n".join(rows) + "\n")


def write_table(path, header, rows) -> None:
    def cell(x):
        return format(x, ".17g") if isinstance(x, float) else str(x)

    lines = [",".join(header)] + [",".join(cell(r.get(h, "")) for h in header) for r in rows]
    tmp = Path(str(path) + ".part")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from advhscp.archive import ModelArchive, load_dataset, read_matrix, save_dataset, write_matrix, write_trace
from advhscp.errors import DimensionMismatch, InvalidSpec
from advhscp.model import AdversaryModel, TimeSeriesPanel, pearson_correlation
from advhscp.trainer import FitConfig, fit_adv_hscp
from conftest import random_correlations, random_model

doubles = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=doubles))
def test_matrix_round_trip_bitwise(tmp_path_factory, m):
    path = tmp_path_factory.mktemp("m") / "m.csv"
    write_matrix(path, m)
    back = read_matrix(path, m.shape)
    assert back.tobytes() == m.tobytes()


def test_matrix_format(tmp_path):
    write_matrix(tmp_path / "a.csv", [[0.1, -2.0], [1e-300, 3.0]])
    assert (tmp_path / "a.csv").read_text() == "0.10000000000000001,-2\n1e-300,3\n"


def test_matrix_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("1,2\n3,x\n")
    with pytest.raises(InvalidSpec):
        read_matrix(tmp_path / "bad.csv")
    (tmp_path / "rag.csv").write_text("1,2\n3\n")
    with pytest.raises(InvalidSpec):
        read_matrix(tmp_path / "rag.csv")
    write_matrix(tmp_path / "ok.csv", np.zeros((2, 3)))
    with pytest.raises(DimensionMismatch):
        read_matrix(tmp_path / "ok.csv", (3, 2))


def test_model_archive_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = random_model(rng, 9, [4, 2], 3)
    adv = AdversaryModel([w + rng.standard_normal(w.shape) for w in m.components])
    ModelArchive(m, [3.0, 1.5], adv, seed=2**64 - 1, method="adv-hscp").save(tmp_path)
    back = ModelArchive.load(tmp_path)
    for a, b in zip(m.components + m.loadings + adv.components,
                    back.model.components + back.model.loadings + back.adversary.components):
        assert a.tobytes() == b.tobytes()
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert {k: man[k] for k in ("P", "S", "K", "widths", "lambda", "method", "format_version")} == {
        "P": 9, "S": 3, "K": 2, "widths": [4, 2], "lambda": [3.0, 1.5], "method": "adv-hscp", "format_version": 1,
    }
    assert back.seed == 2**64 - 1
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "W1.csv", "W2.csv", "Wtilde1.csv", "Wtilde2.csv", "loadings1.csv", "loadings2.csv", "manifest.json",
    ]


def test_archive_detects_shape_mismatch(tmp_path):
    m = random_model(np.random.default_rng(1), 6, [3], 2)
    ModelArchive(m, [2.0]).save(tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["S"] = 5
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DimensionMismatch):
        ModelArchive.load(tmp_path)
    (tmp_path / "manifest.json").write_text("{")
    with pytest.raises(InvalidSpec):
        ModelArchive.load(tmp_path)


def test_dataset_timeseries_and_correlation(tmp_path):
    rng = np.random.default_rng(2)
    panel = TimeSeriesPanel([rng.standard_normal((20, 5)) for _ in range(3)])
    save_dataset(tmp_path / "ts", panel, "timeseries")
    np.testing.assert_array_equal(load_dataset(tmp_path / "ts"), pearson_correlation(panel).matrices)
    corr = random_correlations(rng, 5, 3)
    save_dataset(tmp_path / "c", corr, "correlation")
    assert load_dataset(tmp_path / "c").tobytes() == corr.tobytes()
    with pytest.raises(InvalidSpec):
        save_dataset(tmp_path / "x", corr, "nifti")


def test_dataset_manifest_mismatch(tmp_path):
    corr = random_correlations(np.random.default_rng(3), 5, 2)
    save_dataset(tmp_path, corr, "correlation")
    man = json.loads((tmp_path / "dataset.json").read_text())
    man["P"] = 6
    (tmp_path / "dataset.json").write_text(json.dumps(man))
    with pytest.raises(DimensionMismatch):
        load_dataset(tmp_path)


def test_trace_csv(tmp_path):
    theta = random_correlations(np.random.default_rng(4), 8, 3)
    from advhscp.model import HierarchySpec

    _, _, rep = fit_adv_hscp(theta, HierarchySpec([3], [2.0]), FitConfig(max_outer_iterations=4))
    write_trace(tmp_path / "t.csv", rep)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "phase,iteration,attack_proximity,attack_fit,defense_perturbed,defense_clean,total_J"
    assert len(lines) == 1 + rep.init.iterations_run + rep.iterations_run
    last = lines[-1].split(",")
    assert last[0] == "main" and float(last[-1]) == rep.final_objective

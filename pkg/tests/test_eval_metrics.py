import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynaloc import channel_sim as cs
from dynaloc import da_pipeline as dp
from dynaloc import eval_metrics as em
from dynaloc.fingerprint import adcm

errors_st = st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=60)


def test_interpolated_percentile():
    r = em.ErrorReport([5, 3, 1, 4, 2])
    assert r.percentile(80) == pytest.approx(4.2, abs=1e-12)
    assert r.percentile(50) == 3.0
    np.testing.assert_array_equal(r.errors, [1, 2, 3, 4, 5])


@given(errors_st)
def test_percentile_consistency(errs):
    r = em.ErrorReport(errs)
    assert r.percentile(0) == min(errs) and r.percentile(100) == max(errs)
    table = r.percentile_table(range(0, 101, 5))
    vals = list(table.values())
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_report_validation():
    for bad in ([], [1.0, -0.5], [np.nan]):
        with pytest.raises(ValueError):
            em.ErrorReport(bad)
    with pytest.raises(ValueError):
        em.ErrorReport([1.0]).percentile(101)
    with pytest.raises(ValueError):
        em.error_report(np.zeros((3, 2)), np.zeros((2, 2)))


def test_error_report_distances():
    r = em.error_report([[3.0, 4.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(r.errors, [1.0, 5.0])


def test_perfect_model_has_zero_errors(trained_baseline, env_t1):
    test = dp.synthesize_dataset(env_t1, 50, 30, trained_baseline.scale)
    # relabel the test set with the model's own predictions
    test.locations = dp.predict(trained_baseline, test.fingerprints)
    r = em.localization_errors(trained_baseline, test)
    assert np.all(r.errors == 0)
    assert all(v == 0 for v in r.percentile_table().values())
    assert r.provenance["method"] == "baseline"


def test_unlabeled_test_set_rejected(trained_baseline, small_data):
    with pytest.raises(TypeError):
        em.localization_errors(trained_baseline, small_data[1])


def test_cdf_export(tmp_path):
    r = em.ErrorReport(np.random.default_rng(0).exponential(3.0, size=37))
    path = tmp_path / "cdf.csv"
    em.export_report(r, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 38 and lines[0] == "error_m,cumulative_fraction"
    assert float(lines[-1].split(",")[1]) == 1.0
    back = em.load_report(path)
    for q, v in r.percentile_table().items():
        assert abs(back.percentile(q) - v) <= 1e-12


def test_percentile_export(tmp_path):
    r = em.ErrorReport([1, 2, 3, 4, 5])
    em.export_percentiles(r, tmp_path / "p.csv")
    rows = dict(list(csv.reader(open(tmp_path / "p.csv")))[1:])
    assert float(rows["80"]) == pytest.approx(4.2)


def test_export_rejects_other_types(tmp_path):
    with pytest.raises(TypeError):
        em.export_report([1, 2], tmp_path / "x.csv")
    (tmp_path / "y.csv").write_text("a,b\n")
    with pytest.raises(ValueError):
        em.load_report(tmp_path / "y.csv")
    with pytest.raises(ValueError):
        em.load_similarity(tmp_path / "y.csv")


# ---------------------------------------------------------------------------
# similarity


def test_same_environment_gives_zero(trained_baseline, env_t1):
    est = em.similarity(trained_baseline, env_t1, env_t1, n_samples=200, seed=3)
    assert est.value == 0.0 and est.n_samples == 200
    assert est.env_pair == ("t1", "t1")


def test_relabeled_copy_gives_zero(trained_baseline, env_t1):
    copy = cs.derive_environment(env_t1, "t1b")
    assert em.similarity(trained_baseline, env_t1, copy, n_samples=100).value == 0.0


def test_running_max_and_prefix(trained_baseline, env_t1, env_t2):
    short = em.similarity(trained_baseline, env_t1, env_t2, n_samples=100, seed=4)
    long = em.similarity(trained_baseline, env_t1, env_t2, n_samples=300, seed=4)
    np.testing.assert_array_equal(long.gaps[:100], short.gaps)
    rm = long.running_max()
    assert np.all(np.diff(rm) >= 0) and rm[-1] == long.value
    assert short.value <= long.value
    assert long.value > 0


def test_bounded_by_prediction_norms(trained_baseline, env_t1, env_t2):
    pos = cs.sample_positions(env_t1.area, 200, 5)
    pa = dp.predict(trained_baseline, adcm(cs.synthesize_channels(env_t1, pos)))
    pb = dp.predict(trained_baseline, adcm(cs.synthesize_channels(env_t2, pos)))
    est = em.similarity(trained_baseline, env_t1, env_t2, n_samples=200, seed=5)
    sup = max(np.linalg.norm(pa, axis=1).max(), np.linalg.norm(pb, axis=1).max())
    assert est.value <= 2 * sup
    np.testing.assert_allclose(est.gaps, np.linalg.norm(pa - pb, axis=1), atol=1e-12)


def test_grid_mode(trained_baseline, env_t1, env_t2):
    est = em.similarity(trained_baseline, env_t1, env_t2, n_samples=100, grid=True)
    assert est.mode == "grid" and est.n_samples == 100
    again = em.similarity(trained_baseline, env_t1, env_t2, n_samples=100, grid=True, seed=9)
    assert again.value == est.value


def test_similarity_preconditions(trained_baseline, env_t1):
    other_array = cs.generate_environment(7, 20, array=cs.ArrayConfig(n_antennas=8))
    with pytest.raises(ValueError):
        em.similarity(trained_baseline, env_t1, other_array, n_samples=10)
    other_area = cs.generate_environment(7, 20, area=cs.Area(center=(0.0, 50.0)))
    with pytest.raises(ValueError):
        em.similarity(trained_baseline, env_t1, other_area, n_samples=10)
    with pytest.raises(ValueError):
        em.similarity(trained_baseline, env_t1, env_t1, n_samples=0)
    with pytest.raises(ValueError):
        em.SimilarityEstimate(1.0, 1, "x", ("a", "b"), 0).running_max()


def test_similarity_csv_round_trip(trained_baseline, env_t1, env_t2, tmp_path):
    est = em.similarity(trained_baseline, env_t1, env_t2, n_samples=50, seed=2)
    em.export_report(est, tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 2
    back = em.load_similarity(tmp_path / "s.csv")
    assert back.value == est.value and back.env_pair == ("t1", "t2") and back.seed == 2

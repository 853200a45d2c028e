import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentctrl import control as K
from latentctrl import metrics as M
from latentctrl.errors import DegenerateNormalizerError, MissingDataError


def run(t0, t1, others0=None, others1=None, target="t", k=0):
    others0 = others0 or {"o": -1.0}
    others1 = others1 or others0
    start = {target: np.atleast_1d(t0), **{a: np.atleast_1d(v) for a, v in others0.items()}}
    end = {target: np.atleast_1d(t1), **{a: np.atleast_1d(v) for a, v in others1.items()}}
    return M.ScoredRun(target, k, start, end)


def unit_stats(*attrs, k=1):
    return {a: (np.zeros(k), np.ones(k)) for a in attrs}


def test_accuracy_all_and_none():
    flips = M.EvalRun([run(-1.0, 1.0) for _ in range(5)], unit_stats("t", "o"))
    assert M.manipulation_accuracy(flips, ["t", "o"], ["t"]) == {"t": 1.0}
    stays = M.EvalRun([run(-1.0, -0.5) for _ in range(5)], unit_stats("t", "o"))
    assert M.manipulation_accuracy(stays, ["t", "o"], ["t"]) == {"t": 0.0}


def test_accuracy_ten_runs():
    runs = ([run(-1.0, 1.0) for _ in range(6)]
            + [run(-1.0, -0.2) for _ in range(2)]
            + [run(-1.0, 1.0, {"o": -1.0}, {"o": 0.5}) for _ in range(2)])
    acc = M.manipulation_accuracy(M.EvalRun(runs), ["t", "o"], ["t"])
    assert acc["t"] == pytest.approx(0.6)


def test_accuracy_downward_flip_counts():
    assert M.manipulation_accuracy(M.EvalRun([run(2.0, -0.1)]), ["t", "o"], ["t"])["t"] == 1.0


def test_accuracy_multiclass_needs_requested_class():
    hit = run([1.0, 0.0, 0.0], [0.0, 0.0, 2.0], k=2)
    miss = run([1.0, 0.0, 0.0], [0.0, 2.0, 0.0], k=2)
    assert M.manipulation_accuracy(M.EvalRun([hit, miss]), ["t", "o"], ["t"])["t"] == 0.5


def test_accuracy_missing_data():
    with pytest.raises(MissingDataError):
        M.manipulation_accuracy(M.EvalRun([run(-1.0, 1.0)]), ["t", "o"])  # nothing targets o
    with pytest.raises(MissingDataError):
        M.manipulation_accuracy(M.EvalRun([run(-1.0, 1.0)]), ["t", "o"], ["q"])
    with pytest.raises(MissingDataError):
        M.manipulation_accuracy(M.EvalRun([run(-1.0, 1.0)]), ["t", "o", "absent"], ["t"])


def test_ad_zero_drift():
    rs = M.EvalRun([run(-1.0, 1.0), run(-2.0, 0.5)], unit_stats("t", "o"))
    xs, ads = M.ad_points(rs, "t")
    np.testing.assert_allclose(xs, [2.0, 2.5])
    assert np.all(ads == 0)


def test_ad_unit_construction():
    rs = M.EvalRun([run(0.0, 1.0, {"a": 0.0, "b": 3.0}, {"a": 1.0, "b": 2.0})],
                   unit_stats("t", "a", "b"))
    xs, ads = M.ad_points(rs, "t")
    assert xs[0] == 1.0 and ads[0] == 1.0
    _, signed = M.ad_points(rs, "t", absolute=False)
    assert signed[0] == 0.0


def test_ad_normalises_by_std():
    stats = {"t": (np.zeros(1), np.array([2.0])), "o": (np.zeros(1), np.array([0.5]))}
    rs = M.EvalRun([run(0.0, 1.0, {"o": 0.0}, {"o": 1.0})], stats)
    xs, ads = M.ad_points(rs, "t")
    assert xs[0] == 0.5 and ads[0] == 2.0


def test_ad_multiclass_mean_over_classes():
    stats = {"t": (np.zeros(1), np.ones(1)), "c": (np.zeros(3), np.ones(3))}
    rs = M.EvalRun([run(0.0, 1.0, {"c": [0.0, 0.0, 0.0]}, {"c": [3.0, 0.0, 0.0]})], stats)
    assert M.ad_points(rs, "t")[1][0] == pytest.approx(1.0)


def test_ad_zero_std():
    stats = {"t": (np.zeros(1), np.ones(1)), "o": (np.zeros(1), np.zeros(1))}
    with pytest.raises(DegenerateNormalizerError):
        M.ad_points(M.EvalRun([run(0.0, 1.0)], stats), "t")


def test_ad_needs_stats_and_other_attrs():
    with pytest.raises(MissingDataError):
        M.ad_points(M.EvalRun([run(0.0, 1.0)], {}), "t")
    with pytest.raises(MissingDataError):
        M.ad_points(M.EvalRun([run(0.0, 1.0)], unit_stats("t", "o")), "t", attrs=["t"])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-5, 5))
def test_ad_invariant_to_affine_rescaling(seed, a, b):
    r = np.random.default_rng(seed)
    runs, scaled = [], []
    for _ in range(6):
        t0, t1, o0, o1 = r.normal(size=4)
        runs.append(run(t0, t1, {"o": o0}, {"o": o1}))
        scaled.append(run(a * t0 + b, a * t1 + b, {"o": a * o0 + b}, {"o": a * o1 + b}))
    std = {"t": 1.3, "o": 0.7}
    rs = M.EvalRun(runs, {k: (np.zeros(1), np.array([s])) for k, s in std.items()})
    ss = M.EvalRun(scaled, {k: (np.full(1, b), np.array([a * s])) for k, s in std.items()})
    for x, y in zip(M.ad_points(rs, "t"), M.ad_points(ss, "t")):
        np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-12)


def test_binning():
    xs = np.array([0.0, 0.1, 0.9, 1.0])
    ads = np.array([1.0, 3.0, 5.0, 7.0])
    curve = M.bin_curve(xs, ads, [0.0, 0.5, 1.0])
    assert curve.bins == [(0.25, 2.0, 2), (0.75, 6.0, 2)]
    sparse = M.bin_curve(xs, ads, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert [b[0] for b in sparse.bins] == [0.125, 0.875]  # empty bins dropped
    assert M.bin_curve(np.array([2.0]), np.array([1.0]), [0.0, 1.0]).bins == []


def test_uniform_edges_degenerate():
    np.testing.assert_allclose(M.uniform_edges([3.0, 3.0], 2), [2.5, 3.0, 3.5])


def test_shared_edges_and_compare():
    a = M.EvalRun([run(0.0, 1.0), run(0.0, 2.0)], unit_stats("t", "o"))
    b = M.EvalRun([run(0.0, 3.0, {"o": 0.0}, {"o": 1.0})], unit_stats("t", "o"))
    edges = M.shared_edges([a, b], "t", n_bins=2)
    np.testing.assert_allclose(edges, [1.0, 2.0, 3.0])
    ca = M.attribute_dependency(a, "t", edges)
    cb = M.attribute_dependency(b, "t", edges)
    # x = 2.0 sits on an edge and falls in the upper bin
    assert M.compare_curves(ca, cb) == [(2.5, 0.0, 1.0)]
    assert ca.bins[0] == (1.5, 0.0, 1)
    assert M.compare_curves(cb, cb) == [(2.5, 1.0, 1.0)]


def test_csv_export():
    curve = M.AdCurve([(0.5, 0.25, 3), (1.5, 0.125, 1)], [0.0, 1.0, 2.0])
    rows = list(csv.reader(io.StringIO(curve.to_csv())))
    assert rows[0] == ["x_center", "mean_ad", "count"]
    assert [float(v) for v in rows[1][:2]] == [0.5, 0.25] and rows[2][2] == "1"


def test_scatter_passthrough():
    rs = M.EvalRun([run(-1.0, 1.0, {"o": 0.5}, {"o": 0.75}),
                    run(0.0, 0.0, {"o": 0.0}, {"o": 2.0})])
    pairs = M.logit_scatter(rs, "t", "o")
    assert pairs == [((-1.0, 0.5), (1.0, 0.75)), ((0.0, 0.0), (0.0, 2.0))]
    assert M.scatter_slopes(pairs) == [0.125]


def test_score_trajectories_recorded_and_rescored():
    t = K.Trajectory([np.zeros(2), np.ones(2)],
                     [{"t": np.array([-1.0]), "o": np.array([0.0])},
                      {"t": np.array([1.0]), "o": np.array([0.0])}],
                     K.StopReason.BOUNDARY_CROSSED, "t", 0)
    rec = M.score_trajectories([t], "classifier")
    assert rec.runs[0].end["t"][0] == 1.0 and rec.runs[0].stop_reason == "boundary_crossed"
    res = M.score_trajectories([t], "oracle", lambda z: {"t": z.sum(), "o": 0.0})
    assert res.runs[0].end["t"][0] == 2.0 and res.scorer == "oracle"


def test_bank_statistics_population_std():
    stats = M.bank_statistics({"t": [1.0, 3.0], "c": [[0.0, 1.0], [2.0, 1.0]]})
    assert stats["t"][0][0] == 2.0 and stats["t"][1][0] == 1.0
    np.testing.assert_array_equal(stats["c"][1], [1.0, 0.0])


def test_report_is_json():
    rs = M.EvalRun([run(-1.0, 1.0), run(-1.0, 2.0, {"o": 0.0}, {"o": 1.0})],
                   unit_stats("t", "o"))
    rep = json.loads(M.dumps_report(M.metrics_report(rs, ["t", "o"], 4, ("t", "o"))))
    assert rep["accuracy"] == {"t": 0.5}
    assert set(rep["ad_curves"]) == {"t"} and len(rep["scatter"]) == 2
    assert rep["ad_curves_signed"]["t"]["edges"] == rep["ad_curves"]["t"]["edges"]

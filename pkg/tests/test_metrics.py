import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ndtslam.metrics import (SUMMARY_COLUMNS, EnuPose, EpochError, MetricsError,
                             append_summary, epoch_error, epoch_errors, error_gradient,
                             join_nearest, project_heading, read_summary, read_trajectory,
                             reliability_coverage, run_duration, summarize_run, summary_row,
                             write_trajectory)
from ndtslam.uncertainty import UncertaintyCoefficients

# (mean error m, drive duration s, published gradient m/s), 2D then 3D per table
PUBLISHED = [
    (6.64, 395, 0.017), (9.69, 395, 0.024),
    (11.21, 400, 0.028), (11.99, 400, 0.030),
    (11.54, 124, 0.094), (14.85, 124, 0.121),
    (14.02, 124, 0.114), (23.22, 124, 0.189),
    (1.44, 64, 0.023), (1.58, 64, 0.025),
    (1.54, 64, 0.024), (1.91, 64, 0.029),
]


@pytest.mark.parametrize("mean,duration,expected", PUBLISHED)
def test_published_gradients(mean, duration, expected):
    assert abs(error_gradient(mean, duration) - expected) <= 0.002


@pytest.mark.parametrize("duration", [0.0, -1.0, math.nan, math.inf])
def test_gradient_rejects_bad_duration(duration):
    with pytest.raises(MetricsError, match="invalid duration"):
        error_gradient(1.0, duration)


def test_project_heading_examples():
    # heading 0 = north: an east offset is purely lateral
    assert project_heading(1.0, 0.0, 0.0) == pytest.approx((1.0, 0.0))
    assert project_heading(0.0, 1.0, 0.0) == pytest.approx((0.0, 1.0))
    # heading east: the same east offset is now longitudinal
    lat, lon = project_heading(1.0, 0.0, math.pi / 2)
    assert (lat, lon) == pytest.approx((0.0, 1.0), abs=1e-12)


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-10, 10))
def test_projection_preserves_norm(de, dn, h):
    lat, lon = project_heading(de, dn, h)
    assert math.hypot(lat, lon) == pytest.approx(math.hypot(de, dn), rel=1e-9, abs=1e-9)


def test_epoch_error_pythagoras(rng):
    for _ in range(20):
        a = EnuPose(*rng.normal(size=3), heading=rng.uniform(-3, 3))
        b = EnuPose(*rng.normal(size=3), heading=rng.uniform(-3, 3))
        e = epoch_error(a, b)
        assert e.err3d ** 2 == pytest.approx(e.err2d ** 2 + e.altitude ** 2, rel=1e-12)
        assert e.err2d ** 2 == pytest.approx(e.lateral ** 2 + e.longitudinal ** 2, rel=1e-12)


def test_vectorized_matches_scalar(rng):
    est = np.column_stack([np.arange(10.0), rng.normal(size=(10, 4))])
    tru = np.column_stack([np.arange(10.0), rng.normal(size=(10, 4))])
    v = epoch_errors(est, tru)
    for i in range(10):
        s = epoch_error(EnuPose(*est[i, 1:]), EnuPose(*tru[i, 1:]))
        for k in ("lateral", "longitudinal", "altitude", "err2d", "err3d"):
            assert v[k][i] == pytest.approx(getattr(s, k), abs=1e-12)


def test_two_epoch_population_std():
    errs = [EpochError(0, 0, 0, 1.0, 1.0, 1.0), EpochError(0, 0, 0, 3.0, 3.0, 3.0)]
    s = summarize_run(errs, duration=2.0)
    assert s.err2d_mean == 2.0 and s.err2d_std == 1.0
    assert s.gradient2d == 1.0 and s.gradient2d_std == 0.5
    s1 = summarize_run(errs, duration=2.0, ddof=1)
    assert s1.err2d_std == pytest.approx(math.sqrt(2))
    with pytest.raises(MetricsError):
        summarize_run(errs[:1], duration=2.0, ddof=1)


def test_summarize_brute_force(rng):
    n = 37
    d = {k: rng.normal(size=n) for k in ("lateral", "longitudinal", "altitude")}
    d["err2d"] = np.hypot(d["lateral"], d["longitudinal"])
    d["err3d"] = np.hypot(d["err2d"], d["altitude"])
    d["reliability"] = rng.uniform(0, 3, n)
    s = summarize_run(d, duration=12.5)

    def mean(v):
        return sum(v) / len(v)

    def std(v):
        m = mean(v)
        return math.sqrt(sum((x - m) ** 2 for x in v) / len(v))

    lat = [abs(x) for x in d["lateral"]]
    assert s.lateral_mean == pytest.approx(mean(lat), rel=1e-12)
    assert s.lateral_std == pytest.approx(std(lat), rel=1e-12)
    assert s.err3d_mean == pytest.approx(mean(list(d["err3d"])), rel=1e-12)
    assert s.gradient3d == pytest.approx(mean(list(d["err3d"])) / 12.5, rel=1e-12)
    cov = sum(r >= e for r, e in zip(d["reliability"], d["err3d"])) / n
    assert s.coverage == pytest.approx(cov)
    assert s.epochs == n


def test_coverage_examples():
    e3 = np.array([1.0, 2.0, 3.0])
    c = reliability_coverage({"reliability": e3.copy(), "err3d": e3})
    assert (c.fraction, c.mean_gap, c.verdict) == (1.0, 0.0, "exact")
    c = reliability_coverage({"reliability": np.zeros(3), "err3d": e3})
    assert c.fraction == 0.0 and c.verdict == "underestimated"
    c = reliability_coverage({"reliability": e3 + 1, "err3d": e3})
    assert c.fraction == 1.0 and c.verdict == "overestimated"


def test_coverage_underestimated_series(rng):
    # mean reliability 5.93 m against mean 3D error 11.99 m
    e3 = 11.99 + rng.normal(0, 5.6, 400)
    rel = 5.93 + rng.normal(0, 2.87, 400)
    rel += 5.93 - rel.mean()
    e3 += 11.99 - e3.mean()
    c = reliability_coverage({"reliability": rel, "err3d": e3})
    assert c.mean_gap == pytest.approx(5.93 - 11.99)
    assert c.verdict == "underestimated"
    assert c.fraction < 0.5


def test_run_duration():
    t = np.arange(0, 64, 0.1)
    assert run_duration(t) == pytest.approx(64.0)
    with pytest.raises(MetricsError):
        run_duration([1.0])


def test_trajectory_roundtrip(tmp_path, rng):
    rows = np.column_stack([np.arange(5) * 0.1, rng.normal(size=(5, 3)), rng.uniform(-3, 3, 5)])
    p = tmp_path / "traj.csv"
    write_trajectory(p, rows, reliability=np.arange(5.0))
    tr = read_trajectory(p)
    assert np.allclose(tr.rows(), rows, atol=1e-6)
    assert np.allclose(tr.reliability, np.arange(5.0))
    write_trajectory(p, rows)
    assert read_trajectory(p).reliability is None


@pytest.mark.parametrize("text,msg", [
    ("", "empty"),
    ("t,x,y,z,h\n0,0,0,0,0\n", "expected header"),
    ("t,e,n,u,heading\n0,0,0,0\n", "expected 5 fields"),
    ("t,e,n,u,heading\n0,0,a,0,0\n", "non-numeric"),
    ("t,e,n,u,heading\n1,0,0,0,0\n1,0,0,0,0\n", "strictly increasing"),
    ("t,e,n,u,heading\n0,nan,0,0,0\n", "non-finite"),
])
def test_trajectory_rejects(tmp_path, text, msg):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(MetricsError, match=msg):
        read_trajectory(p)


def test_write_refuses_nan(tmp_path):
    with pytest.raises(MetricsError):
        write_trajectory(tmp_path / "x.csv", [[0, math.nan, 0, 0, 0]])


def test_join_nearest():
    truth = np.arange(0, 1.0, 0.1)
    est = np.array([-0.2, 0.01, 0.149, 0.52, 2.0])
    ie, it, dropped = join_nearest(est, truth, 0.05)
    assert list(ie) == [1, 2, 3] and list(it) == [0, 1, 5] and dropped == 2
    ie, it, dropped = join_nearest(est, np.array([]), 0.05)
    assert len(ie) == 0 and dropped == 5


def test_summary_append(tmp_path):
    errs = [EpochError(1, 1, 0, math.sqrt(2), math.sqrt(2), 2.0)] * 3
    s = summarize_run(errs, duration=3.0)
    row = summary_row(s, "r", "sparse", "normal", UncertaintyCoefficients())
    p = tmp_path / "results.csv"
    append_summary(p, row)
    append_summary(p, row)
    out = read_summary(p)
    assert len(out) == 2 and tuple(out[0]) == SUMMARY_COLUMNS
    assert float(out[0]["coverage"]) == 1.0 and out[0]["reliability_verdict"] == "overestimated"
    assert out[0]["std_formula"] == "population"
    bad = tmp_path / "other.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(MetricsError, match="different layout"):
        append_summary(bad, row)

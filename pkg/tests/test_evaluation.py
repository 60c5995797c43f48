import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rnf.data import Trajectory
from rnf.evaluation import (MetricReport, mse, multistep_mse, normalized_mse, persistence_forecast, persistence_mse,
                            picp, report)
from rnf.inference import Z95


def test_mse_basic():
    assert mse([1.0, 2.0], [1.0, 4.0]) == 2.0
    assert mse([[1.0, 0.0]], [[0.0, 0.0]]) == 0.5


def test_mse_valid_mask():
    assert mse([1.0, 5.0, 2.0], [1.0, 0.0, 0.0], valid=[True, False, True]) == 2.0
    with pytest.raises(ValueError):
        mse([1.0], [1.0], valid=[False])


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        mse([1.0, 2.0], [1.0])


def test_normalized_mse_fixtures():
    y = np.array([0.3, -1.2, 2.0, 0.7])
    ref = np.array([0.0, 0.1, 1.0, 1.0])
    ref_mse = mse(ref, y)
    assert normalized_mse(ref, y, ref_mse) == 1.0
    assert normalized_mse(y, y, ref_mse) == 0.0
    pred = np.array([0.5, -1.0, 1.5, 1.0])
    doubled = y + 2 * (pred - y)
    assert normalized_mse(doubled, y, ref_mse) == pytest.approx(4 * normalized_mse(pred, y, ref_mse), rel=1e-14)


def test_normalized_mse_needs_positive_reference():
    with pytest.raises(ValueError):
        normalized_mse([1.0], [1.0], 0.0)


@settings(max_examples=40, deadline=None)
@given(y=arrays(np.float64, (20,), elements=st.floats(-5, 5)),
       noise=arrays(np.float64, (20,), elements=st.floats(-1, 1)),
       k=st.floats(0.1, 10).flatmap(lambda v: st.sampled_from([v, -v])))
def test_normalized_mse_scale_free(y, noise, k):
    pred, ref = y + noise, y + 0.5
    base = normalized_mse(pred, y, mse(ref, y))
    scaled = normalized_mse(k * pred, k * y, mse(k * ref, k * y))
    assert scaled == pytest.approx(base, rel=1e-9)


def test_persistence():
    y = np.array([[1.0], [3.0], [2.0]])
    np.testing.assert_array_equal(persistence_forecast(y)[1:], [[1.0], [3.0]])
    assert np.isnan(persistence_forecast(y)[0, 0])
    traj = Trajectory(np.zeros((3, 1)), y)
    assert persistence_mse(traj) == (4.0 + 1.0) / 2


def test_persistence_skips_missing_pairs():
    traj = Trajectory(np.zeros((4, 1)), np.array([[1.0], [np.nan], [2.0], [4.0]]))
    assert persistence_mse(traj) == 4.0


def test_multistep_mse_examples():
    target = np.zeros((1, 3, 1))
    pred = np.array([[[1.0], [2.0], [3.0]]])
    assert multistep_mse(pred, target, 3) == pytest.approx((1 + 4 + 9) / 3, abs=1e-15)
    assert multistep_mse(pred, target, 3, horizon_only=True) == 9.0
    assert multistep_mse(np.zeros((4, 5, 1)), np.zeros((4, 5, 1)), 5) == 0.0


def test_multistep_tau_one_is_one_step():
    rng = np.random.default_rng(0)
    p, y = rng.standard_normal((30, 4, 2)), rng.standard_normal((30, 4, 2))
    assert multistep_mse(p, y, 1) == mse(p[:, 0], y[:, 0])


def test_multistep_errors():
    with pytest.raises(ValueError):
        multistep_mse(np.zeros((2, 3)), np.zeros((2, 3)), 0)
    with pytest.raises(ValueError):
        multistep_mse(np.zeros((2, 3)), np.zeros((2, 3)), 4)


def test_picp_fixtures():
    y = np.arange(10.0)
    assert picp(y, y - 1, y + 1) == 1.0
    lo, hi = y - 1, y + 1
    hi[4] = 3.5
    lo[4] = 3.0
    assert picp(y, lo, hi) == 0.9


def test_picp_endpoints_are_outside():
    assert picp([1.0], [1.0], [2.0]) == 0.0


def test_picp_errors():
    with pytest.raises(ValueError):
        picp([0.0], [1.0], [-1.0])
    with pytest.raises(ValueError):
        picp([0.0, 1.0], [0.0], [1.0])
    with pytest.raises(ValueError):
        picp([0.0], [-1.0], [1.0], valid=[False])


def test_picp_valid_broadcast_over_outputs():
    y = np.zeros((3, 2))
    lo, hi = -np.ones((3, 2)), np.ones((3, 2))
    hi[1] = -0.5
    assert picp(y, lo, hi, valid=[True, False, True]) == 1.0


def test_calibrated_coverage():
    rng = np.random.default_rng(11)
    n = 10 ** 5
    mu, sigma = rng.standard_normal(n), rng.uniform(0.2, 3.0, n)
    y = mu + sigma * rng.standard_normal(n)
    cover = picp(y, mu - Z95 * sigma, mu + Z95 * sigma)
    assert 0.895 <= cover <= 0.905


@settings(max_examples=40, deadline=None)
@given(y=arrays(np.int64, (15,), elements=st.integers(-24, 24)),
       lo=arrays(np.int64, (15,), elements=st.integers(-24, 0)),
       width=arrays(np.int64, (15,), elements=st.integers(1, 24)))
def test_picp_monotone_invariance(y, lo, width):
    # a 1/8 grid keeps distinct values distinct after the transforms
    y, lo = y / 8.0, lo / 8.0
    hi = lo + width / 8.0
    base = picp(y, lo, hi)
    assert 0.0 <= base <= 1.0
    assert picp(np.exp(y), np.exp(lo), np.exp(hi)) == base
    assert picp(np.arctan(y), np.arctan(lo), np.arctan(hi)) == base


def test_report_and_json():
    y = np.array([[0.0], [1.0]])
    r = report(y + 0.5, y, y - 1, y + 1, reference_mse=0.5)
    assert (r.mse, r.normalized_mse, r.picp, r.n) == (0.25, 0.5, 1.0, 2)
    assert not r.picp_degenerate
    assert json.loads(r.to_json())["mse"] == 0.25


def test_report_flags_degenerate_interval():
    y = np.array([[0.0], [1.0]])
    r = report(y, y, y, y, reference_mse=None)
    assert r.picp == 0.0 and r.picp_degenerate and r.normalized_mse is None
    assert r.to_dict()["picp_degenerate"] is True


def test_metric_report_invariants():
    with pytest.raises(ValueError):
        MetricReport(-1.0, None, None, 1, 1)
    with pytest.raises(ValueError):
        MetricReport(1.0, None, 1.5, 1, 1)

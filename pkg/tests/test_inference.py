import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rnf.cells import LstmState
from rnf.core import BeliefState, GaussianPrediction, Network, emit_gaussian, encode_step, init_model
from rnf.data import Trajectory, kalman_forecast, kalman_oracle
from rnf.evaluation import mse, multistep_mse, picp
from rnf.inference import (Z95, StepAvailability, decode, empirical_interval, filter_step, filter_trajectory,
                           gaussian_log_density, multistep_forecast, multistep_predictions, predictive_interval,
                           predictive_nll, validation_nll)
from rnf.numerics import Tensor
from rnf.training import TrainConfig


@pytest.fixture
def model():
    return init_model("rnf", 2, 1, 4, np.random.default_rng(3))


def _belief(rng, J=4, batch=None):
    shape = (J,) if batch is None else (batch, J)
    return BeliefState(LstmState(Tensor(0.5 * rng.standard_normal(shape)), Tensor(0.5 * rng.standard_normal(shape))))


def _same(a: GaussianPrediction, b: GaussianPrediction):
    for x, y in zip(a.values(), b.values()):
        assert np.array_equal(x, y)


# ---------------------------------------------------------------- routing


def test_no_data_decodes_propagation(model):
    net = Network.of(model)
    belief = _belief(np.random.default_rng(0))
    new, pred = filter_step(model, belief, StepAvailability(False, False))
    assert new.input is None and new.corr is None and new.terminal is new.prop
    _same(pred, GaussianPrediction(*emit_gaussian(net.decoder, new.prop.s).values()))


def test_full_availability_matches_training_step(model):
    net = Network.of(model)
    belief = _belief(np.random.default_rng(1))
    u, y = np.array([0.3, -0.1]), np.array([0.8])
    new, pred = filter_step(model, belief, StepAvailability(True, True), u, y)
    ref = encode_step(net.stack, belief.terminal, u, y, True, True)
    assert np.array_equal(new.terminal.s.value, ref.corr.s.value)
    _same(pred, GaussianPrediction(*emit_gaussian(net.decoder, ref.input.s).values()))


@pytest.mark.parametrize("has_u,has_y", [(False, False), (True, False), (False, True), (True, True)])
def test_routing_is_total(model, has_u, has_y):
    net = Network.of(model)
    belief = _belief(np.random.default_rng(2))
    u, y = np.array([0.3, -0.1]), np.array([0.8])
    new, pred = filter_step(model, belief, StepAvailability(has_u, has_y), u if has_u else None,
                            y if has_y else None)
    assert (new.input is not None) == has_u and (new.corr is not None) == has_y
    source = new.input if has_u else new.prop
    _same(pred, GaussianPrediction(*emit_gaussian(net.decoder, source.s).values()))
    want = new.corr if has_y else source
    assert new.terminal is want


def test_prediction_ignores_current_observation(model):
    belief = _belief(np.random.default_rng(4))
    u = np.array([0.3, -0.1])
    _, a = filter_step(model, belief, StepAvailability(True, True), u, np.array([5.0]))
    _, b = filter_step(model, belief, StepAvailability(True, True), u, np.array([-5.0]))
    _same(a, b)


def test_missing_arguments_rejected(model):
    belief = _belief(np.random.default_rng(0))
    with pytest.raises(ValueError):
        filter_step(model, belief, StepAvailability(True, False))
    with pytest.raises(ValueError):
        filter_step(model, belief, StepAvailability(False, True))


def test_batched_rows_match_single_rows(model):
    rng = np.random.default_rng(5)
    belief = _belief(rng, batch=4)
    u, y = rng.standard_normal((4, 2)), rng.standard_normal((4, 1))
    has_u, has_y = np.array([1, 0, 1, 0], bool), np.array([1, 1, 0, 0], bool)
    _, pred = filter_step(model, belief, StepAvailability(has_u, has_y), u, y)
    for r in range(4):
        row = BeliefState(LstmState(Tensor(belief.terminal.s.value[r]), Tensor(belief.terminal.c.value[r])))
        _, single = filter_step(model, row, StepAvailability(bool(has_u[r]), bool(has_y[r])), u[r], y[r])
        np.testing.assert_allclose(pred.values()[0][r], single.values()[0], rtol=0, atol=1e-15)


# ---------------------------------------------------------------- multistep


def test_multistep_tau_one_matches_filter_step(model):
    belief = _belief(np.random.default_rng(6))
    u = np.array([[0.4, 0.2]])
    known = multistep_forecast(model, belief, 1, "known_inputs", u)[0]
    _same(known, filter_step(model, belief, StepAvailability(True, False), u[0])[1])
    unknown = multistep_forecast(model, belief, 1, "unknown_inputs")[0]
    _same(unknown, filter_step(model, belief, StepAvailability(False, False))[1])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), horizon=st.integers(1, 6), known=st.booleans())
def test_multistep_equals_chained_filter_steps(seed, horizon, known):
    rng = np.random.default_rng(seed)
    m = init_model("rnf", 2, 1, 3, rng)
    belief = _belief(rng, J=3)
    future = rng.standard_normal((horizon, 2))
    mode = "known_inputs" if known else "unknown_inputs"
    preds = multistep_forecast(m, belief, horizon, mode, future if known else None)
    for k in range(horizon):
        belief, ref = filter_step(m, belief, StepAvailability(known, False), future[k] if known else None)
        _same(preds[k], ref)


def test_multistep_argument_errors(model):
    belief = _belief(np.random.default_rng(0))
    with pytest.raises(ValueError):
        multistep_forecast(model, belief, 0)
    with pytest.raises(ValueError):
        multistep_forecast(model, belief, 2, "oracle")
    with pytest.raises(ValueError):
        multistep_forecast(model, belief, 3, "known_inputs", np.zeros((2, 2)))


def test_multistep_predictions_match_per_origin_forecasts(model):
    rng = np.random.default_rng(7)
    traj = Trajectory(rng.standard_normal((12, 2)), rng.standard_normal((12, 1)))
    fo = filter_trajectory(model, traj)
    out = multistep_predictions(model, traj, 3, "known_inputs", fo, chunk=4)
    assert out.mean.shape == (9, 3, 1)
    for i, t in enumerate(out.origins):
        belief = BeliefState(LstmState(Tensor(fo.terminal_s[t]), Tensor(fo.terminal_c[t])))
        preds = multistep_forecast(model, belief, 3, "known_inputs", traj.u[t + 1:t + 4])
        for k in range(3):
            np.testing.assert_allclose(out.mean[i, k], preds[k].values()[0], rtol=0, atol=1e-14)
        np.testing.assert_array_equal(out.target[i], traj.y[t + 1:t + 4])


# ---------------------------------------------------------------- intervals


def test_standard_normal_interval():
    lo, hi = predictive_interval(GaussianPrediction(np.zeros(1), np.ones(1)))
    assert lo[0] == -1.644854 or abs(lo[0] + 1.644854) < 1e-6
    assert hi[0] == Z95 and lo[0] == -Z95


def test_interval_other_level():
    lo, hi = predictive_interval(GaussianPrediction(np.zeros(1), np.ones(1)), level=0.5)
    assert hi[0] == pytest.approx(0.6744897501960817, abs=1e-12)


def test_interval_collapses():
    lo, hi = predictive_interval(GaussianPrediction(np.array([2.0]), np.array([0.0])))
    assert lo[0] == hi[0] == 2.0


def test_interval_level_range():
    with pytest.raises(ValueError):
        predictive_interval(GaussianPrediction(np.zeros(1), np.ones(1)), level=1.0)


@settings(max_examples=40, deadline=None)
@given(mu=st.floats(-100, 100), sigma=st.floats(1e-6, 100))
def test_interval_ordering(mu, sigma):
    lo, hi = predictive_interval(GaussianPrediction(np.array([mu]), np.array([sigma])))
    assert lo[0] < hi[0]


def test_empirical_interval_converges():
    rng = np.random.default_rng(8)
    mu = np.array([0.0, 3.0])
    sd = np.array([1.0, 0.5])
    pred = GaussianPrediction(mu, sd, (np.tile(mu, (10 ** 5, 1)), np.tile(sd, (10 ** 5, 1))))
    lo, hi = predictive_interval(pred, rng=rng)
    np.testing.assert_allclose(hi - mu, Z95 * sd, rtol=0.01)
    np.testing.assert_allclose(mu - lo, Z95 * sd, rtol=0.01)


def test_empirical_interval_needs_rng():
    pred = GaussianPrediction(np.zeros(1), np.ones(1), (np.zeros((3, 1)), np.ones((3, 1))))
    with pytest.raises(ValueError):
        predictive_interval(pred)


def test_empirical_interval_percentiles():
    draws = np.arange(101.0)[:, None]
    lo, hi = empirical_interval(draws)
    assert (lo[0], hi[0]) == (pytest.approx(5.0, abs=1e-12), pytest.approx(95.0, abs=1e-12))


# ---------------------------------------------------------------- variational decode


def test_variational_decode_mixture_moments():
    m = init_model("vrnf-nn", 1, 1, 3, np.random.default_rng(2))
    net = Network.of(m)
    s = Tensor(np.array([0.2, -0.4, 0.1]))
    pred = decode(net, s, samples=200, rng=np.random.default_rng(0))
    mu_l, sd_l = pred.components
    assert mu_l.shape == (200, 1)
    mean, sigma = pred.values()
    np.testing.assert_allclose(mean, mu_l.mean(axis=0), rtol=1e-14)
    np.testing.assert_allclose(sigma ** 2, (sd_l ** 2 + mu_l ** 2).mean(axis=0) - mean ** 2, rtol=1e-10)
    with pytest.raises(ValueError):
        decode(net, s, samples=5)


def test_variational_filter_is_seeded():
    m = init_model("vrnf-kf", 1, 1, 3, np.random.default_rng(2))
    rng = np.random.default_rng(1)
    traj = Trajectory(rng.standard_normal((20, 1)), rng.standard_normal((20, 1)))
    a, b = filter_trajectory(m, traj, 10, seed=4), filter_trajectory(m, traj, 10, seed=4)
    assert np.array_equal(a.lo, b.lo) and a.components[0].shape == (20, 10, 1)
    nll, n = predictive_nll(m, traj, 10, seed=4)
    assert n == 20 and math.isfinite(nll)


# ---------------------------------------------------------------- whole sequences


def test_gaussian_log_density():
    assert gaussian_log_density(np.zeros(1), np.zeros(1), np.ones(1)) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_predictive_nll_counts_observed_targets(model):
    rng = np.random.default_rng(9)
    y = rng.standard_normal((15, 1))
    y[[2, 7]] = np.nan
    traj = Trajectory(rng.standard_normal((15, 2)), y)
    fo = filter_trajectory(model, traj)
    nll, n = predictive_nll(model, traj)
    ok = traj.obs_mask
    assert n == 13
    assert nll == pytest.approx(-gaussian_log_density(traj.y[ok], fo.mean[ok], fo.sigma[ok]).sum(), rel=1e-14)


def test_validation_nll_is_mean_per_target(model):
    rng = np.random.default_rng(10)
    trajs = [Trajectory(rng.standard_normal((n, 2)), rng.standard_normal((n, 1))) for n in (8, 12)]
    totals = [predictive_nll(model, t) for t in trajs]
    want = sum(t for t, _ in totals) / sum(n for _, n in totals)
    assert validation_nll(model, trajs, TrainConfig()) == pytest.approx(want, rel=1e-14)


def test_validation_nll_diverged_filter_is_inf():
    m = init_model("rnf", 1, 1, 2, np.random.default_rng(0))
    # open gates and a recurrent candidate gain of 10 make the cell grow geometrically
    for stage in ("prop", "input", "corr"):
        m.params[f"{stage}.b"] = np.r_[np.full(6, 40.0), np.ones(2)]
        m.params[f"{stage}.W_h"] = np.zeros((2, 8))
        m.params[f"{stage}.W_h"][:, 6:] = 10 * np.eye(2)
    traj = Trajectory(np.zeros((400, 1)), np.zeros((400, 1)))
    assert validation_nll(m, [traj], TrainConfig()) == math.inf


# ---------------------------------------------------------------- trained on LGSSM


@pytest.mark.slow
def test_filtered_predictions_track_kalman_oracle(lgssm, lgssm_models):
    model = lgssm_models["full"].model
    fo = filter_trajectory(model, lgssm.test)
    oracle = kalman_oracle(lgssm.spec, lgssm.test, "known")
    ratio = mse(fo.mean, lgssm.test.y) / mse(oracle.pred_mean, lgssm.test.y)
    assert ratio <= 1.10
    assert 0.85 <= picp(lgssm.test.y, fo.lo, fo.hi) <= 0.95


@pytest.mark.slow
def test_propagation_prediction_tracks_marginalised_oracle(lgssm, lgssm_models):
    # s~' after step t-1 predicts y_t without u_t; compare with the exact filter that integrates u_t out
    model = lgssm_models["full"].model
    test = lgssm.test
    out = multistep_predictions(model, test, 1, "unknown_inputs")
    oracle = kalman_oracle(lgssm.spec, test, "known")
    idx = out.origins
    ref, _ = kalman_forecast(lgssm.spec, oracle.filtered_mean[idx], oracle.filtered_cov[idx], 1)
    model_mse = multistep_mse(out.mean, out.target, 1)
    oracle_mse = multistep_mse(ref, out.target, 1)
    assert model_mse <= 1.15 * oracle_mse


@pytest.mark.slow
def test_known_inputs_help_multistep(lgssm, lgssm_models):
    model = lgssm_models["skip"].model
    fo = filter_trajectory(model, lgssm.test)
    unknown = multistep_predictions(model, lgssm.test, 5, "unknown_inputs", fo)
    known = multistep_predictions(model, lgssm.test, 5, "known_inputs", fo)
    assert multistep_mse(known.mean, known.target, 5) <= multistep_mse(unknown.mean, unknown.target, 5)

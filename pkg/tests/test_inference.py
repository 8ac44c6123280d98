import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from routetime.inference import (
    PathTimes,
    evaluate,
    heldout_loglik,
    mode_grid,
    mode_of,
    path_times,
    predict,
    predict_geomean,
    predict_mean,
    predict_mode,
    rmsle,
)
from routetime.mixture import JointModel, Observation, SmsleDensity
from routetime.network import project_turns, synthetic_grid
from routetime.route_choice import ChoiceParams, UnreachableError, path_loglik

from conftest import tt_params


def model_on(turns, T, gamma=1.0, b_tt=-1.0):
    return JointModel(turns, np.asarray(T, dtype=float), tt_params(b_tt), SmsleDensity(gamma))


class TestGeomean:
    def test_single_path(self, chain):
        net, turns = chain
        assert predict_geomean(0, 2, model_on(turns, [1.0, 2.0])) == pytest.approx(3.0, abs=1e-12)

    def test_diamond(self, diamond):
        net, turns = diamond
        # zero travel-time weight makes both routes equally likely
        model = model_on(turns, [0.5, 2.0, 0.5, 2.0], b_tt=0.0)
        assert predict_geomean(0, 3, model) == pytest.approx(2.0, abs=1e-12)

    def test_sampled_matches_enumeration(self, dag3):
        net, turns = dag3
        model = model_on(turns, np.linspace(0.4, 1.6, net.n_arcs), b_tt=-1.3)
        exact = path_times(0, 8, model)
        assert exact.exact
        K = 100_000
        sampled = path_times(0, 8, model, K=K, rng=3, enumerate_limit=0)
        assert not sampled.exact and sampled.n == K
        lt = np.log(exact.times)
        mean = exact.weights @ lt
        sd = math.sqrt(exact.weights @ (lt - mean) ** 2)
        got = math.log(predict_geomean(0, 8, model, times=sampled))
        assert abs(got - mean) < 3 * sd / math.sqrt(K)

    def test_unreachable(self, chain):
        net, turns = chain
        with pytest.raises(UnreachableError):
            predict_geomean(2, 0, model_on(turns, [1.0, 1.0]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.1, 100.0), min_size=1, max_size=40))
    def test_minimizes_msle(self, ts):
        ts = np.array(ts)
        pt = PathTimes(ts, np.zeros(len(ts)), False)
        g = predict_geomean(0, 1, JointModel(None, None, None), times=pt)
        loss = np.mean(np.log(ts / g) ** 2)
        grid = np.exp(np.linspace(np.log(0.05), np.log(200.0), 2001))
        grid_loss = np.mean(np.log(ts[None, :] / grid[:, None]) ** 2, axis=1)
        assert loss <= grid_loss.min() + 1e-12


class TestMean:
    def test_two_arc(self, two_arc):
        net, turns = two_arc
        assert predict_mean(0, 1, model_on(turns, [1.0, 1.0]), noise=False) == pytest.approx(1.0, abs=1e-12)
        p = expit(-1.0)
        assert p == pytest.approx(1 / (1 + math.e))
        got = predict_mean(0, 1, model_on(turns, [2.0, 1.0]), noise=False)
        assert got == pytest.approx(2 * p + (1 - p), abs=1e-12)
        assert got == pytest.approx(1.2689, abs=1e-4)

    def test_single_path_multiplier(self, chain):
        net, turns = chain
        model = model_on(turns, [1.0, 2.0], gamma=2.0)
        assert predict_mean(0, 2, model) == pytest.approx(3.0 * math.exp(1 / 8), rel=1e-12)


class TestMode:
    @pytest.mark.parametrize("gamma", [0.5, 1.0, 5.0])
    def test_single_path(self, chain, gamma):
        net, turns = chain
        model = model_on(turns, [1.0, 2.0], gamma=gamma)
        want = 3.0 * math.exp(-1 / (2 * gamma))
        got = predict_mode(0, 2, model)
        assert abs(got - want) <= 0.01 * want

    def test_taller_component(self, diamond):
        net, turns = diamond
        model = model_on(turns, [0.5, 5.0, 0.5, 5.0], gamma=4.0, b_tt=0.0)
        dens = SmsleDensity(4.0)
        got = predict_mode(0, 3, model)
        # equal weights: the narrower (shorter) component has the higher peak
        assert got == pytest.approx(1.0 * dens.mode_multiplier, rel=1e-3)

    def test_single_sample_grid(self):
        pt = PathTimes(np.array([2.0]), np.zeros(1), False)
        dens = SmsleDensity(1.0)
        grid, h = mode_grid(pt, dens)
        m = 2.0 * dens.mode_multiplier
        assert grid.min() <= m <= grid.max()
        assert h == pytest.approx(0.01 * m)
        assert mode_of(pt, dens) == pytest.approx(m, rel=1e-8)

    def test_grid_cap(self):
        ts = np.geomspace(0.5, 500.0, 200)
        pt = PathTimes(ts, np.zeros(len(ts)), False)
        dens = SmsleDensity(1.0)
        grid, h = mode_grid(pt, dens, spacing=0.01, cap=64)
        assert len(grid) <= 64
        assert h >= 0.01 * np.median(ts * dens.mode_multiplier)
        assert np.all(np.diff(grid) > 0)


class TestRmsle:
    def test_examples(self):
        assert rmsle([1.0, 2.0], [1.0, 2.0]) == 0.0
        t = np.array([0.5, 3.0, 7.0])
        assert rmsle(math.e * t, t) == pytest.approx(1.0, abs=1e-12)
        assert rmsle([1.0, 2.0], [2.0, 1.0]) == pytest.approx(math.log(2), abs=1e-12)
        assert rmsle([1.0, 2.0], [2.0, 1.0]) == pytest.approx(0.6931, abs=1e-4)

    @pytest.mark.parametrize("p,t", [([0.0], [1.0]), ([1.0], [-1.0]), ([1.0, 2.0], [1.0]), ([], [])])
    def test_invalid(self, p, t):
        with pytest.raises(ValueError):
            rmsle(p, t)


@pytest.fixture(scope="module")
def grid_case():
    net, T = synthetic_grid(4, 4)
    turns = project_turns(net)
    model = JointModel(turns, T, ChoiceParams.synthetic(-2.0, -2.0), SmsleDensity(1.0))
    rng = np.random.default_rng(0)
    obs = []
    for _ in range(60):
        o, d = rng.choice(16, 2, replace=False)
        obs.append(Observation(int(o), int(d), float(rng.uniform(1, 10))))
    return model, obs


class TestEvaluate:
    def test_order_invariant(self, grid_case):
        model, obs = grid_case
        a = evaluate(model, obs, K=50, rng=4)
        b = evaluate(model, obs[::-1], K=50, rng=4)
        assert a.scores == b.scores
        pa = predict([(ob.o, ob.d) for ob in obs], model, K=50, seed=1)
        pb = predict([(ob.o, ob.d) for ob in obs[::-1]], model, K=50, seed=1)
        assert pa == pb[::-1]

    def test_report(self, grid_case, tmp_path):
        model, obs = grid_case
        rep = evaluate(model, obs, K=30, rng=0)
        assert set(rep.scores) == {"geomean", "mode", "mean"}
        assert rep.rmsle == rep.scores["geomean"]
        rep.write_csv(tmp_path / "r.csv")
        text = (tmp_path / "r.csv").read_text()
        assert text.startswith("o,d,t_observed,pred_geomean")
        assert "# rmsle_geomean," in text

    def test_requires_times(self, grid_case):
        model, _ = grid_case
        with pytest.raises(ValueError):
            evaluate(model, [Observation(0, 5)])

    def test_heldout_loglik(self, diamond):
        net, turns = diamond
        model = model_on(turns, np.ones(4))
        obs = [Observation(0, 3, 2.0, (0, 1, 3)), Observation(0, 3, None, (0, 2, 3), weight=3.0)]
        assert heldout_loglik(model, obs) == pytest.approx(math.log(0.5), abs=1e-12)
        sol = model.solve([3])
        assert heldout_loglik(model, obs[:1]) == pytest.approx(path_loglik(sol, [0, 2]), abs=1e-12)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats
from scipy.special import expit

from routetime.mixture import (
    JointModel,
    Observation,
    ObservationError,
    ODDistributions,
    PathProposal,
    SmsleDensity,
    batch_loglik,
    dest_posterior,
    grad_offline,
    grad_online,
    loglik_full,
    loglik_no_path,
    loglik_no_time,
    loss_to_logpdf,
    mixed_loglik,
    partition_smsle,
    prepare,
    smsle_logpdf,
)
from routetime.network import project_turns
from routetime.route_choice import UnreachableError

from conftest import dag_grid, tt_params


def model_on(turns, T, gamma=1.0, b_tt=-1.0, od=None):
    return JointModel(turns, np.asarray(T, dtype=float), tt_params(b_tt), SmsleDensity(gamma), od)


class TestObservation:
    def test_kinds(self):
        assert Observation(0, 3, 2.0, (0, 1, 3)).kind == "full"
        assert Observation(0, 3, None, (0, 1, 3)).kind == "path"
        assert Observation(0, 3, 2.0).kind == "no_path"
        assert Observation(0, None, 2.0).kind == "no_destination"
        assert Observation(0, 3).kind == "od"
        assert Observation(0, r=(0, 1)).d == 1

    @pytest.mark.parametrize("kw", [dict(o=0, d=3, t=0.0), dict(o=0, d=3, t=-1.0), dict(o=0),
                                    dict(o=0, d=3, r=(1, 3)), dict(o=0, d=2, r=(0, 1, 3)),
                                    dict(o=0, d=0, t=1.0), dict(o=0, d=1, weight=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ObservationError):
            Observation(**kw)

    def test_prepare_reports_index(self, diamond):
        net, turns = diamond
        obs = [Observation(0, 3, 1.0), Observation(0, 3, 1.0, (0, 1, 2, 3))]
        with pytest.raises(ObservationError, match="observation 1"):
            prepare(turns, obs)


class TestOD:
    def test_conditionals_sum_to_one(self):
        obs = [Observation(0, 1), Observation(0, 2), Observation(0, 2, weight=2.0), Observation(3, 1)]
        od = ODDistributions.from_observations(obs)
        assert sum(od.p_o.values()) == pytest.approx(1.0)
        for inner in od.p_d.values():
            assert sum(inner.values()) == pytest.approx(1.0)
        assert od.p_d[0][2] == pytest.approx(0.75)
        assert od.log_p_d(3, 2) == -math.inf


class TestSmsle:
    def test_examples(self):
        assert smsle_logpdf(1.0, 1.0, math.pi) == pytest.approx(0.0, abs=1e-15)
        assert smsle_logpdf(1.0, 1.0, 1.0) == pytest.approx(-0.572365, abs=1e-6)
        assert partition_smsle(math.pi) == pytest.approx(1.0)
        assert partition_smsle(1.0) == pytest.approx(1.772454, abs=1e-6)

    @pytest.mark.parametrize("bad", [(0.0, 1.0, 1.0), (1.0, 0.0, 1.0), (1.0, 1.0, 0.0), (-1.0, 1.0, 1.0)])
    def test_nonpositive(self, bad):
        with pytest.raises(ValueError):
            smsle_logpdf(*bad)
        with pytest.raises(ValueError):
            partition_smsle(-1.0)

    @pytest.mark.parametrize("gamma", [0.5, 1.0, 4.0])
    def test_normalized(self, gamma):
        val = integrate.quad(lambda u: math.exp(smsle_logpdf(math.exp(u), 2.0, gamma) + u),
                             math.log(2.0) - 40, math.log(2.0) + 40, epsabs=1e-12, points=[math.log(2.0)])[0]
        assert val == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("theta", [0.5, 3.0])
    @pytest.mark.parametrize("gamma", [0.3, 1.0, 7.0])
    def test_partition_theta_free(self, theta, gamma):
        val = integrate.quad(lambda x: math.exp(-gamma * math.log(x / theta) ** 2 - math.log(x)),
                             0, theta, epsabs=1e-12)[0]
        val += integrate.quad(lambda x: math.exp(-gamma * math.log(x / theta) ** 2 - math.log(x)),
                              theta, np.inf, epsabs=1e-12)[0]
        assert val == pytest.approx(partition_smsle(gamma), abs=1e-6)

    def test_is_lognormal(self):
        gamma = 2.5
        t = np.linspace(0.1, 8, 50)
        want = stats.lognorm(s=1 / math.sqrt(2 * gamma), scale=1.7).logpdf(t)
        assert np.allclose(smsle_logpdf(t, 1.7, gamma), want, atol=1e-12)

    def test_derivative(self):
        dens = SmsleDensity(1.3)
        h = 1e-6
        for t, th in [(2.0, 1.0), (0.7, 3.0)]:
            fd = (dens.logpdf(t, th + h) - dens.logpdf(t, th - h)) / (2 * h)
            assert dens.dlogpdf_dtheta(t, th) == pytest.approx(fd, rel=1e-6)

    def test_moments(self):
        dens = SmsleDensity(0.8)
        th = 2.0
        mean = integrate.quad(lambda x: x * math.exp(dens.logpdf(x, th)), 0, np.inf)[0]
        assert mean == pytest.approx(th * dens.mean_multiplier, rel=1e-7)
        grid = np.linspace(0.05, 4, 400_001)
        mode = grid[np.argmax(dens.logpdf(grid, th))]
        assert mode == pytest.approx(th * dens.mode_multiplier, abs=1e-4)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.05, 50.0), min_size=1, max_size=30), st.floats(0.1, 10.0))
    def test_same_argmin_as_msle(self, ts, gamma):
        ts = np.array(ts)
        grid = np.exp(np.linspace(np.log(0.04), np.log(60.0), 3001))
        smsle = np.array([-smsle_logpdf(ts, g, gamma).mean() for g in grid])
        msle = np.array([(np.log(ts / g) ** 2).mean() for g in grid])
        assert abs(np.argmin(smsle) - np.argmin(msle)) <= 1


class TestLossDensity:
    def test_mse_is_normal(self):
        dens = loss_to_logpdf("mse", theta=1.5)
        assert dens.partition == pytest.approx(math.sqrt(math.pi), rel=1e-9)
        x = np.linspace(-2, 4, 31)
        assert np.allclose(dens.logpdf(x), stats.norm(1.5, math.sqrt(0.5)).logpdf(x), atol=1e-9)
        assert dens.partition_is_constant([0.0, 5.0])

    def test_linex_is_gumbel(self):
        dens = loss_to_logpdf("linex", theta=0.0)
        assert dens.partition == pytest.approx(math.e, rel=1e-9)
        x = np.linspace(-4, 2, 31)
        assert np.allclose(dens.pdf(x), stats.gumbel_l.pdf(x), atol=1e-9)
        assert dens.partition_is_constant([-1.0, 2.0])
        assert integrate.quad(dens.pdf, -np.inf, np.inf)[0] == pytest.approx(1.0, abs=1e-7)

    def test_msle_not_constant(self):
        dens = loss_to_logpdf("msle", domain=(0.0, np.inf), theta=1.0)
        assert dens.partition_at(1.0) == pytest.approx(math.sqrt(math.pi) * math.exp(0.25), rel=1e-7)
        assert not dens.partition_is_constant([0.5, 3.0])
        assert np.all(dens.logpdf(np.array([-1.0, 0.0])) == -np.inf)

    def test_divergent(self):
        with pytest.raises(ValueError, match="diverges"):
            loss_to_logpdf(lambda x, th: 0.0 * x, theta=0.0)


class TestFullAndNoTime:
    def test_diamond(self, diamond):
        net, turns = diamond
        od = ODDistributions.uniform(net.n_nodes)
        model = model_on(turns, np.ones(4), gamma=math.pi, od=od)
        ob = Observation(0, 3, 2.0, (0, 1, 3))
        want = od.log_p_o(0) + od.log_p_d(0, 3) + math.log(0.25)
        assert loglik_full(ob, model) == pytest.approx(want, abs=1e-12)
        assert loglik_no_time(ob, model) == pytest.approx(want - math.log(0.5), abs=1e-12)

    def test_chain(self, chain):
        net, turns = chain
        od = ODDistributions.uniform(net.n_nodes)
        model = model_on(turns, [1.0, 2.0], od=od)
        ob = Observation(0, 2, 3.0, (0, 1, 2))
        od_part = od.log_p_o(0) + od.log_p_d(0, 2)
        assert loglik_full(ob, model) == pytest.approx(od_part + smsle_logpdf(3.0, 3.0, 1.0), abs=1e-12)
        assert loglik_no_time(ob, model) == pytest.approx(od_part, abs=1e-12)

    def test_marginal_over_time(self):
        net = dag_grid()
        turns = project_turns(net)
        model = model_on(turns, np.linspace(0.5, 1.5, net.n_arcs), gamma=0.7, b_tt=-1.2)
        r = (0, 1, 4, 5, 8)
        marg = integrate.quad(lambda u: math.exp(loglik_full(Observation(0, 8, math.exp(u), r), model) + u),
                              -10, 10, epsabs=1e-12, points=[math.log(4.0)])[0]
        assert marg == pytest.approx(math.exp(loglik_no_time(Observation(0, 8, None, r), model)), abs=1e-6)


class TestNoPath:
    def test_single_path_exact(self, chain):
        net, turns = chain
        model = model_on(turns, [1.0, 2.0])
        ob = Observation(0, 2, 2.5)
        want = loglik_full(Observation(0, 2, 2.5, (0, 1, 2)), model)
        assert loglik_no_path(ob, model, K=3, rng=0) == pytest.approx(want, abs=1e-12)

    def test_two_arc_closed_form(self, two_arc):
        net, turns = two_arc
        x = 0.5
        model = model_on(turns, [x, 1.0])
        p = expit(1 - x)
        want = math.log(p * math.exp(smsle_logpdf(2.0, x, 1.0)) + (1 - p) * math.exp(smsle_logpdf(2.0, 1.0, 1.0)))
        assert loglik_no_path(Observation(0, 1, 2.0), model, exact=True) == pytest.approx(want, abs=1e-12)
        # at x = 1 both arcs give the same density
        m1 = model_on(turns, [1.0, 1.0])
        assert loglik_no_path(Observation(0, 1, 2.0), m1, exact=True) == pytest.approx(
            smsle_logpdf(2.0, 1.0, 1.0), abs=1e-12)

    def test_monte_carlo_converges(self, diamond):
        net, turns = diamond
        model = model_on(turns, [1.0, 1.6, 1.0, 1.0], gamma=2.0)
        ob = Observation(0, 3, 2.3)
        exact = loglik_no_path(ob, model, exact=True)
        # standard error of ln(mean f) from the exact two-path distribution
        p1 = math.exp(loglik_no_time(Observation(0, 3, None, (0, 1, 3)), model))
        f = np.exp(smsle_logpdf(2.3, np.array([2.0, 2.6]), 2.0))
        mean = p1 * f[0] + (1 - p1) * f[1]
        sd = math.sqrt(p1 * f[0] ** 2 + (1 - p1) * f[1] ** 2 - mean ** 2)
        K = 10_000
        se = sd / mean / math.sqrt(K)
        est = loglik_no_path(ob, model, K=K, rng=7)
        assert abs(est - exact) < 3 * se

    def test_trapped(self, chain):
        net, turns = chain
        model = JointModel(turns, np.ones(2), tt_params(), max_steps=1)
        with pytest.raises(Exception, match="trapped|rejected|exceeded"):
            loglik_no_path(Observation(0, 2, 2.0), model, K=4, rng=0)


class TestDestPosterior:
    def test_single_candidate(self, diamond):
        net, turns = diamond
        post = dest_posterior(Observation(0, None, 1.0), model_on(turns, np.ones(4)), candidates=[3], K=10, rng=0)
        assert post.tolist() == [1.0]

    def test_sharp_match(self, chain):
        net, turns = chain
        model = model_on(turns, [1.0, 2.0], gamma=100.0)
        post = dest_posterior(Observation(0, None, 1.0), model, candidates=[1, 2], K=10, rng=0)
        assert post[0] > 1 - 1e-12
        assert post.sum() == pytest.approx(1.0, abs=1e-12)

    def test_mirror(self, diamond):
        net, turns = diamond
        post = dest_posterior(Observation(0, None, 1.2), model_on(turns, np.ones(4)), candidates=[1, 2], K=10, rng=0)
        assert np.allclose(post, 0.5, atol=1e-12)

    def test_unreachable(self, diamond):
        net, turns = diamond
        with pytest.raises(UnreachableError):
            dest_posterior(Observation(3, None, 1.0), model_on(turns, np.ones(4)), candidates=[0], K=5, rng=0)

    def test_sums_to_one(self):
        net = dag_grid()
        turns = project_turns(net)
        post = dest_posterior(Observation(0, None, 2.0), model_on(turns, np.ones(net.n_arcs)), K=50, rng=3)
        assert post.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(post > 0)


class TestMixed:
    def test_additive(self, chain):
        net, turns = chain
        model = model_on(turns, [1.0, 2.0], od=ODDistributions.uniform(3))
        full = Observation(0, 2, 3.5, (0, 1, 2))
        nopath = Observation(1, 2, 1.5)
        want = loglik_full(full, model) + loglik_no_path(nopath, model, K=5, rng=1)
        assert mixed_loglik([full, nopath], model, K=5, rng=2) == pytest.approx(want, abs=1e-12)

    def test_empty(self, chain):
        assert mixed_loglik([], model_on(chain[1], [1.0, 1.0])) == 0.0

    def test_weight(self, diamond):
        net, turns = diamond
        model = model_on(turns, [1.0, 1.3, 0.8, 1.0])
        ob = Observation(0, 3, 2.0, (0, 1, 3))
        twice = mixed_loglik([ob, ob], model)
        assert mixed_loglik([Observation(0, 3, 2.0, (0, 1, 3), weight=2.0)], model) == pytest.approx(twice, abs=1e-12)

    def test_batch_gradient_matches_fd(self):
        net = dag_grid()
        turns = project_turns(net)
        T = np.linspace(0.5, 1.5, net.n_arcs)
        obs = [Observation(0, 8, 3.1, (0, 1, 4, 5, 8)), Observation(1, 8, None, (1, 2, 5, 8)),
               Observation(3, 5, 1.4, (3, 4, 5))]
        data = prepare(turns, obs)

        def total(b, TT):
            m = JointModel(turns, TT, tt_params().with_b(b), SmsleDensity(1.5))
            return batch_loglik(m, data, K=1, grad=False).loglik.sum()

        b = np.array([-1.2, -1.2, 0.0, -0.4, -5.0])
        res = batch_loglik(JointModel(turns, T, tt_params().with_b(b), SmsleDensity(1.5)), data, K=1)
        h = 1e-6
        gT = [(total(b, T + h * e) - total(b, T - h * e)) / (2 * h) for e in np.eye(len(T))]
        gb = [(total(b + h * e, T) - total(b - h * e, T)) / (2 * h) for e in np.eye(5)]
        assert np.allclose(res.grad.T, gT, atol=1e-6)
        assert np.allclose(res.grad.b, gb, atol=1e-6)


def exact_grad(turns, T, b_tt, t, gamma, h=1e-6):
    """Gradient of E[f] by central differences of the enumerated expectation."""

    def ef(bb, TT):
        m = JointModel(turns, TT, tt_params(bb), SmsleDensity(gamma))
        return math.exp(loglik_no_path(Observation(0, 1, t), m, exact=True))

    T = np.asarray(T, dtype=float)
    gT = np.array([(ef(b_tt, T + h * e) - ef(b_tt, T - h * e)) / (2 * h) for e in np.eye(len(T))])
    gb = (ef(b_tt + h, T) - ef(b_tt - h, T)) / (2 * h)
    return gb, gT


def within_3se(est, want):
    se_b, se_T = est.stderr.b, est.stderr.T
    assert abs(est.grad.b[0] + est.grad.b[1] - want[0]) <= 3 * math.hypot(se_b[0], se_b[1]) + 1e-12
    assert np.all(np.abs(est.grad.T - want[1]) <= 3 * se_T + 1e-12)


class TestScoreGradients:
    def test_single_path(self, chain):
        net, turns = chain
        T = np.array([1.0, 2.0])
        model = model_on(turns, T, gamma=1.5)
        est = grad_online(Observation(0, 2, 2.5), model, K=20, rng=0)
        dens = SmsleDensity(1.5)
        f = math.exp(dens.logpdf(2.5, 3.0))
        assert est.expectation == pytest.approx(f, rel=1e-12)
        assert np.allclose(est.grad.T, f * dens.dlogpdf_dtheta(2.5, 3.0), rtol=1e-12)
        assert np.allclose(est.grad.b, 0.0, atol=1e-12)
        assert np.allclose(est.stderr.T, 0.0, atol=1e-12)

    def test_online_two_arc(self, two_arc):
        net, turns = two_arc
        T = np.array([0.6, 1.0])
        est = grad_online(Observation(0, 1, 1.2), model_on(turns, T), K=1_000_000, rng=11)
        within_3se(est, exact_grad(turns, T, -1.0, 1.2, 1.0))

    def test_offline_uniform_two_arc(self, two_arc):
        net, turns = two_arc
        T = np.array([0.6, 1.0])
        prop = PathProposal([[0], [1]], [0.5, 0.5])
        est = grad_offline(Observation(0, 1, 1.2), model_on(turns, T), prop, K=1_000_000, rng=12)
        within_3se(est, exact_grad(turns, T, -1.0, 1.2, 1.0))

    def test_offline_with_model_proposal(self, two_arc):
        net, turns = two_arc
        T = np.array([0.6, 1.0])
        model = model_on(turns, T)
        p = expit(1 - 0.6)
        prop = PathProposal([[0], [1]], [p, 1 - p])
        off = grad_offline(Observation(0, 1, 1.2), model, prop, K=4, rng=0, keep_samples=True)
        # with the model as proposal the importance ratio is one, so each sample
        # is the online term grad f + f grad ln P of its path
        on = grad_online(Observation(0, 1, 1.2), model, K=400, rng=0, keep_samples=True)
        rows_on = {tuple(np.round(r, 12)) for r in on.samples}
        assert all(tuple(np.round(r, 12)) in rows_on for r in off.samples)

    def test_symmetric_b(self, two_arc):
        net, turns = two_arc
        est = grad_online(Observation(0, 1, 1.5), model_on(turns, [1.0, 1.0]), K=500, rng=3)
        assert abs(est.grad.b[0]) < 1e-12

    def test_diamond_unbiased(self, diamond):
        net, turns = diamond
        T = np.array([1.0, 1.4, 1.0, 1.0])
        est = grad_online(Observation(0, 3, 2.2), model_on(turns, T), K=200_000, rng=5)

        def ef(TT):
            m = model_on(turns, TT)
            return math.exp(loglik_no_path(Observation(0, 3, 2.2), m, exact=True))

        h = 1e-6
        gT = np.array([(ef(T + h * e) - ef(T - h * e)) / (2 * h) for e in np.eye(4)])
        assert np.all(np.abs(est.grad.T - gT) <= 3 * est.stderr.T + 1e-12)
        assert est.grad_log.T == pytest.approx(est.grad.T / est.expectation, rel=1e-9)

    def test_missing_support(self, two_arc):
        net, turns = two_arc
        with pytest.raises(ValueError, match="support"):
            grad_offline(Observation(0, 1, 1.2), model_on(turns, [1.0, 1.0]), PathProposal([[0]], [1.0]), K=10)

    def test_zero_probability(self):
        with pytest.raises(ValueError, match="zero probability"):
            PathProposal([[0], [1]], [1.0, 0.0])

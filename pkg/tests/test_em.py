import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracle import em_update, enumerate_paths, posteriors, random_params
from reghmm import dp
from reghmm.dataio import simulate
from reghmm.em import (EStepStats, TrainConfig, TrainTrace, e_step, emission_counts,
                       joint_loglik, m_step_hmm, m_step_regression, predict, predict_batch,
                       train, train_two_stage)
from reghmm.errors import InvalidArgumentError
from reghmm.model import (HmmParams, Link, RegressionParams, StateSpace, SummarySpec,
                          default_initial, default_transitions, seed_emission_from_kmer,
                          tie_emissions, validate)
from reghmm.regression import link_eval, response_loglik


def _instance(seed, N=1, K=None, L=None, spec="all"):
    rng = np.random.default_rng(seed)
    K = K or int(rng.integers(1, 3))
    L = L or int(rng.integers(K + 1, 7))
    params = random_params(rng, K, L, position_dependent=bool(rng.integers(2)))
    X = rng.integers(0, 4, (N, L))
    gamma = RegressionParams(Link.LINEAR, alpha=rng.normal(), beta=rng.normal() * 2,
                             sigma=rng.uniform(0.5, 2))
    y = gamma.alpha + 2 * rng.normal(size=N)
    cfg = TrainConfig(K=K, summary=spec, link=Link.LINEAR, d_init=4096)
    return params, gamma, X, y, cfg


def _truth(K=3, L=12, entry=0.05, beta=3.0, link=Link.LINEAR, seed=0):
    space = StateSpace(K)
    E = np.full((space.n_states, 4), 0.25)
    E[1:K + 1] = seed_emission_from_kmer(["GATTACA"[:K]], K, 0.9, kmer="GATTACA"[:K])[1:K + 1]
    params = HmmParams(space, tie_emissions(E), default_transitions(L, entry),
                       default_initial(space, entry))
    gamma = RegressionParams(link, alpha=1.0, beta=beta, s=2.0, t=0.5, sigma=0.5)
    return params, gamma


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(max_iters=0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(rel_tol=1.0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(seeding="magic")

    def test_enums_from_strings(self):
        cfg = TrainConfig(summary="entering", link="linear")
        assert cfg.as_dict()["summary"] == "entering"
        assert cfg.spec.states(StateSpace(2)) == {1, 3}


class TestEStep:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_enumeration_with_response(self, seed):
        spec = ["entering", "exiting", "all"][seed % 3]
        params, g, X, y, cfg = _instance(seed, K=2, L=5, spec=spec)
        stats = e_step(X, params, g, cfg, y=y)
        states = cfg.spec.states(params.space)
        o = posteriors(params, X[0], states, lambda v: response_loglik(y[0], v, g))
        K = params.K
        np.testing.assert_allclose(stats.gamma[0], o["gamma"], atol=1e-9)
        np.testing.assert_allclose(stats.xi[0], o["xi"][:, 0, [0, 1, K + 1]], atol=1e-9)
        np.testing.assert_allclose(stats.posteriors[0], o["marg"], atol=1e-9)
        assert stats.loglik[0] == pytest.approx(o["loglik"], abs=1e-9)
        plain = posteriors(params, X[0], states)
        np.testing.assert_allclose(stats.marginal[0], plain["marg"], atol=1e-9)

    @given(st.integers(0, 10 ** 6))
    def test_rows_normalized_and_consistent(self, seed):
        params, g, X, y, cfg = _instance(seed, N=3)
        stats = e_step(X, params, g, cfg, y=y)
        np.testing.assert_allclose(stats.gamma.sum(axis=2), 1.0, atol=1e-8)
        # the three moves out of B account for all background mass before the last column
        np.testing.assert_allclose(stats.xi.sum(axis=2), stats.gamma[:, :-1, 0], atol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_flat_response_reduces_to_baum_welch(self, seed):
        params, g, X, y, cfg = _instance(seed, N=4)
        gamma, xi, llx = dp.forward_backward_batch(X, params)
        stats = e_step(X, params, g.replace(beta=0.0), cfg, y=y)
        np.testing.assert_allclose(stats.gamma, gamma, atol=1e-10)
        np.testing.assert_allclose(stats.xi, xi, atol=1e-10)
        np.testing.assert_allclose(stats.loglik_x, llx, atol=1e-10)

    def test_huge_sigma_reduces_to_baum_welch(self):
        params, g, X, y, cfg = _instance(11, N=4)
        gamma, _, _ = dp.forward_backward_batch(X, params)
        stats = e_step(X, params, g.replace(sigma=1e6), cfg, y=y)
        np.testing.assert_allclose(stats.gamma, gamma, atol=1e-6)

    def test_response_free_mode(self):
        params, g, X, y, cfg = _instance(2, N=3)
        stats = e_step(X, params, g, cfg, y=y, use_response=False)
        assert stats.posteriors.shape == (3, 0)
        assert stats.joint_loglik == pytest.approx(dp.forward_backward_batch(X, params)[2].sum())

    def test_mismatched_lengths(self):
        params, g, X, y, cfg = _instance(2, N=3)
        with pytest.raises(InvalidArgumentError):
            e_step(X, params, g, cfg, y=y[:2])


class TestMStep:
    def _stats_from_path(self, path, S, K):
        L = len(path)
        gamma = np.zeros((1, L, S))
        gamma[0, np.arange(L), path] = 1.0
        xi = np.zeros((1, L - 1, 3))
        for l in range(L - 1):
            if path[l] == 0:
                xi[0, l, {0: 0, 1: 1, K + 1: 2}[path[l + 1]]] = 1.0
        empty = np.zeros((1, 0))
        return EStepStats(gamma=gamma, xi=xi, marginal=empty, posteriors=empty,
                          loglik_x=np.zeros(1), loglik_y=np.zeros(1),
                          used_d=np.zeros(1, dtype=np.int64),
                          under_covered=np.zeros(1, dtype=np.int64))

    def test_deterministic_path_tallies(self):
        K = 2
        space = StateSpace(K)
        x = np.array([[0, 2, 3, 1, 1, 0, 3]])
        path = [0, 1, 2, 0, 3, 4, 0]
        stats = self._stats_from_path(path, space.n_states, K)
        counts = emission_counts(stats, x)
        expected = np.zeros((5, 4))
        for z, b in zip(path, x[0]):
            expected[z, b] += 1
        np.testing.assert_array_equal(counts, expected)
        cur = HmmParams(space, np.full((5, 4), 0.25), default_transitions(7), default_initial(space))
        new = m_step_hmm(stats, x, cur)
        np.testing.assert_array_equal(new.transitions[0], [0, 1, 0])
        np.testing.assert_array_equal(new.transitions[3], [0, 0, 1])
        np.testing.assert_array_equal(new.initial, [1, 0, 0, 0, 0])
        # rows with no background mass keep their previous values
        np.testing.assert_array_equal(new.transitions[1], cur.transitions[1])
        assert validate(new) == []

    def test_pooled_row_is_weighted_mean(self):
        params, _ = _truth(K=2, L=10, entry=0.08)
        data = simulate(params, RegressionParams(Link.LINEAR, 0, 0), SummarySpec("all"), 2000, 1)
        stats = e_step(data.X, params, None, TrainConfig(K=2), y=data.y, use_response=False)
        per = m_step_hmm(stats, data.X, params)
        pooled = m_step_hmm(stats, data.X, params.replace(position_dependent=False))
        feasible = slice(0, 10 - 2)
        w = stats.xi.sum(axis=(0, 2))[feasible]
        weighted = (per.transitions[feasible] * w[:, None]).sum(0) / w.sum()
        np.testing.assert_allclose(pooled.transitions[0], weighted, atol=1e-12)
        np.testing.assert_allclose(pooled.transitions[0], per.transitions[feasible].mean(0),
                                   atol=0.01)
        assert validate(pooled) == []

    def test_regression_dispatch(self):
        params, g, X, y, cfg = _instance(5, N=12)
        stats = e_step(X, params, g, cfg, y=y)
        lin = m_step_regression(stats, y, cfg, g)
        assert lin.link is Link.LINEAR
        tanh_cfg = TrainConfig(K=cfg.K, link=Link.TANH)
        th = m_step_regression(stats, y, tanh_cfg, g.replace(link=Link.TANH))
        assert th.link is Link.TANH and th.sigma > 0


class TestEnumerationIteration:
    @pytest.mark.parametrize("seed", range(6))
    def test_one_iteration(self, seed):
        spec = ["entering", "exiting", "all"][seed % 3]
        params, g, X, y, cfg = _instance(50 + seed, N=8, spec=spec)
        rng = np.random.default_rng(seed)
        y = g.alpha + g.beta * rng.integers(0, 2, len(y)) + rng.normal(size=len(y))
        stats = e_step(X, params, g, cfg, y=y)
        new = m_step_hmm(stats, X, params)
        new_g = m_step_regression(stats, y, cfg, g)
        E, tr, pi, a, b, s = em_update(params, g, X, y, cfg.spec.states(params.space))
        np.testing.assert_allclose(new.emissions, E, atol=1e-7)
        np.testing.assert_allclose(new.transitions, tr, atol=1e-7)
        np.testing.assert_allclose(new.initial, pi, atol=1e-7)
        np.testing.assert_allclose([new_g.alpha, new_g.beta, new_g.sigma], [a, b, s], atol=1e-7)


class TestLikelihood:
    def test_factorized_degenerate_case(self):
        space = StateSpace(2)
        E = tie_emissions(np.random.default_rng(0).dirichlet(np.ones(4), size=5))
        params = HmmParams(space, E, default_transitions(6, 0.0), default_initial(space, 0.0))
        X = np.random.default_rng(1).integers(0, 4, (4, 6))
        y = np.array([0.3, -1.0, 2.0, 0.5])
        g = RegressionParams(Link.TANH, alpha=0.7, beta=0.0, sigma=1.3)
        expected = math.fsum(np.log(E[0, X]).ravel()) + math.fsum(
            response_loglik(y, 0, g.replace(link=Link.LINEAR)))
        got = joint_loglik(X, params, g, TrainConfig(K=2), y=y)
        assert got == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_enumeration(self, seed):
        params, g, X, y, cfg = _instance(seed, N=3)
        states = cfg.spec.states(params.space)
        expected = sum(posteriors(params, x, states, lambda v, yi=yi: response_loglik(yi, v, g))
                       ["loglik"] for x, yi in zip(X, y))
        report = joint_loglik(X, params, g, cfg, y=y, details=True)
        assert report.total == pytest.approx(expected, abs=1e-8)
        assert not report.lower_bound


class TestPredict:
    def test_no_motif_gives_f0(self):
        space = StateSpace(2)
        params = HmmParams(space, np.full((5, 4), 0.25), default_transitions(6, 0.0),
                           default_initial(space, 0.0))
        g = RegressionParams(Link.TANH, alpha=1.0, beta=2.0, s=1.5, t=0.5)
        assert predict("ACGTTA", params, g) == pytest.approx(link_eval(g, 0))

    @given(st.integers(0, 10 ** 6))
    def test_linear_link_uses_mean(self, seed):
        params, g, X, _, cfg = _instance(seed, N=2)
        yhat, _ = predict_batch(X, params, g, cfg)
        for i in range(2):
            m = dp.marginal_summary_posterior(X[i], params, cfg.spec, d_init=4096)
            assert yhat[i] == pytest.approx(g.alpha + g.beta * m.mean(), abs=1e-10)

    @pytest.mark.parametrize("seed", range(4))
    def test_tanh_matches_enumeration(self, seed):
        params, g, X, _, cfg = _instance(seed, N=1)
        g = g.replace(link=Link.TANH, s=1.3, t=1.0)
        states = cfg.spec.states(params.space)
        paths = enumerate_paths(params, X[0], states)
        w = np.exp(np.array([lp for _, lp, _ in paths]))
        f = np.array([link_eval(g, v) for _, _, v in paths])
        assert predict(X[0], params, g, cfg) == pytest.approx(np.dot(w, f) / w.sum(), abs=1e-9)

    def test_deterministic(self):
        params, g, X, _, cfg = _instance(9, N=5)
        a, _ = predict_batch(X, params, g, cfg)
        b, _ = predict_batch(X, params, g, cfg)
        np.testing.assert_array_equal(a, b)


@pytest.fixture(scope="module")
def dataset():
    params, g = _truth()
    return params, g, simulate(params, g, SummarySpec("entering"), 600, 3)


class TestTraining:
    def test_flat_response_tracks_baum_welch(self):
        params, g, X, y, cfg = _instance(21, N=15)
        start = params.replace(emissions=tie_emissions(0.5 * params.emissions + 0.125))
        joint, bw = start, start
        flat = g.replace(beta=0.0)
        for _ in range(3):
            joint = m_step_hmm(e_step(X, joint, flat, cfg, y=y), X, joint)
            bw = m_step_hmm(e_step(X, bw, flat, cfg, y=y, use_response=False), X, bw)
            np.testing.assert_allclose(joint.emissions, bw.emissions, atol=1e-8)
            np.testing.assert_allclose(joint.transitions, bw.transitions, atol=1e-8)
            np.testing.assert_allclose(joint.initial, bw.initial, atol=1e-8)

    def test_frozen_regression_flag(self):
        params, g, X, y, cfg = _instance(22, N=10)
        cfg = TrainConfig(K=cfg.K, link=Link.LINEAR, max_iters=3, update_regression=False)
        _, g_out, trace = train(X, cfg, y=y, init=(params, g.replace(beta=0.0)))
        assert g_out == g.replace(beta=0.0)
        assert len(trace) >= 2

    def test_joint_trace(self, dataset):
        params, g, data = dataset
        cfg = TrainConfig(K=3, summary="entering", link=Link.LINEAR, max_iters=25)
        est, g_hat, trace = train(data, cfg)
        ll = np.array(trace.loglik)
        assert np.all(np.diff(ll) >= -1e-6 * np.abs(ll[:-1]))
        assert trace.phases == ["joint"]
        assert len(trace.to_jsonl().splitlines()) == len(trace)
        assert set(trace.records[0]) >= {"joint_loglik", "q1", "q2", "sigma", "max_d",
                                         "coverage_warnings", "wall_time"}
        assert validate(est) == []

    def test_one_iteration_from_truth_stays_close(self, dataset):
        params, g, data = dataset
        cfg = TrainConfig(K=3, summary="entering", link=Link.LINEAR)
        stats = e_step(data, params, g, cfg)
        new = m_step_hmm(stats, data.X, params)
        new_g = m_step_regression(stats, data.y, cfg, g)
        assert np.abs(new.emissions - params.emissions).max() < 0.05
        assert np.abs(new.transitions[:9] - params.transitions[:9]).max() < 0.05
        assert abs(new_g.alpha - g.alpha) < 0.1
        assert abs(new_g.beta - g.beta) < 0.1
        assert abs(new_g.sigma - g.sigma) < 0.05

    def test_two_stage_phases(self, dataset):
        _, _, data = dataset
        cfg = TrainConfig(K=3, summary="entering", link=Link.LINEAR, max_iters=10)
        _, g_hat, trace = train_two_stage(data, cfg)
        assert trace.phases == ["baum-welch", "regression"]
        assert g_hat.link is Link.LINEAR

    def test_uninformative_data_agree(self):
        params, _ = _truth(entry=0.05)
        flat = RegressionParams(Link.LINEAR, alpha=1.0, beta=0.0, sigma=0.5)
        data = simulate(params, flat, SummarySpec("entering"), 500, 4)
        cfg = TrainConfig(K=3, summary="entering", link=Link.LINEAR, max_iters=20)
        joint, _, _ = train(data, cfg)
        two, _, _ = train_two_stage(data, cfg)
        assert np.abs(joint.emissions - two.emissions).max() < 0.05
        assert np.abs(joint.transitions - two.transitions).max() < 0.05

    def test_short_sequences_rejected(self):
        with pytest.raises(InvalidArgumentError):
            train(["ACG", "ACG"], TrainConfig(K=4), y=[1.0, 2.0])

    def test_restarts_label_phases(self, dataset):
        _, _, data = dataset
        sub = data.subset(np.arange(150))
        cfg = TrainConfig(K=3, summary="entering", link=Link.LINEAR, max_iters=3, n_restarts=2)
        _, _, trace = train(sub, cfg)
        assert trace.phases == ["joint/restart-0", "joint/restart-1"]


def test_trace_write(tmp_path):
    trace = TrainTrace()
    trace.append(phase="joint", iteration=0, joint_loglik=-1.5)
    trace.write(tmp_path / "t.jsonl")
    assert (tmp_path / "t.jsonl").read_text() == '{"phase": "joint", "iteration": 0, "joint_loglik": -1.5}\n'

import numpy as np
import pytest

from slowfast.averaging import averaged_model
from slowfast.errors import EpsilonOutOfRange, InsufficientSignal, NonFiniteState
from slowfast.model import builtin_model
from slowfast.sde import (
    LimitEquation,
    PathSample,
    SimConfig,
    WeakErrorStudy,
    analytic_example_error,
    fit_order,
    fit_power_law,
    mc_expectation,
    replica_stream,
    run_replicas,
    simulate_averaged,
    simulate_slow_fast,
    test_function,
    weak_error_study,
)
from slowfast.stats import Moments


def batch(simulate_fn, M, seed=0):
    return simulate_fn(np.random.default_rng(seed), M)


class TestSimConfig:
    def test_eps_scaled_step(self):
        assert SimConfig(eps=2**-8).step == pytest.approx(0.1 * 2**-8)
        assert SimConfig(eps=0.5).step == 1e-3
        assert SimConfig(eps=2**-8, step_rule="fixed").step == 1e-3

    def test_eps_range(self):
        with pytest.raises(EpsilonOutOfRange):
            SimConfig(eps=1.5)


class TestSimulateSlowFast:
    def test_brownian_motion(self):
        model = builtin_model("pure_diffusion", {"n": 2})
        cfg = SimConfig(eps=0.1, T=1.0, t_grid=(1.0,), h_slow=0.01)
        s = simulate_slow_fast(model, [0.3, -0.2], 0, cfg, np.random.default_rng(1), 10_000)
        sq = ((s.X[:, -1] - [0.3, -0.2]) ** 2).sum(axis=1)
        assert abs(sq.mean() - 2.0) <= 3 * sq.std(ddof=1) / np.sqrt(sq.size)

    def test_paper_mean(self, paper_model):
        eps = 0.05
        cfg = SimConfig(eps=eps, t_grid=(0.1, 0.5, 1.0))
        s = simulate_slow_fast(paper_model, [0.0], 0, cfg, np.random.default_rng(2), 40_000)
        for k, t in enumerate(cfg.t_grid):
            x = s.X[:, k, 0]
            ref = np.sqrt(eps) / 2 * (1 - np.exp(-2 * t / eps))
            assert abs(x.mean() - ref) <= 3 * x.std(ddof=1) / np.sqrt(x.size)

    def test_path_sample_shape(self, demo_model):
        cfg = SimConfig(eps=0.25, t_grid=(0.05, 0.1))
        s = simulate_slow_fast(demo_model, [0.1, 0.2], 2, cfg, np.random.default_rng(3), 7)
        assert s.X.shape == (7, 2, 2) and s.alpha.shape == (7, 2)
        np.testing.assert_array_equal(s.times, cfg.t_grid)
        xT, aT = s.terminal
        assert xT.shape == (7, 2) and set(aT) <= {0, 1, 2}
        assert np.all(s.sup_sq >= (s.X**2).sum(axis=2).max(axis=1) - 1e-15)

    def test_alpha_distribution_frozen(self, paper_model):
        # x-independent generator: the chain at time t follows P_t exactly
        eps = 0.25
        cfg = SimConfig(eps=eps, t_grid=(0.1,))
        s = simulate_slow_fast(paper_model, [0.0], 0, cfg, np.random.default_rng(4), 50_000)
        p = 0.5 * (1 + np.exp(-2 * 0.1 / eps))
        freq = np.mean(s.alpha[:, 0] == 0)
        assert abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / 50_000)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite(self):
        from slowfast.model import SwitchingModel, _const_matrix, PAPER_Q

        model = SwitchingModel(
            name="blowup", n=1, d=1, m0=2,
            K=lambda x, i: np.zeros_like(x),
            b=lambda x, i: x**2 * 1e200,
            sigma=lambda x, i: np.zeros((x.shape[0], 1, 1)),
            Q=_const_matrix(PAPER_Q), Qtilde=_const_matrix(np.zeros((2, 2))),
        )
        with pytest.raises(NonFiniteState):
            simulate_slow_fast(model, [1e100], 0, SimConfig(eps=1.0, t_grid=(1.0,)),
                               np.random.default_rng(0), 3)

    @pytest.mark.slow
    def test_moment_stability(self, paper_model):
        fourth = []
        for k in range(4, 11):
            cfg = SimConfig(eps=2.0**-k, t_grid=(1.0,))
            s = simulate_slow_fast(paper_model, [0.0], 0, cfg, np.random.default_rng(k), 2000)
            fourth.append(np.mean(s.sup_sq**2))
        assert max(fourth) / min(fourth) < 2


class TestSimulateAveraged:
    def test_paper_gaussian(self, paper_model):
        avg = averaged_model(paper_model)
        M = 100_000
        s = simulate_averaged(avg, [0.0], 1.0, 1e-2, np.random.default_rng(5), M, (1.0,))
        x = s.X[:, 0, 0]
        assert abs(x.mean()) <= 3 * np.sqrt(2.0 / M)
        assert abs(x.var(ddof=1) - 2.0) <= 3 * 2.0 * np.sqrt(2.0 / M)
        assert s.alpha is None

    def test_zero_coefficients(self):
        eq = LimitEquation(lambda x: np.zeros_like(x), lambda x: np.zeros(x.shape + (1,)))
        s = simulate_averaged(eq, [1.5], 1.0, 0.1, np.random.default_rng(0), 4)
        np.testing.assert_array_equal(s.X, 1.5)

    def test_deterministic_ode_order(self):
        eq = LimitEquation(lambda x: -x, lambda x: np.zeros(x.shape + (1,)))
        errs = []
        for h in (0.1, 0.05, 0.025):
            s = simulate_averaged(eq, [1.0], 1.0, h, np.random.default_rng(0), 1)
            errs.append(abs(s.X[0, -1, 0] - np.exp(-1.0)))
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all((ratios >= 1.7) & (ratios <= 2.3))


class TestMonteCarlo:
    def test_constant(self, paper_model):
        cfg = SimConfig(eps=0.1, t_grid=(0.5,))
        est = mc_expectation(
            lambda r, P: simulate_slow_fast(paper_model, [0.0], 0, cfg, r, P),
            lambda x: np.full(x.shape[0], 3.0), 0.5, 100, seed=1,
        )
        assert est.mean == 3.0 and est.std_err == 0.0

    def test_paper_mean(self, paper_model):
        eps = 0.05
        cfg = SimConfig(eps=eps, t_grid=(1.0,))
        est = mc_expectation(
            lambda r, P: simulate_slow_fast(paper_model, [0.0], 0, cfg, r, P),
            test_function("coordinate(0)"), 1.0, 20_000, seed=2,
        )
        assert abs(est.mean - analytic_example_error(eps, 1.0)) <= 3 * est.std_err

    def test_std_err_scaling(self, paper_model):
        avg = averaged_model(paper_model)

        def sim(r, P):
            return simulate_averaged(avg, [0.0], 1.0, 0.05, r, P, (1.0,))

        phi = test_function("coordinate(0)")
        a = mc_expectation(sim, phi, 1.0, 20_000, seed=3)
        b = mc_expectation(sim, phi, 1.0, 40_000, seed=3)
        assert abs(a.std_err / b.std_err - np.sqrt(2)) <= 0.1 * np.sqrt(2)

    def test_independent_of_threads(self, demo_model):
        cfg = SimConfig(eps=0.25, t_grid=(0.2,))

        def sim(r, P):
            return simulate_slow_fast(demo_model, [0.0, 0.0], 0, cfg, r, P)

        phi = test_function("quadratic")
        one = mc_expectation(sim, phi, 0.2, 500, seed=9, threads=1)
        many = mc_expectation(sim, phi, 0.2, 500, seed=9, threads=3)
        assert one == many


class TestReplicaStreams:
    def test_blocks_differ(self):
        a = replica_stream(1, (0,), 0).random(4)
        b = replica_stream(1, (0,), 1).random(4)
        c = replica_stream(1, (0,), 0).random(4)
        assert not np.array_equal(a, b) and np.array_equal(a, c)

    def test_merge_order_fixed(self):
        def sim(r, P):
            return PathSample(np.array([1.0]), r.normal(size=(P, 1, 1)), None, np.zeros(P))

        def red(s):
            return Moments.of(s.X[:, 0])

        a = run_replicas(sim, red, 35, 4, block_size=10, threads=1)
        b = run_replicas(sim, red, 35, 4, block_size=10, threads=4)
        assert a.count == 35
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.m2, b.m2)

    def test_merge_matches_pooled(self):
        r = np.random.default_rng(0)
        v = r.normal(size=(100, 3))
        merged = Moments.of(v[:30]).merge(Moments.of(v[30:]))
        np.testing.assert_allclose(merged.mean, v.mean(axis=0), atol=1e-14)
        np.testing.assert_allclose(merged.std_err, v.std(axis=0, ddof=1) / 10, atol=1e-14)


@pytest.fixture(scope="module")
def paper_study():
    return weak_error_study(builtin_model("paper_example"), "coordinate(0)",
                            M=20_000, seed=77)


class TestWeakErrorStudy:
    def test_matches_closed_form(self, paper_study):
        ref = analytic_example_error(paper_study.eps_grid, 1.0)
        assert np.all(np.abs(paper_study.error - ref) <= 3 * paper_study.std_err)

    def test_monotone_up_to_noise(self, paper_study):
        e, se = paper_study.error, paper_study.std_err
        assert np.all(e[1:] <= e[:-1] + 3 * np.hypot(se[1:], se[:-1]))

    def test_zero_homogenisation(self):
        study = weak_error_study(builtin_model("pure_diffusion"), "coordinate(0)",
                                 eps_grid=[2**-4, 2**-6], M=20_000, seed=5)
        assert np.all(study.error <= 3 * study.std_err)
        with pytest.raises(InsufficientSignal):
            fit_order(study)

    def test_step_rule_sanity(self, paper_model):
        # exact for this model in law: only Monte Carlo noise separates the runs
        kw = dict(eps_grid=[2**-6], M=20_000, seed=6)
        a = weak_error_study(paper_model, "coordinate(0)", step_c=0.1, **kw)
        b = weak_error_study(paper_model, "coordinate(0)", step_c=0.05, **kw)
        se_slow = np.hypot(a.slow_se, b.slow_se)
        assert np.all(np.abs(a.slow_mean - b.slow_mean) <= 3 * se_slow)
        assert abs(a.error[0] - b.error[0]) <= 3 * se_slow.max()

    def test_deterministic(self, demo_model):
        kw = dict(eps_grid=[0.5, 0.25], t_grid=[0.1, 0.2], M=300, seed=11)
        a = weak_error_study(demo_model, "cubic", **kw)
        b = weak_error_study(demo_model, "cubic", threads=2, **kw)
        np.testing.assert_array_equal(a.error, b.error)
        np.testing.assert_array_equal(a.std_err, b.std_err)
        np.testing.assert_array_equal(a.slow_mean, b.slow_mean)

    def test_eps_grid_must_decrease(self, paper_model):
        with pytest.raises(ValueError):
            weak_error_study(paper_model, "coordinate(0)", eps_grid=[0.1, 0.2], M=10)


class TestFitOrder:
    def _study(self, eps, err, se=None):
        eps = np.asarray(eps, dtype=float)
        err = np.asarray(err, dtype=float)
        se = np.zeros_like(err) if se is None else np.asarray(se, dtype=float)
        z = np.zeros((eps.size, 1))
        return WeakErrorStudy(eps, err, se, z[:, 0], z[0], z, z, z[0], z[0], z[:, 0], z[:, 0])

    def test_sqrt(self):
        eps = 2.0 ** -np.arange(4, 9)
        fit = fit_order(self._study(eps, 0.7 * np.sqrt(eps)))
        assert fit.slope == pytest.approx(0.5, abs=1e-12)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
        assert fit.intercept == pytest.approx(np.log(0.7), abs=1e-12)

    def test_linear(self):
        eps = 2.0 ** -np.arange(4, 9)
        assert fit_power_law(eps, 3 * eps).slope == pytest.approx(1.0, abs=1e-12)

    def test_insufficient_signal(self):
        with pytest.raises(InsufficientSignal) as exc:
            fit_order(self._study([0.5, 0.25], [0.1, 0.05], [0.01, 0.03]))
        assert exc.value.eps_list == [0.25]


class TestAnalytic:
    def test_unit(self):
        assert analytic_example_error(1.0, 1.0) == pytest.approx(0.43233235838169365, abs=1e-15)

    def test_small_t(self):
        assert analytic_example_error(0.1, 1e-12) == pytest.approx(0.0, abs=1e-11)

    def test_eps_004(self):
        assert analytic_example_error(0.04, 1.0) == pytest.approx(0.1, abs=1e-15)


class TestTestFunctions:
    def test_registry(self):
        x = np.array([[1.0, 2.0]])
        assert test_function("coordinate(1)")(x)[0] == 2.0
        assert test_function("quadratic")(x)[0] == 5.0
        assert test_function("cubic")(x)[0] == (1 - 3) + (8 - 6)

    def test_unknown(self):
        with pytest.raises(ValueError):
            test_function("sine")

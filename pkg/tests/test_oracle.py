import numpy as np
import pytest

from abmident.dgp import ModelSpec, SimConfig
from abmident.errors import CapabilityError, ConfigError, MultipleStationaryError, NumericalError
from abmident.models import get_model
from abmident.moments import MomentSpec
from abmident.oracle import (FPSpec, TransitionMatrix, analytic_moments, analytic_objective, closed_classes,
                             ergodic_limit, fp_on_lattice, fp_stationary_density, kirman_fp_spec, model_moments,
                             n_step, stationary_distribution, transition_matrix)
from abmident.smd import GridSpec, find_minima, identify, sweep

KIRMAN = get_model("kirman")
CFG10 = SimConfig(n_agents=10)


def random_stochastic(n, rng):
    A = rng.random((n, n))
    return A / A.sum(axis=1, keepdims=True)


def kirman_P(n=10, **kw):
    return transition_matrix(KIRMAN, KIRMAN.default_params().with_values(**kw), SimConfig(n_agents=n))


class TestTransitionMatrix:
    def test_frozen_is_identity(self):
        assert np.array_equal(kirman_P(epsilon=0.0, delta=1.0).probs, np.eye(11))

    def test_row_sums_and_band(self):
        for eps, delta in [(0.1, 0.8), (0.5, 0.0), (1.0, 0.3), (0.01, 0.99)]:
            P = kirman_P(25, epsilon=eps, delta=delta).probs
            assert np.abs(P.sum(axis=1) - 1).max() <= 1e-12
            assert np.all((P > 0).sum(axis=1) <= 3)
            assert np.all(np.triu(P, 2) == 0) and np.all(np.tril(P, -2) == 0)

    def test_validation(self):
        with pytest.raises(ConfigError, match="rows must sum"):
            TransitionMatrix.from_array([[0.5, 0.4], [0.5, 0.5]])
        with pytest.raises(ConfigError):
            TransitionMatrix.from_array([[1.5, -0.5], [0.5, 0.5]])

    def test_capability_error(self):
        m = get_model("ar1")
        with pytest.raises(CapabilityError):
            transition_matrix(m, m.default_params(), SimConfig())


class TestNStep:
    def test_one_is_identity_op(self):
        P = kirman_P()
        assert np.array_equal(n_step(P, 1).probs, P.probs)

    def test_swap(self):
        P = TransitionMatrix.from_array([[0.0, 1.0], [1.0, 0.0]])
        assert np.array_equal(n_step(P, 2).probs, np.eye(2))

    def test_against_naive(self):
        rng = np.random.default_rng(2)
        A = random_stochastic(5, rng)
        naive = np.eye(5)
        for _ in range(7):
            naive = naive @ A
        np.testing.assert_allclose(n_step(TransitionMatrix.from_array(A), 7).probs, naive, rtol=0, atol=1e-12)

    def test_chapman_kolmogorov(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            P = TransitionMatrix.from_array(random_stochastic(5, rng))
            m, n = rng.integers(1, 40, 2)
            lhs = n_step(P, m + n).probs
            rhs = n_step(P, m).probs @ n_step(P, n).probs
            assert np.abs(lhs - rhs).max() <= 1e-10

    def test_invalid(self):
        with pytest.raises(ConfigError):
            n_step(kirman_P(), 0)


class TestStationary:
    def test_two_state_closed_form(self):
        a, b = 0.3, 0.6
        pi = stationary_distribution(TransitionMatrix.from_array([[1 - a, a], [b, 1 - b]]))
        np.testing.assert_allclose(pi.pi, [2 / 3, 1 / 3], rtol=0, atol=1e-15)

    def test_absorbing_kirman(self):
        with pytest.raises(MultipleStationaryError) as ei:
            stationary_distribution(kirman_P(epsilon=0.0))
        basis = ei.value.basis
        assert basis.shape == (2, 11)
        assert {int(np.argmax(v)) for v in basis} == {0, 10}

    def test_methods_agree(self):
        P = kirman_P()
        a = stationary_distribution(P, tol=1e-13, method="LinearSolve")
        b = stationary_distribution(P, tol=1e-13, method="PowerIteration")
        assert np.abs(a.pi - b.pi).sum() <= 1e-10

    def test_residual_property(self):
        rng = np.random.default_rng(5)
        for n in (3, 5, 20, 60):
            P = TransitionMatrix.from_array(random_stochastic(n, rng))
            pi = stationary_distribution(P)
            assert np.abs(pi.pi @ P.probs - pi.pi).sum() <= 1e-10
            assert pi.residual <= 1e-10
            assert abs(pi.pi.sum() - 1) <= 1e-12 and pi.pi.min() >= 0

    def test_periodic_power_iteration_terminates(self):
        P = TransitionMatrix.from_array([[0.0, 1.0], [1.0, 0.0]])
        pi = stationary_distribution(P, method="PowerIteration")
        np.testing.assert_allclose(pi.pi, [0.5, 0.5], atol=1e-12)

    def test_closed_classes(self):
        P = TransitionMatrix.from_array([[1.0, 0, 0], [0.3, 0.4, 0.3], [0, 0, 1.0]])
        assert sorted(c.tolist() for c in closed_classes(P)) == [[0], [2]]

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            stationary_distribution(kirman_P(), method="Magic")

    def test_ergodic_limit(self):
        P = kirman_P()
        n, dist = ergodic_limit(P, stationary_distribution(P))
        assert dist <= 1e-8 and n & (n - 1) == 0


class TestAnalyticMoments:
    def test_point_mass(self):
        pi = stationary_distribution(TransitionMatrix.from_array([[1.0]]))
        assert analytic_moments(pi, [2.5], 3).raw.tolist() == [2.5, 6.25, 15.625]

    def test_uniform_binary(self):
        pi = stationary_distribution(TransitionMatrix.from_array([[0.5, 0.5], [0.5, 0.5]]))
        np.testing.assert_allclose(analytic_moments(pi, lambda s: float(s), 4).raw, 0.5)

    def test_autocov_needs_P(self):
        pi = stationary_distribution(kirman_P())
        with pytest.raises(ConfigError):
            analytic_moments(pi, None, MomentSpec(2, (1,)))

    def test_lag_autocov_by_enumeration(self):
        P = kirman_P()
        pi = stationary_distribution(P)
        mv = analytic_moments(pi, None, MomentSpec(1, (3,)), P)
        P3 = np.linalg.matrix_power(P.probs, 3)
        y = P.values
        brute = sum(pi.pi[i] * P3[i, j] * y[i] * y[j] for i in range(11) for j in range(11)) - (pi.pi @ y) ** 2
        assert mv.autocov[0] == pytest.approx(brute, rel=1e-12)
        assert mv.sample_size == 0

    def test_symmetric_kirman_mean_half(self):
        mv = model_moments(KIRMAN, KIRMAN.default_params(), CFG10, MomentSpec(1))
        assert mv.raw[0] == pytest.approx(0.5, abs=1e-12)


class TestAnalyticObjective:
    GRID = GridSpec.linspace(KIRMAN.default_params(), {"epsilon": (0.02, 0.4, 21), "delta": (0.5, 0.98, 21)})

    def test_self_consistency(self):
        p = KIRMAN.default_params().with_values(epsilon=0.096, delta=0.788)
        spec = MomentSpec(2, (25,))
        tgt = model_moments(KIRMAN, p, CFG10, spec)
        s = analytic_objective(KIRMAN, self.GRID, CFG10, tgt, None, spec)
        best = find_minima(s)[0]
        assert best.value == 0.0 and best.params == {"epsilon": pytest.approx(0.096), "delta": pytest.approx(0.788)}
        assert s.kind == "analytic" and not s.crn

    def test_classify_identified_with_lag(self):
        spec = MomentSpec(2, (25,))
        tgt = model_moments(KIRMAN, KIRMAN.default_params(), CFG10, spec)
        s = analytic_objective(KIRMAN, self.GRID, CFG10, tgt, None, spec)
        _, r = identify(KIRMAN, self.GRID, CFG10, tgt, s.W, spec, False, step=s.grid.spacing() / 4, surface=s,
                        objective_fn=lambda th: float(np.sum(
                            (model_moments(KIRMAN, th, CFG10, spec).vector() - tgt.vector()) ** 2)))
        assert r.classification == ["Identified"]

    def test_raw_moments_have_exact_ridge(self):
        # the stationary law depends on (eps, delta) only through eps / ((1 - eps)(1 - delta))
        spec = MomentSpec(2)
        a = KIRMAN.default_params().with_values(epsilon=0.1, delta=0.8)
        r = 0.1 / (0.9 * 0.2)
        eps2 = 0.2
        b = KIRMAN.default_params().with_values(epsilon=eps2, delta=1 - eps2 / ((1 - eps2) * r))
        np.testing.assert_allclose(model_moments(KIRMAN, a, CFG10, spec).vector(),
                                   model_moments(KIRMAN, b, CFG10, spec).vector(), rtol=1e-10)

    def test_simulated_surface_correlates(self):
        spec = MomentSpec(2)
        tgt = model_moments(KIRMAN, KIRMAN.default_params(), CFG10, spec)
        a = analytic_objective(KIRMAN, self.GRID, CFG10, tgt, None, spec)
        # small-epsilon nodes mix slowly, so the horizon has to be long for the noise to wash out
        cfg = SimConfig(n_agents=10, horizon=40000, burn_in=4000, replications=100, master_seed=1)
        s = sweep(KIRMAN, self.GRID, cfg, tgt, a.W, spec=spec)
        assert np.corrcoef(a.values.ravel(), s.values.ravel())[0, 1] > 0.99


class TestFokkerPlanck:
    def test_ou(self):
        d = fp_stationary_density(FPSpec(lambda x: -x, lambda x: np.ones_like(x), (-10.0, 10.0), 4001))
        assert abs(d.mean()) <= 1e-10
        assert abs(d.variance() - 1.0) <= 1e-3
        assert abs(d.integral() - 1.0) <= 1e-8

    def test_zero_drift_uniform(self):
        d = fp_stationary_density(FPSpec(lambda x: 0 * x, lambda x: 0 * x + 0.3, (2.0, 6.0), 101))
        np.testing.assert_allclose(d.p, 0.25, rtol=1e-12)

    def test_singular_diffusion(self):
        with pytest.raises(NumericalError):
            fp_stationary_density(FPSpec(lambda x: -x, lambda x: x, (0.0, 1.0), 101))

    def test_kirman_vs_exact_chain(self):
        pi = stationary_distribution(kirman_P(50)).pi
        dens = fp_stationary_density(kirman_fp_spec(50, 0.1, 0.8))
        w = fp_on_lattice(dens, np.arange(51) / 50)
        assert abs(w.sum() - 1) <= 1e-12
        assert np.abs(w - pi).sum() <= 0.05
        assert abs(dens.integral() - 1) <= 1e-8

    def test_outside_domain_is_zero(self):
        d = fp_stationary_density(FPSpec(lambda x: -x, lambda x: np.ones_like(x), (-5.0, 5.0), 501))
        assert d(np.array([-6.0, 6.0])).tolist() == [0.0, 0.0]


def test_model_without_enumeration():
    class Plain(ModelSpec):
        name = "plain"

        def default_params(self):
            return get_model("ar1").default_params()

        def init_state(self, config, rng):
            raise NotImplementedError

        def transition(self, state, params, rng, config):
            raise NotImplementedError

        def measure(self, state, params):
            return 0.0

    m = Plain()
    with pytest.raises(CapabilityError):
        transition_matrix(m, m.default_params(), SimConfig())

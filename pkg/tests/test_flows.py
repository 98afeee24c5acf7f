"""Flow-core oracles: Monte-Carlo moments, kernel conditional expectations,
finite differences of the analytic log-density, and exact Gaussian
conditioning."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtts import rng as rngmod
from flowtts.flows import (FlowSpec, LatentState, StepSchedule, VAR_FLOOR,
                           lookahead, log_marginal_density, marginal_params,
                           ode_solve_batch, ode_step, score,
                           score_from_velocity, sde_solve_batch, sde_step,
                           solve_ode, velocity)
from flowtts.ledger import BudgetLedger


def single_gaussian_posterior_mean(mu, s0, x, t):
    """Independent oracle: E[x0 | x_t = x] by Gaussian conditioning."""
    a = 1.0 - t
    v = a * a * s0 * s0 + t * t
    return mu + a * s0 * s0 * (x - a * mu) / v


class TestMarginalParams:
    def test_pure_noise_endpoint(self):
        spec = FlowSpec.single([0.0], 1.0)
        _, means, var = marginal_params(spec, 1.0)
        assert means[0, 0] == 0.0 and var[0] == 1.0

    def test_data_endpoint_is_prior(self):
        spec = FlowSpec.single([0.0], 1.0)
        _, means, var = marginal_params(spec, 0.0)
        assert means[0, 0] == 0.0 and var[0] == 1.0

    def test_midpoint_against_monte_carlo(self):
        # x_t = (1-t) x0 + t eps at mu=2, s0=0.5, t=0.5
        spec = FlowSpec.single([2.0], 0.5)
        _, means, var = marginal_params(spec, 0.5)
        assert means[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert var[0] == pytest.approx(0.3125, abs=1e-12)
        gen = np.random.default_rng(101)
        x0 = 2.0 + 0.5 * gen.standard_normal(1_000_000)
        eps = gen.standard_normal(1_000_000)
        xt = 0.5 * x0 + 0.5 * eps
        assert xt.mean() == pytest.approx(means[0, 0], abs=1e-2)
        assert xt.var(ddof=1) == pytest.approx(var[0], abs=1e-2)

    def test_weights_equal_prior_weights(self):
        spec = FlowSpec.from_components(
            1, [(0.3, [-1.0], 0.5), (0.7, [2.0], 1.0)])
        w, _, _ = marginal_params(spec, 0.37)
        assert np.array_equal(w, spec.weights)

    def test_variance_floor(self):
        spec = FlowSpec.single([0.0], 1e-9)
        _, _, var = marginal_params(spec, 0.0)
        assert var[0] == VAR_FLOOR


class TestVelocity:
    def test_standard_gaussian_midpoint_is_zero(self):
        spec = FlowSpec.single([0.0], 1.0)
        for x in (-3.0, 0.2, 7.0):
            assert velocity(spec, np.array([x]), 0.5)[0] == pytest.approx(0.0)

    def test_kernel_monte_carlo_oracle(self):
        # E[eps - x0 | x_t ~ 2.0] at t=1 for the standard Gaussian prior.
        spec = FlowSpec.single([0.0], 1.0)
        got = velocity(spec, np.array([2.0]), 1.0)[0]
        assert got == pytest.approx(2.0, abs=1e-12)
        gen = np.random.default_rng(7)
        x0 = gen.standard_normal(1_000_000)
        eps = gen.standard_normal(1_000_000)
        xt = eps  # t = 1
        keep = np.abs(xt - 2.0) < 0.05
        mc = np.mean(eps[keep] - x0[keep])
        assert got == pytest.approx(mc, abs=5e-2)

    def test_symmetric_mixture_zero_at_origin(self):
        spec = FlowSpec.from_components(
            1, [(0.5, [-1.0], 0.5), (0.5, [1.0], 0.5)])
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            assert velocity(spec, np.array([0.0]), t)[0] == pytest.approx(0.0, abs=1e-14)

    def test_batch_matches_single(self):
        spec = FlowSpec.from_components(
            2, [(0.4, [-1.0, 0.5], 0.6), (0.6, [2.0, -0.3], 1.1)])
        gen = np.random.default_rng(3)
        xs = gen.standard_normal((5, 2))
        batch = velocity(spec, xs, 0.4)
        for i in range(5):
            assert np.array_equal(batch[i], velocity(spec, xs[i], 0.4))


class TestScore:
    def test_finite_difference_oracle(self):
        # d log p / dx at mu=0, s0=1, t=0.5, x=1: variance 0.5 gives -2.
        spec = FlowSpec.single([0.0], 1.0)
        got = score(spec, np.array([1.0]), 0.5)[0]
        h = 1e-5
        fd = (log_marginal_density(spec, np.array([1.0 + h]), 0.5)
              - log_marginal_density(spec, np.array([1.0 - h]), 0.5)) / (2 * h)
        assert got == pytest.approx(-2.0, abs=1e-9)
        assert got == pytest.approx(float(fd), abs=1e-6)

    def test_finite_difference_oracle_mixture(self):
        spec = FlowSpec.from_components(
            1, [(0.3, [-1.5], 0.4), (0.7, [1.0], 0.9)])
        gen = np.random.default_rng(11)
        h = 1e-5
        for _ in range(20):
            t = gen.uniform(0.05, 1.0)
            x = gen.normal(0.0, 2.0)
            fd = (log_marginal_density(spec, np.array([x + h]), t)
                  - log_marginal_density(spec, np.array([x - h]), t)) / (2 * h)
            assert score(spec, np.array([x]), t)[0] == pytest.approx(float(fd), abs=1e-6)

    def test_zero_at_single_component_mean(self):
        spec = FlowSpec.single([1.7, -0.4], 0.8)
        t = 0.3
        _, means, _ = marginal_params(spec, t)
        assert np.allclose(score(spec, means[0], t), 0.0, atol=1e-14)

    def test_velocity_relation_identity(self):
        # -((1-t) u + x) / t equals the direct mixture score; the mean
        # correction cancels exactly, so no shift term is needed.
        gen = np.random.default_rng(23)
        specs = [FlowSpec.single([1.3], 0.7),
                 FlowSpec.from_components(1, [(0.4, [-1.0], 0.5),
                                              (0.6, [2.0], 1.2)])]
        for spec in specs:
            for _ in range(100):
                t = gen.uniform(0.05, 1.0)
                x = np.array([gen.normal(0.0, 2.0)])
                direct = score(spec, x, t)
                via_u = score_from_velocity(spec, x, t)
                assert abs(direct[0] - via_u[0]) < 1e-9

    def test_velocity_relation_rejects_small_t(self):
        spec = FlowSpec.single([0.0], 1.0)
        with pytest.raises(ValueError):
            score_from_velocity(spec, np.array([1.0]), 0.0)
        with pytest.raises(ValueError):
            score_from_velocity(spec, np.array([1.0]), 1e-9)
        # direct form stays valid at t=0
        assert np.isfinite(score(spec, np.array([1.0]), 0.0)[0])


class TestOdeStep:
    def test_zero_field_leaves_value(self):
        spec = FlowSpec.from_components(
            1, [(0.5, [-1.0], 0.5), (0.5, [1.0], 0.5)])
        state = LatentState(np.array([0.0]), 0.6)
        out = ode_step(state, spec, -0.1)
        assert out.value[0] == 0.0 and out.time == pytest.approx(0.5)

    def test_euler_arithmetic(self):
        # u(1.0, t=1) = 2.0 for the N(-1, 1) prior, so x' = 1 + 2(-0.1) = 0.8.
        spec = FlowSpec.single([-1.0], 1.0)
        state = LatentState(np.array([1.0]), 1.0)
        assert velocity(spec, state.value, 1.0)[0] == pytest.approx(2.0)
        out = ode_step(state, spec, -0.1)
        assert out.value[0] == pytest.approx(0.8, abs=1e-15)

    def test_rejects_step_past_zero(self):
        spec = FlowSpec.single([0.0], 1.0)
        state = LatentState(np.array([1.0]), 0.05)
        with pytest.raises(ValueError):
            ode_step(state, spec, -0.1)
        with pytest.raises(ValueError):
            ode_step(state, spec, 0.1)

    def test_full_solve_terminal_moments(self):
        # Smaller sibling of the acceptance run: mu=3, s0=0.5.
        spec = FlowSpec.single([3.0], 0.5)
        schedule = StepSchedule.uniform(100)
        n = 2000
        x1 = np.stack([rngmod.stream(5, rngmod.INIT, i).standard_normal(1)
                       for i in range(n)])
        out = ode_solve_batch(spec, x1, schedule)
        assert abs(out.mean() - 3.0) < 3 * 0.5 / np.sqrt(n)
        assert 0.95 < out.std(ddof=1) / 0.5 < 1.05


class TestSdeStep:
    def test_sigma_zero_equals_ode(self):
        spec = FlowSpec.from_components(
            1, [(0.5, [-1.0], 0.5), (0.5, [2.0], 0.8)])
        state = LatentState(np.array([0.7]), 0.8)
        gen = rngmod.stream(0, rngmod.SDE, 0)
        got = sde_step(state, spec, -0.05, 0.0, gen)
        want = ode_step(state, spec, -0.05)
        assert np.array_equal(got.value, want.value)

    def test_fixed_seed_bit_identical(self):
        spec = FlowSpec.single([1.0], 0.5)
        runs = []
        for _ in range(2):
            state = LatentState(np.array([0.3]), 1.0)
            gen = rngmod.stream(42, rngmod.SDE, 0)
            traj = []
            for k in range(10):
                state = sde_step(state, spec, -0.05, 0.5, gen)
                traj.append(state.value[0])
            runs.append(traj)
        assert runs[0] == runs[1]

    def test_marginal_preservation_small(self):
        # Cheap sibling of the acceptance check (T=150, 4000 seeds).
        spec = FlowSpec.single([3.0], 0.5)
        schedule = StepSchedule.uniform(150)
        n = 4000
        x1o = np.stack([rngmod.stream(1, rngmod.INIT, i).standard_normal(1)
                        for i in range(n)])
        x1s = np.stack([rngmod.stream(2, rngmod.INIT, i).standard_normal(1)
                        for i in range(n)])
        ode = ode_solve_batch(spec, x1o, schedule)
        sde = sde_solve_batch(spec, x1s, schedule, 0.5,
                              rng=np.random.default_rng(9))
        se = np.sqrt(ode.var(ddof=1) / n + sde.var(ddof=1) / n)
        assert abs(ode.mean() - sde.mean()) < 3 * se
        assert 0.9 < sde.var(ddof=1) / ode.var(ddof=1) < 1.1

    def test_rejects_negative_sigma(self):
        spec = FlowSpec.single([0.0], 1.0)
        state = LatentState(np.array([0.0]), 0.5)
        with pytest.raises(ValueError):
            sde_step(state, spec, -0.1, -0.5, rngmod.stream(0, rngmod.SDE, 0))


class TestLookahead:
    def test_time_zero_is_identity(self):
        spec = FlowSpec.single([0.0], 1.0)
        state = LatentState(np.array([1.25]), 0.0)
        ledger = BudgetLedger()
        out = lookahead(state, spec, ledger)
        assert out[0] == 1.25
        assert ledger.velocity_total == 0  # free by convention

    def test_pure_noise_recovers_prior_mean(self):
        # x=2 at t=1: extrapolation 2 - 1*2 = 0, the prior mean.
        spec = FlowSpec.single([0.0], 1.0)
        state = LatentState(np.array([2.0]), 1.0)
        assert lookahead(state, spec)[0] == pytest.approx(0.0, abs=1e-14)
        assert single_gaussian_posterior_mean(0.0, 1.0, 2.0, 1.0) == 0.0

    def test_equals_posterior_mean_on_random_states(self):
        gen = np.random.default_rng(77)
        mu, s0 = 1.3, 0.7
        spec = FlowSpec.single([mu], s0)
        for _ in range(1000):
            t = gen.uniform(0.0, 1.0)
            x = gen.normal(0.0, 2.0)
            got = lookahead(LatentState(np.array([x]), t), spec)[0]
            want = single_gaussian_posterior_mean(mu, s0, x, t)
            assert abs(got - want) < 1e-9


class TestBudgetAndDeterminism:
    @given(st.lists(st.booleans(), min_size=0, max_size=12))
    @settings(max_examples=30, deadline=None)
    def test_ledger_counts_steps_exactly(self, is_sde):
        spec = FlowSpec.single([0.0], 1.0)
        ledger = BudgetLedger()
        state = LatentState(np.zeros(1), 1.0)
        gen = rngmod.stream(0, rngmod.SDE, 0)
        n_sde = 0
        for flag in is_sde:
            if state.time < 0.05:
                break
            if flag:
                state = sde_step(state, spec, -0.04, 0.3, gen, ledger)
                n_sde += 1
            else:
                state = ode_step(state, spec, -0.04, ledger)
        n_total = ledger.velocity_total
        assert n_total == ledger.velocity["advance"]
        assert ledger.score_total == n_sde

    def test_ledger_merge_associative(self):
        a, b = BudgetLedger(), BudgetLedger()
        a.charge_velocity("advance", 3)
        b.charge_velocity("rollout", 2)
        b.charge_score("final", 1)
        merged = a + b
        assert merged.velocity_total == 5 and merged.score_total == 1
        assert a.velocity_total == 3  # merge does not mutate

    def test_solve_ode_deterministic(self):
        spec = FlowSpec.from_components(
            1, [(0.4, [-1.0], 0.5), (0.6, [2.0], 1.2)])
        schedule = StepSchedule.uniform(25)
        outs = []
        for _ in range(2):
            x1 = rngmod.stream(3, rngmod.INIT, 0).standard_normal(1)
            final = solve_ode(LatentState(x1, 1.0), spec, schedule)
            outs.append(final.value[0])
        assert outs[0] == outs[1]

    def test_solve_lands_on_grid_times_exactly(self):
        spec = FlowSpec.single([0.0], 1.0)
        schedule = StepSchedule.uniform(7)
        state = LatentState(np.array([0.5]), 1.0)
        mid = solve_ode(state, spec, schedule, until=schedule.times[3])
        assert mid.time == schedule.times[3]
        assert solve_ode(mid, spec, schedule).time == 0.0


class TestStepSchedule:
    def test_uniform_endpoints(self):
        s = StepSchedule.uniform(10)
        assert s.times[0] == 1.0 and s.times[-1] == 0.0 and s.count == 10

    def test_rejects_non_decreasing(self):
        with pytest.raises(ValueError):
            StepSchedule(np.array([1.0, 0.5, 0.5, 0.0]))
        with pytest.raises(ValueError):
            StepSchedule(np.array([0.9, 0.5, 0.0]))
        with pytest.raises(ValueError):
            StepSchedule(np.array([1.0, 0.5, 0.1]))

    def test_json_roundtrip_and_uniform_generation(self):
        s = StepSchedule.from_json({"T": 5})
        assert s.count == 5
        s2 = StepSchedule.from_json(list(s.times))
        assert np.array_equal(s.times, s2.times)
        assert StepSchedule.from_json(4).count == 4

    def test_index_of_requires_exact_time(self):
        s = StepSchedule.uniform(10)
        assert s.index_of(1.0) == 0
        with pytest.raises(ValueError):
            s.index_of(0.123)


class TestFlowSpecValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            FlowSpec(dim=1, weights=np.array([0.5, 0.6]),
                     means=np.zeros((2, 1)), scales=np.array([1.0, 1.0]))

    def test_scales_positive(self):
        with pytest.raises(ValueError):
            FlowSpec.single([0.0], 0.0)

    def test_mean_dimension_checked(self):
        with pytest.raises(ValueError):
            FlowSpec(dim=3, weights=np.array([1.0]),
                     means=np.zeros((1, 2)), scales=np.array([1.0]))

    def test_json_roundtrip(self):
        spec = FlowSpec.from_components(
            2, [(0.25, [1.0, -1.0], 0.5), (0.75, [0.0, 2.0], 1.5)])
        again = FlowSpec.from_json(spec.to_json())
        assert np.array_equal(spec.weights, again.weights)
        assert np.array_equal(spec.means, again.means)
        assert np.array_equal(spec.scales, again.scales)

    def test_latent_state_validation(self):
        with pytest.raises(ValueError):
            LatentState(np.array([1.0]), 1.5)
        with pytest.raises(ValueError):
            LatentState(np.array([np.nan]), 0.5)

import numpy as np
import pytest

from jmdp.core import (
    LambdaWeights,
    MomentCollection2,
    MomentCollectionN,
    StateActionSpace,
    lambda_norm,
    lambda_norm_n,
)
from jmdp.dp import apply_t2, apply_tn, jipe2, jipe_n
from jmdp.env import ExoJmdp, NoiseModel, Policy, build_crc, build_wgw
from jmdp.errors import BudgetError, InvalidInputError
from jmdp.stats import _branch_returns, truncation_horizon

from test_env import anticorrelated_single_state, random_env


def mean_value_oracle(env, policy):
    """Independent policy-evaluation oracle: solve the mean linear system
    built directly from the noise tables."""
    n_s, n_a, n_u = env.g.shape
    n_x = n_s * n_a
    probs = env.noise.probs
    r_bar = env.g @ probs
    p_x = np.zeros((n_x, n_x))
    for s in range(n_s):
        for a in range(n_a):
            for u in range(n_u):
                s1 = env.h[s, a, u]
                for a1 in range(n_a):
                    p_x[s * n_a + a, s1 * n_a + a1] += probs[u] * policy.probs[s1, a1]
    q = np.linalg.solve(np.eye(n_x) - env.gamma * p_x, r_bar.reshape(-1))
    return q


def random_moments(rng, num_x, scale=1.0):
    mu = scale * rng.normal(size=num_x)
    sig = scale * rng.normal(size=(num_x, num_x))
    return MomentCollection2(mu, 0.5 * (sig + sig.T))


class TestApplyT2:
    def test_zero_continuation_means(self):
        env = random_env(2)
        pol = Policy.uniform(env.space)
        out = apply_t2(env, pol, MomentCollection2.zeros(env.space))
        r_bar = env.g @ env.noise.probs
        np.testing.assert_allclose(
            out.m_mu, r_bar.reshape(-1), atol=1e-14
        )

    def test_zero_continuation_coupled_products(self):
        env = anticorrelated_single_state()
        pol = Policy.uniform(env.space)
        out = apply_t2(env, pol, MomentCollection2.zeros(env.space))
        # coupled cross term vanishes while the product of the means is 1/4
        assert out.m_sigma[0, 1] == 0.0
        assert out.m_mu[0] * out.m_mu[1] == pytest.approx(0.25)
        assert out.m_sigma[0, 0] == pytest.approx(0.5)

    def test_cross_state_factorizes_for_zero_input(self):
        env = build_crc(3, 0.9)
        pol = Policy.uniform(env.space)
        out = apply_t2(env, pol, MomentCollection2.zeros(env.space))
        # distinct chain states draw independently: E[R Rt] = 1/4
        x0 = env.space.x(0, 0)
        x1 = env.space.x(1, 1)
        assert out.m_sigma[x0, x1] == pytest.approx(0.25)

    def test_output_symmetric(self):
        env = random_env(9, num_states=4, num_actions=3)
        pol = Policy.uniform(env.space)
        rng = np.random.default_rng(0)
        m = random_moments(rng, env.space.num_x, scale=5.0)
        out = apply_t2(env, pol, m)
        np.testing.assert_array_equal(out.m_sigma, out.m_sigma.T)

    def test_dimension_mismatch(self):
        env = build_crc(3, 0.9)
        with pytest.raises(InvalidInputError):
            apply_t2(env, Policy.uniform(env.space),
                     MomentCollection2.zeros(StateActionSpace(2, 2)))

    @pytest.mark.parametrize("seed", range(5))
    def test_contraction_on_random_pairs(self, seed):
        rng = np.random.default_rng(seed)
        for env in (build_crc(4, 0.9), build_wgw(2, 2, (0, 1), 0.3, 0.9)):
            pol = Policy.uniform(env.space)
            w = LambdaWeights(env.gamma)
            for _ in range(10):
                a = random_moments(rng, env.space.num_x)
                b = random_moments(rng, env.space.num_x)
                lhs = lambda_norm(apply_t2(env, pol, a) - apply_t2(env, pol, b), w)
                rhs = env.gamma * lambda_norm(a - b, w)
                assert lhs <= rhs + 1e-10


class TestJipe2:
    def test_fixed_point_initialization_stops_immediately(self):
        env = build_crc(3, 0.5)
        pol = Policy.uniform(env.space)
        star = jipe2(env, pol, 1e-12).final
        rep = jipe2(env, pol, 1e-6, m0=star)
        assert rep.iterations == 0
        assert rep.residual_trace[0][1] <= 1e-6 * (1 - env.gamma)
        assert rep.certified

    def test_crc_mean_closed_form(self):
        env = build_crc(25, 0.9)
        rep = jipe2(env, Policy.uniform(env.space), 1e-10)
        assert rep.certified
        np.testing.assert_allclose(rep.final.m_mu, 5.0, atol=1e-9)

    def test_residual_trace_contracts(self):
        env = build_crc(25, 0.9)
        rep = jipe2(env, Policy.uniform(env.space), 1e-4)
        rs = [r for _, r in rep.residual_trace]
        for k in range(len(rs) - 1):
            if rs[k] > 1e-13:
                assert rs[k + 1] <= env.gamma * rs[k] + 1e-10

    def test_certificate_bound_fields(self):
        env = build_crc(5, 0.9)
        rep = jipe2(env, Policy.uniform(env.space), 1e-8)
        last = rep.residual_trace[-1][1]
        assert rep.certified_error_bound == pytest.approx(last / (1 - env.gamma))

    def test_max_iter_flags_not_certified(self):
        env = build_crc(5, 0.9)
        rep = jipe2(env, Policy.uniform(env.space), 1e-10, max_iter=3)
        assert not rep.certified
        assert rep.iterations == 3

    def test_mean_channel_matches_linear_solve(self):
        for env in (build_crc(5, 0.9), build_wgw(3, 3, (0, 2), 0.3, 0.8)):
            pol = Policy.uniform(env.space)
            rep = jipe2(env, pol, 1e-12)
            q = mean_value_oracle(env, pol)
            np.testing.assert_allclose(rep.final.m_mu, q, atol=1e-10)


class TestApplyTn:
    def test_order_one_is_mean_backup(self):
        env = random_env(4)
        pol = Policy.uniform(env.space)
        rng = np.random.default_rng(1)
        mu = rng.normal(size=env.space.num_x)
        out_n = apply_tn(env, pol, MomentCollectionN((mu,)))
        out_2 = apply_t2(
            env, pol, MomentCollection2(mu, np.zeros((mu.size, mu.size)))
        )
        np.testing.assert_allclose(out_n.table(1), out_2.m_mu, atol=1e-13)

    @pytest.mark.parametrize(
        "env_fn", [lambda: build_crc(3, 0.8), lambda: build_wgw(2, 2, (0, 1), 0.3, 0.9)]
    )
    def test_order_two_matches_specialized_operator(self, env_fn):
        env = env_fn()
        pol = Policy.uniform(env.space)
        rng = np.random.default_rng(2)
        m2 = random_moments(rng, env.space.num_x, scale=3.0)
        mn = MomentCollectionN((m2.m_mu, m2.m_sigma))
        out_n = apply_tn(env, pol, mn)
        out_2 = apply_t2(env, pol, m2)
        np.testing.assert_allclose(out_n.table(1), out_2.m_mu, atol=1e-12)
        np.testing.assert_allclose(out_n.table(2), out_2.m_sigma, atol=1e-12)

    def test_output_permutation_invariant(self):
        env = build_crc(3, 0.8)
        pol = Policy.uniform(env.space)
        m = MomentCollectionN.zeros(env.space, 3)
        out = apply_tn(env, pol, m)
        t3 = out.table(3)
        np.testing.assert_array_equal(t3, np.swapaxes(t3, 0, 1))
        np.testing.assert_array_equal(t3, np.swapaxes(t3, 0, 2))

    def test_memory_budget_refused(self):
        env = build_crc(3, 0.8)
        with pytest.raises(BudgetError, match="bytes"):
            jipe_n(env, Policy.uniform(env.space), 4, 1e-6,
                   memory_budget_bytes=1000)


class TestJipeN:
    def test_order_two_reproduces_jipe2(self):
        env = build_crc(3, 0.8)
        pol = Policy.uniform(env.space)
        rep2 = jipe2(env, pol, 1e-9)
        final_n, trace_n = jipe_n(env, pol, 2, 1e-9)
        np.testing.assert_allclose(final_n.table(1), rep2.final.m_mu, atol=1e-9)
        np.testing.assert_allclose(final_n.table(2), rep2.final.m_sigma, atol=1e-9)
        rs2 = [r for _, r in rep2.residual_trace]
        rsn = [r for _, r in trace_n]
        assert len(rs2) == len(rsn)
        np.testing.assert_allclose(rs2, rsn, rtol=1e-9, atol=1e-12)

    def test_residual_contraction_order_three(self):
        env = build_crc(3, 0.8)
        final, trace = jipe_n(env, Policy.uniform(env.space), 3, 1e-7)
        rs = [r for _, r in trace]
        for k in range(len(rs) - 1):
            if rs[k] > 1e-12:
                assert rs[k + 1] <= env.gamma * rs[k] + 1e-10
        assert rs[-1] <= 1e-7 * (1 - env.gamma)

    def test_order_one_table_of_higher_order_run(self):
        env = build_crc(3, 0.8)
        pol = Policy.uniform(env.space)
        final3, _ = jipe_n(env, pol, 3, 1e-10)
        final1, _ = jipe_n(env, pol, 1, 1e-10)
        np.testing.assert_allclose(final3.table(1), final1.table(1), atol=1e-9)

    def test_third_moments_match_coupled_rollouts(self):
        env = build_crc(3, 0.8)
        pol = Policy.uniform(env.space)
        final, _ = jipe_n(env, pol, 3, 1e-8)
        n = 60_000
        horizon = truncation_horizon(env.gamma, 1e-5)
        z = _branch_returns(env, pol, 0, (0, 1), n, horizon, 123, "shared-state")
        for combo in [(0, 0, 0), (0, 0, 1), (0, 1, 1)]:
            sample = z[combo[0]] * z[combo[1]] * z[combo[2]]
            est = sample.mean()
            se = sample.std(ddof=1) / np.sqrt(n)
            idx = tuple(env.space.x(0, a) for a in combo)
            exact = final.table(3)[idx]
            assert abs(est - exact) <= 4 * se + 1e-6

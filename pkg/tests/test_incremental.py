import numpy as np
import pytest

from jmdp.core import (
    Index2,
    LambdaWeights,
    MomentCollection2,
    StateActionSpace,
    enumerate_indices,
    lambda_norm,
)
from jmdp.dp import apply_t2, jipe2
from jmdp.env import ExoJmdp, NoiseModel, Policy, build_crc, build_wgw
from jmdp.errors import InvalidInputError
from jmdp.incremental import (
    StepSchedule,
    VisitationScheme,
    noise_bound_constants,
    noise_diagnostic,
    run_incremental,
    sample_backup,
)

from test_env import random_env


def forward_chain(gamma=0.9):
    """Deterministic 3-state, 1-action chain: rewards 0.5, 0.25, then absorbing 0."""
    space = StateActionSpace(3, 1)
    noise = NoiseModel(np.array([1.0]))
    g = np.array([[[0.5]], [[0.25]], [[0.0]]])
    h = np.array([[[1]], [[2]], [[2]]], dtype=np.int64)
    return ExoJmdp(space, noise, g, h, gamma)


class TestStepSchedule:
    def test_harmonic_sequence(self):
        sched = StepSchedule.harmonic(10.0)
        sched.bind(1)
        alphas = [sched.step(0) for _ in range(5)]
        assert alphas == [1.0, 10 / 11, 10 / 12, 10 / 13, 10 / 14]

    def test_harmonic_satisfies_step_conditions(self):
        # alpha_t = c/(c+t): the sum diverges, the squared sum stays bounded.
        c = 10.0
        t = np.arange(200_000)
        alphas = c / (c + t)
        assert alphas.sum() > 50.0
        assert (alphas**2).sum() < c * (c + 1)

    def test_constant_range(self):
        with pytest.raises(InvalidInputError):
            StepSchedule.constant(0.0)
        with pytest.raises(InvalidInputError):
            StepSchedule.constant(1.5)


class TestSampleBackup:
    def test_deterministic_env_mu_backup(self):
        env = forward_chain()
        pol = Policy.uniform(env.space)
        m = MomentCollection2.zeros(env.space)
        value = sample_backup(env, pol, m, Index2("mu", 0), np.random.default_rng(0))
        assert value == 0.5

    def test_crc_cross_term_vanishes_at_zero_moments(self):
        env = build_crc(4, 0.9)
        pol = Policy.uniform(env.space)
        m = MomentCollection2.zeros(env.space)
        rng = np.random.default_rng(5)
        idx = Index2("sigma", env.space.x(0, 0), env.space.x(0, 1))
        for _ in range(100):
            assert sample_backup(env, pol, m, idx, rng) == 0.0

    @pytest.mark.parametrize(
        "index_fn",
        [
            lambda sp: Index2("mu", sp.x(0, 0)),
            lambda sp: Index2("sigma", sp.x(0, 0), sp.x(0, 0)),
            lambda sp: Index2("sigma", sp.x(0, 0), sp.x(0, 1)),
            lambda sp: Index2("sigma", sp.x(0, 0), sp.x(1, 1)),
        ],
        ids=["mu", "diagonal", "same-state", "cross-state"],
    )
    def test_backup_mean_is_exact_coordinate(self, index_fn):
        env = build_crc(3, 0.9)
        pol = Policy.uniform(env.space)
        rng = np.random.default_rng(17)
        mu = rng.normal(size=env.space.num_x)
        sig = rng.normal(size=(env.space.num_x,) * 2)
        m = MomentCollection2(mu, 0.5 * (sig + sig.T))
        idx = index_fn(env.space)
        diag = noise_diagnostic(env, pol, m, idx, 100_000, seed=3)
        assert abs(diag.mean_error) <= 4 * diag.mean_error_se + 1e-12


class TestRunIncremental:
    def test_alpha_one_sweep_reproduces_operator_on_means(self):
        env = forward_chain()
        pol = Policy.uniform(env.space)
        n_idx = len(enumerate_indices(env.space))
        res = run_incremental(
            env, pol, StepSchedule.constant(1.0), VisitationScheme.sweep(),
            num_updates=n_idx, seed=0,
        )
        exact = apply_t2(env, pol, MomentCollection2.zeros(env.space))
        np.testing.assert_array_equal(res.final.m_mu, exact.m_mu)

    def test_same_seed_identical_traces(self):
        env = build_crc(3, 0.9)
        pol = Policy.uniform(env.space)
        star = jipe2(env, pol, 1e-10).final
        runs = [
            run_incremental(
                env, pol, StepSchedule.harmonic(10.0), VisitationScheme.uniform(),
                20_000, seed=42, fixed_point=star, trace_stride=1_000,
            )
            for _ in range(2)
        ]
        assert runs[0].trace == runs[1].trace
        np.testing.assert_array_equal(runs[0].final.m_mu, runs[1].final.m_mu)
        np.testing.assert_array_equal(runs[0].final.m_sigma, runs[1].final.m_sigma)

    def test_symmetry_preserved(self):
        env = build_crc(3, 0.9)
        pol = Policy.uniform(env.space)
        res = run_incremental(
            env, pol, StepSchedule.harmonic(10.0), VisitationScheme.uniform(),
            50_000, seed=1,
        )
        np.testing.assert_array_equal(res.final.m_sigma, res.final.m_sigma.T)

    def test_distance_shrinks_with_budget(self):
        env = build_crc(3, 0.9)
        pol = Policy.uniform(env.space)
        star = jipe2(env, pol, 1e-12).final
        w = LambdaWeights(env.gamma)
        res = run_incremental(
            env, pol, StepSchedule.harmonic(10.0), VisitationScheme.sweep(),
            400_000, seed=0, fixed_point=star, trace_stride=100_000,
        )
        dists = {k: d for k, d, _ in res.trace}
        assert dists[400_000] < dists[100_000]
        assert lambda_norm(res.final - star, w) == pytest.approx(dists[400_000])


class TestNoiseDiagnostic:
    def test_deterministic_env_zero_noise(self):
        env = build_wgw(2, 2, (0, 1), 0.0, 0.9)
        pol = Policy.uniform(env.space)
        m = MomentCollection2.zeros(env.space)
        # deterministic dynamics but policy-randomized next actions: pick a
        # fully deterministic policy to kill all randomness
        det = Policy(np.tile([1.0, 0.0, 0.0, 0.0], (4, 1)))
        diag = noise_diagnostic(env, det, m, Index2("mu", 0), 2_000, seed=0)
        assert diag.mean_error == 0.0
        assert diag.second_moment == 0.0
        assert diag.bound >= 8.0

    def test_crc_zero_moment_bound(self):
        env = build_crc(5, 0.9)
        pol = Policy.uniform(env.space)
        m = MomentCollection2.zeros(env.space)
        idx = Index2("sigma", env.space.x(1, 0), env.space.x(1, 1))
        diag = noise_diagnostic(env, pol, m, idx, 10_000, seed=2)
        assert diag.bound == 8.0
        assert diag.second_moment <= 8.0

    def test_second_moment_bounded_for_random_collections(self):
        env = random_env(21, num_states=3, num_actions=2, gamma=0.7)
        pol = Policy.uniform(env.space)
        rng = np.random.default_rng(0)
        classes = [
            Index2("mu", 2),
            Index2("sigma", 2, 2),
            Index2("sigma", env.space.x(1, 0), env.space.x(1, 1)),
            Index2("sigma", env.space.x(0, 0), env.space.x(2, 1)),
        ]
        for trial in range(5):
            mu = rng.normal(scale=2.0, size=env.space.num_x)
            sig = rng.normal(scale=2.0, size=(env.space.num_x,) * 2)
            m = MomentCollection2(mu, 0.5 * (sig + sig.T))
            for idx in classes:
                diag = noise_diagnostic(env, pol, m, idx, 5_000, seed=trial)
                assert diag.second_moment <= diag.bound

    def test_bound_constants(self):
        c0, c1 = noise_bound_constants(0.9)
        lam = 20.0
        assert c0 == 8.0
        assert c1 == pytest.approx(8.0 * (2 * 0.9 + 0.81 * lam) ** 2)
        c0_small, c1_small = noise_bound_constants(0.05)
        assert c1_small == pytest.approx(
            8.0 * max(0.05**2, (0.1 + 0.05**2 * (2 / 0.95)) ** 2)
        )

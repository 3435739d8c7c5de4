import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jmdp.core import (
    Index2,
    LambdaWeights,
    MomentCollection2,
    MomentCollectionN,
    StateActionSpace,
    enumerate_indices,
    lambda_norm,
    lambda_norm_n,
)
from jmdp.errors import InvalidInputError, InvalidQueryError


def random_collection(rng, num_x, scale=1.0):
    mu = scale * rng.normal(size=num_x)
    sig = scale * rng.normal(size=(num_x, num_x))
    return MomentCollection2(mu, 0.5 * (sig + sig.T))


class TestSpace:
    def test_flat_index_round_trips(self):
        space = StateActionSpace(7, 3)
        seen = set()
        for s in range(7):
            for a in range(3):
                x = space.x(s, a)
                assert space.sa(x) == (s, a)
                seen.add(x)
        assert seen == set(range(21))

    def test_rejects_degenerate_sizes(self):
        with pytest.raises(InvalidInputError):
            StateActionSpace(0, 2)
        with pytest.raises(InvalidInputError):
            StateActionSpace(3, 0)

    def test_out_of_range_queries(self):
        space = StateActionSpace(2, 2)
        with pytest.raises(InvalidQueryError):
            space.x(2, 0)
        with pytest.raises(InvalidQueryError):
            space.sa(4)


class TestLambdaWeights:
    def test_ladder_recursion(self):
        w = LambdaWeights(0.9)
        assert w.lam == pytest.approx(20.0)
        assert w.lam_k(1) == 1.0
        assert w.lam_k(2) == w.lam
        for k in range(1, 6):
            assert w.lam_k(k + 1) == pytest.approx(w.lam * w.lam_k(k))

    def test_gamma_range(self):
        for bad in (0.0, 1.0, -0.2, 1.3):
            with pytest.raises(InvalidInputError):
                LambdaWeights(bad)


class TestMomentCollections:
    def test_sigma_symmetry_enforced(self):
        bad = np.zeros((2, 2))
        bad[0, 1] = 1.0
        with pytest.raises(InvalidInputError):
            MomentCollection2(np.zeros(2), bad)

    def test_tables_are_read_only(self):
        m = MomentCollection2.zeros(StateActionSpace(2, 1))
        with pytest.raises(ValueError):
            m.m_mu[0] = 1.0

    def test_order_tables_must_be_permutation_invariant(self):
        t1 = np.zeros(2)
        t2 = np.zeros((2, 2))
        t2[0, 1] = 3.0
        with pytest.raises(InvalidInputError):
            MomentCollectionN((t1, t2))

    def test_order3_zeros_shape(self):
        m = MomentCollectionN.zeros(StateActionSpace(2, 2), 3)
        assert m.order == 3
        assert m.table(3).shape == (4, 4, 4)


class TestLambdaNorm:
    def test_zero_case(self):
        space = StateActionSpace(3, 2)
        w = LambdaWeights(0.9)
        assert lambda_norm(MomentCollection2.zeros(space), w) == 0.0

    def test_mu_only(self):
        space = StateActionSpace(3, 2)
        w = LambdaWeights(0.9)
        m = MomentCollection2(np.ones(6), np.zeros((6, 6)))
        assert lambda_norm(m, w) == 1.0

    def test_sigma_scaling(self):
        space = StateActionSpace(3, 2)
        w = LambdaWeights(0.9)  # lam = 20
        m = MomentCollection2(np.zeros(6), np.full((6, 6), 40.0))
        assert lambda_norm(m, w) == pytest.approx(2.0)

    def test_nonfinite_rejected(self):
        mu = np.zeros(2)
        mu[0] = np.inf
        m = MomentCollection2(mu, np.zeros((2, 2)))
        with pytest.raises(InvalidInputError):
            lambda_norm(m, LambdaWeights(0.5))

    def test_order_one_is_sup_norm(self):
        w = LambdaWeights(0.9)
        m = MomentCollectionN((np.full(4, -2.5),))
        assert lambda_norm_n(m, w) == 2.5

    def test_order_three_scaling(self):
        # lam_3 = (2/(1-gamma))^2 = 400 at gamma = 0.9
        w = LambdaWeights(0.9)
        space = StateActionSpace(1, 2)
        m = MomentCollectionN(
            (np.zeros(2), np.zeros((2, 2)), np.full((2, 2, 2), 400.0))
        )
        assert lambda_norm_n(m, w) == pytest.approx(1.0)

    def test_order_two_matches_bitwise(self):
        rng = np.random.default_rng(3)
        w = LambdaWeights(0.77)
        for _ in range(100):
            m2 = random_collection(rng, 6, scale=rng.uniform(0.1, 50.0))
            mn = MomentCollectionN((m2.m_mu, m2.m_sigma))
            assert lambda_norm_n(mn, w) == lambda_norm(m2, w)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), gamma=st.floats(0.05, 0.95))
    def test_norm_axioms(self, seed, gamma):
        rng = np.random.default_rng(seed)
        w = LambdaWeights(gamma)
        a = random_collection(rng, 4)
        b = random_collection(rng, 4)
        c = float(rng.normal())
        tri = lambda_norm(
            MomentCollection2(a.m_mu + b.m_mu, a.m_sigma + b.m_sigma), w
        )
        assert tri <= lambda_norm(a, w) + lambda_norm(b, w) + 1e-12
        hom = lambda_norm(MomentCollection2(c * a.m_mu, c * a.m_sigma), w)
        assert hom == pytest.approx(abs(c) * lambda_norm(a, w), abs=1e-12)


class TestEnumerateIndices:
    @pytest.mark.parametrize(
        "s,a,count", [(1, 1, 2), (2, 2, 20), (3, 4, 156)]
    )
    def test_counts(self, s, a, count):
        assert len(enumerate_indices(StateActionSpace(s, a))) == count

    def test_order_and_both_orientations(self):
        space = StateActionSpace(2, 1)
        idx = enumerate_indices(space)
        assert idx[0] == Index2("mu", 0)
        assert idx[1] == Index2("mu", 1)
        sigma = [(i.x, i.x2) for i in idx[2:]]
        assert (0, 1) in sigma and (1, 0) in sigma
        assert len(idx) == len(set((i.kind, i.x, i.x2) for i in idx))

    def test_index_validation(self):
        with pytest.raises(InvalidQueryError):
            Index2("sigma", 0)
        with pytest.raises(InvalidQueryError):
            Index2("mu", 0, 1)
        with pytest.raises(InvalidQueryError):
            Index2("cov", 0, 1)

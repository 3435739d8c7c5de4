"""Gap statistics, one-sided tail bounds, correlation matrices, and the coupled
Monte Carlo oracle used to ground-truth every moment computation.

The oracle simulates counterfactual return branches under the same coupling the
dynamic-programming operator encodes: branches occupying a common state share
that step's noise draw, branches whose full coordinates coincide share the next
action as well (they denote one random return), and branches at distinct states
evolve on independent draws. An `independent` continuation mode is also
available, where cross-branch coupling is confined to the very first step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm as _norm

from .core import MomentCollection2, StateActionSpace
from .env import ExoJmdp, Policy, child_seed
from .errors import AssumptionError, InvalidInputError, InvalidQueryError

__all__ = [
    "GapReport",
    "CorrMatrix",
    "McBlock",
    "EcdfRatio",
    "truncation_horizon",
    "gap_stats",
    "cantelli_bound",
    "corr_matrix",
    "mc_oracle",
    "mc_state_block",
    "chebyshev_ecdf",
    "build_gap_report",
    "write_ecdf_csv",
]

DEGENERATE_VAR_TOL = 1e-12


def truncation_horizon(gamma: float, tol: float) -> int:
    """Smallest T with gamma^T / (1 - gamma) <= tol; valid because rewards
    lie in [0, 1], so the discarded tail is at most that geometric sum."""
    if tol <= 0.0:
        raise InvalidInputError(f"truncation tolerance must be > 0, got {tol}")
    t = int(np.ceil(np.log(tol * (1.0 - gamma)) / np.log(gamma)))
    return max(t, 1)


def gap_stats(
    space: StateActionSpace,
    m: MomentCollection2,
    s: int,
    a: int,
    a_tilde: int,
) -> tuple[float, float]:
    """Mean and variance of the return gap between two actions at a state.

    variance = Sig(x,x) + Sig(y,y) - 2 Sig(x,y) - mean^2, clamped at zero if a
    numerically negative value appears.
    """
    if a == a_tilde:
        raise InvalidQueryError("gap requires two distinct actions")
    x = space.x(s, a)
    y = space.x(s, a_tilde)
    mean = float(m.m_mu[x] - m.m_mu[y])
    var = float(
        m.m_sigma[x, x] + m.m_sigma[y, y] - 2.0 * m.m_sigma[x, y] - mean**2
    )
    if var < 0.0:
        import warnings

        if var < -1e-8:
            warnings.warn(
                f"gap variance clamped from {var:.3e} to 0", RuntimeWarning
            )
        var = 0.0
    return mean, var


def cantelli_bound(mean: float, variance: float) -> float:
    """One-sided bound on P(gap <= 0): variance / (variance + mean^2)."""
    if variance < 0.0:
        raise InvalidInputError(f"variance must be >= 0, got {variance}")
    if mean <= 0.0:
        raise AssumptionError(
            f"bound needs a strictly positive gap mean, got {mean}"
        )
    return variance / (variance + mean**2)


@dataclass(frozen=True)
class CorrMatrix:
    """Per-state action covariance and correlation of returns.

    Correlations involving a variance below the degenerate threshold are NaN
    (an explicit undefined marker), except the diagonal which is 1 by
    convention.
    """

    state: int
    cov: np.ndarray
    corr: np.ndarray


def corr_matrix(
    space: StateActionSpace,
    m: MomentCollection2,
    s: int,
    degenerate_tol: float = DEGENERATE_VAR_TOL,
) -> CorrMatrix:
    n_a = space.num_actions
    xs = np.array([space.x(s, a) for a in range(n_a)])
    mu = m.m_mu[xs]
    block = m.m_sigma[np.ix_(xs, xs)]
    cov = block - np.outer(mu, mu)
    var = np.diag(cov).copy()
    corr = np.full((n_a, n_a), np.nan)
    ok = var > degenerate_tol
    denom = np.sqrt(np.outer(np.where(ok, var, np.nan), np.where(ok, var, np.nan)))
    with np.errstate(invalid="ignore"):
        corr = cov / denom
    np.fill_diagonal(corr, 1.0)
    return CorrMatrix(s, cov, corr)


# ---------------------------------------------------------------------------
# Coupled Monte Carlo oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McBlock:
    """Moment estimates from coupled rollouts of several action branches at one state.

    All branches start at `state`; branch j executes actions[j] first and the
    policy afterwards. sigma[i, j] estimates the mixed second moment of the
    branch returns; gap_* tables are indexed by ordered branch pairs.
    """

    state: int
    actions: tuple
    num_rollouts: int
    horizon: int
    mu: np.ndarray
    mu_se: np.ndarray
    sigma: np.ndarray
    sigma_se: np.ndarray
    gap_mean: np.ndarray
    gap_mean_se: np.ndarray
    gap_var: np.ndarray
    gap_var_se: np.ndarray
    inferiority: np.ndarray
    inferiority_se: np.ndarray
    confidence: float

    @property
    def z_value(self) -> float:
        return float(_norm.ppf(0.5 + self.confidence / 2.0))

    def mu_halfwidth(self) -> np.ndarray:
        return self.z_value * self.mu_se

    def sigma_halfwidth(self) -> np.ndarray:
        return self.z_value * self.sigma_se


def _draw_actions(pol_cdf: np.ndarray, states: np.ndarray, r: np.ndarray) -> np.ndarray:
    return (r[:, None] >= pol_cdf[states]).sum(axis=1)


def _branch_returns(
    env: ExoJmdp,
    policy: Policy,
    s: int,
    actions,
    num_rollouts: int,
    horizon: int,
    seed: int,
    continuation_coupling: str,
) -> np.ndarray:
    """Simulate coupled branch returns; rows are branches, columns rollouts."""
    n = num_rollouts
    k = len(actions)
    n_a = env.space.num_actions
    g_x = env.g.reshape(env.space.num_x, env.noise.support_size)
    h_x = env.h.reshape(env.space.num_x, env.noise.support_size)
    noise_cdf = np.cumsum(env.noise.probs)
    noise_cdf[-1] = 1.0
    pol_cdf = np.cumsum(policy.probs, axis=1)
    pol_cdf[:, -1] = 1.0

    rng = np.random.default_rng(child_seed(seed, 0))
    states = np.full((k, n), s, dtype=np.int64)
    acts = np.stack([np.full(n, a, dtype=np.int64) for a in actions])
    z = np.zeros((k, n))
    disc = 1.0
    for t in range(horizon):
        u = np.searchsorted(noise_cdf, rng.random((k, n)), side="right")
        # Share the noise draw with the lowest-indexed branch at the same state.
        if continuation_coupling == "shared-state" or t == 0:
            for i in range(1, k):
                taken = np.zeros(n, dtype=bool)
                for j in range(i):
                    mask = (states[i] == states[j]) & ~taken
                    u[i] = np.where(mask, u[j], u[i])
                    taken |= mask
        x = states * n_a + acts
        rew = g_x[x, u]
        z += disc * rew
        nxt = h_x[x, u]
        r_act = rng.random((k, n))
        new_acts = np.empty_like(acts)
        for i in range(k):
            new_acts[i] = _draw_actions(pol_cdf, nxt[i], r_act[i])
        if continuation_coupling == "shared-state":
            # Identical coordinates denote one return: share the next action too.
            for i in range(1, k):
                taken = np.zeros(n, dtype=bool)
                for j in range(i):
                    mask = (states[i] == states[j]) & (acts[i] == acts[j]) & ~taken
                    new_acts[i] = np.where(mask, new_acts[j], new_acts[i])
                    taken |= mask
        states = nxt
        acts = new_acts
        disc *= env.gamma
    return z


def mc_state_block(
    env: ExoJmdp,
    policy: Policy,
    s: int,
    actions,
    num_rollouts: int,
    trunc_tol: float,
    seed: int,
    confidence: float = 0.95,
    continuation_coupling: str = "shared-state",
) -> McBlock:
    """Coupled-rollout estimates of all first/second moments and pairwise gap
    functionals for the given action branches at one state."""
    if continuation_coupling not in ("shared-state", "independent"):
        raise InvalidQueryError(
            f"unknown continuation coupling {continuation_coupling!r}"
        )
    acts = tuple(int(a) for a in actions)
    if not acts:
        raise InvalidQueryError("need at least one action branch")
    for a in acts:
        if not (0 <= a < env.space.num_actions):
            raise InvalidQueryError(f"action {a} out of range")
    horizon = truncation_horizon(env.gamma, trunc_tol)
    z = _branch_returns(
        env, policy, s, acts, num_rollouts, horizon, seed, continuation_coupling
    )
    k, n = z.shape
    mu = z.mean(axis=1)
    mu_se = z.std(axis=1, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(k)
    prods = z[:, None, :] * z[None, :, :]
    sigma = prods.mean(axis=2)
    sigma_se = (
        prods.std(axis=2, ddof=1) / np.sqrt(n) if n > 1 else np.zeros((k, k))
    )
    gaps = z[:, None, :] - z[None, :, :]
    gap_mean = gaps.mean(axis=2)
    gap_mean_se = gaps.std(axis=2, ddof=1) / np.sqrt(n) if n > 1 else np.zeros((k, k))
    centered = gaps - gap_mean[:, :, None]
    gap_var = (centered**2).sum(axis=2) / max(n - 1, 1)
    m4 = (centered**4).mean(axis=2)
    gap_var_se = np.sqrt(np.maximum(m4 - gap_var**2, 0.0) / n)
    inferior = (gaps <= 0.0).mean(axis=2)
    inferiority_se = np.sqrt(inferior * (1.0 - inferior) / n)
    return McBlock(
        state=s,
        actions=acts,
        num_rollouts=n,
        horizon=horizon,
        mu=mu,
        mu_se=mu_se,
        sigma=sigma,
        sigma_se=sigma_se,
        gap_mean=gap_mean,
        gap_mean_se=gap_mean_se,
        gap_var=gap_var,
        gap_var_se=gap_var_se,
        inferiority=inferior,
        inferiority_se=inferiority_se,
        confidence=confidence,
    )


def mc_oracle(
    env: ExoJmdp,
    policy: Policy,
    s: int,
    actions,
    num_rollouts: int,
    trunc_tol: float,
    seed: int,
    confidence: float = 0.95,
    continuation_coupling: str = "shared-state",
) -> McBlock:
    """Ground-truth moments for a single action or an action pair at a state."""
    acts = (actions,) if np.isscalar(actions) else tuple(actions)
    if len(acts) not in (1, 2):
        raise InvalidQueryError("oracle takes a single action or a pair")
    if len(acts) == 2 and acts[0] == acts[1]:
        raise InvalidQueryError("paired actions must be distinct")
    return mc_state_block(
        env,
        policy,
        s,
        acts,
        num_rollouts,
        trunc_tol,
        seed,
        confidence,
        continuation_coupling,
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GapReport:
    state: int
    action_a: int
    action_b: int
    gap_mean: float
    gap_variance: float
    cantelli: float | None
    mc_gap_mean: float | None = None
    mc_gap_variance: float | None = None
    mc_inferiority_prob: float | None = None
    mc_ci_halfwidths: tuple | None = None


def build_gap_report(
    space: StateActionSpace,
    m: MomentCollection2,
    s: int,
    a: int,
    b: int,
    mc: McBlock | None = None,
) -> GapReport:
    mean, var = gap_stats(space, m, s, a, b)
    bound = cantelli_bound(mean, var) if mean > 0.0 else None
    if mc is None:
        return GapReport(s, a, b, mean, var, bound)
    i, j = mc.actions.index(a), mc.actions.index(b)
    z = mc.z_value
    return GapReport(
        s,
        a,
        b,
        mean,
        var,
        bound,
        mc_gap_mean=float(mc.gap_mean[i, j]),
        mc_gap_variance=float(mc.gap_var[i, j]),
        mc_inferiority_prob=float(mc.inferiority[i, j]),
        mc_ci_halfwidths=(
            float(z * mc.gap_mean_se[i, j]),
            float(z * mc.gap_var_se[i, j]),
            float(z * mc.inferiority_se[i, j]),
        ),
    )


@dataclass(frozen=True)
class EcdfRatio:
    state: int
    action_a: int
    action_b: int
    ratio_jipe: float
    ratio_mc: float
    mc_ci: float
    inferiority: float
    bound_jipe: float
    bound_mc: float
    note: str = ""


def chebyshev_ecdf(
    env: ExoJmdp,
    policy: Policy,
    m: MomentCollection2,
    pairs,
    num_rollouts: int,
    seed: int,
    trunc_tol: float = 1e-6,
    confidence: float = 0.95,
) -> list[EcdfRatio]:
    """Ratios of empirical inferiority frequency to its one-sided moment bound.

    Each ratio is computed twice: with the bound from the solver moments and
    from the Monte Carlo moments. Pairs whose gap mean is not strictly
    positive under both are skipped with a note.
    """
    out: list[EcdfRatio] = []
    blocks: dict = {}
    for s, a, b in pairs:
        mean, var = gap_stats(env.space, m, s, a, b)
        if s not in blocks:
            blocks[s] = mc_state_block(
                env,
                policy,
                s,
                tuple(range(env.space.num_actions)),
                num_rollouts,
                trunc_tol,
                child_seed(seed, s),
                confidence,
            )
        mc = blocks[s]
        mc_mean = float(mc.gap_mean[a, b])
        mc_var = float(mc.gap_var[a, b])
        p_hat = float(mc.inferiority[a, b])
        ci = float(mc.z_value * mc.inferiority_se[a, b])
        if mean <= 0.0 or mc_mean <= 0.0:
            out.append(
                EcdfRatio(
                    s, a, b, float("nan"), float("nan"), ci, p_hat,
                    float("nan"), float("nan"),
                    note="skipped: non-positive gap mean",
                )
            )
            continue
        b_dp = cantelli_bound(mean, var)
        b_mc = cantelli_bound(mc_mean, mc_var)
        out.append(
            EcdfRatio(
                s, a, b,
                p_hat / b_dp if b_dp > 0 else float("inf"),
                p_hat / b_mc if b_mc > 0 else float("inf"),
                ci, p_hat, b_dp, b_mc,
            )
        )
    return out


def write_ecdf_csv(ratios: list[EcdfRatio], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["state", "action_a", "action_b", "ratio_jipe", "ratio_mc", "mc_ci"]
        )
        for r in ratios:
            writer.writerow(
                [r.state, r.action_a, r.action_b,
                 repr(r.ratio_jipe), repr(r.ratio_mc), repr(r.mc_ci)]
            )

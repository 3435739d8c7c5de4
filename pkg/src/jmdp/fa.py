"""Linear function approximation with a PSD-structured second-moment parameterization.

The mean table is fit by weighted least squares over a feature span; the
second-moment table by the nearest (in the product-weighted Frobenius norm)
quadratic form phi(x)' Theta phi(y) with Theta in the PSD cone. The projected
fixed-point iteration applies the exact tabular backup to the densified
approximant and projects back, with convergence governed by the coupling
coefficient of the two-branch transition kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .core import MomentCollection2
from .dp import apply_t2
from .env import ExoJmdp, Policy, marginal_kernel, marginal_mdp
from .errors import (
    AssumptionError,
    BudgetError,
    DivergenceError,
    FeatureRankError,
    InvalidInputError,
    InvalidQueryError,
)

__all__ = [
    "FeatureMap",
    "LinearMoments",
    "StationaryDist",
    "CouplingReport",
    "ProjectedReport",
    "stationary_distribution",
    "project_mu",
    "project_sigma_psd",
    "projected_jipe2",
    "coupling_coefficient",
    "beta_weight",
    "nu_norm",
    "nu2_norm",
    "beta_norm",
    "identity_features",
    "state_poly_features",
    "state_ramp_features",
]


@dataclass(frozen=True)
class FeatureMap:
    """Feature matrix over the flat state-action index; must have full column rank."""

    phi: np.ndarray
    rank_tol: float = 1e-10

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float, copy=True)
        if phi.ndim != 2 or phi.shape[0] < phi.shape[1]:
            raise FeatureRankError(
                f"feature matrix must be tall (got shape {phi.shape})"
            )
        sv = np.linalg.svd(phi, compute_uv=False)
        if sv[-1] <= self.rank_tol * max(sv[0], 1.0):
            raise FeatureRankError(
                f"feature matrix is rank deficient (smallest singular value {sv[-1]:.3e})"
            )
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def dim(self) -> int:
        return self.phi.shape[1]

    @property
    def num_x(self) -> int:
        return self.phi.shape[0]


@dataclass(frozen=True)
class LinearMoments:
    """Mean weights and PSD quadratic-form parameter of the approximant."""

    theta_mu: np.ndarray
    theta_sigma: np.ndarray
    psd_tol: float = 1e-10

    def __post_init__(self):
        tm = np.array(self.theta_mu, dtype=float, copy=True)
        ts = np.array(self.theta_sigma, dtype=float, copy=True)
        if tm.ndim != 1 or ts.shape != (tm.size, tm.size):
            raise InvalidInputError("parameter shapes inconsistent")
        if np.max(np.abs(ts - ts.T), initial=0.0) > 1e-12:
            raise InvalidInputError("theta_sigma must be symmetric")
        eig = np.linalg.eigvalsh(ts) if ts.size else np.array([0.0])
        if eig[0] < -self.psd_tol:
            raise InvalidInputError(
                f"theta_sigma must be PSD (min eigenvalue {eig[0]:.3e})"
            )
        tm.setflags(write=False)
        ts.setflags(write=False)
        object.__setattr__(self, "theta_mu", tm)
        object.__setattr__(self, "theta_sigma", ts)

    def mu_table(self, features: FeatureMap) -> np.ndarray:
        return features.phi @ self.theta_mu

    def sigma_table(self, features: FeatureMap) -> np.ndarray:
        return features.phi @ self.theta_sigma @ features.phi.T

    def densify(self, features: FeatureMap) -> MomentCollection2:
        sig = self.sigma_table(features)
        return MomentCollection2(self.mu_table(features), 0.5 * (sig + sig.T))


@dataclass(frozen=True)
class StationaryDist:
    """State-action weighting; source records whether it is the stationary law
    of the policy's chain or the uniform fallback used when ergodicity fails."""

    nu: np.ndarray
    source: str
    note: str = ""


def _chain_period(adj: np.ndarray) -> int:
    """Period of a strongly connected directed graph via BFS-level gcd."""
    n = adj.shape[0]
    level = np.full(n, -1, dtype=np.int64)
    level[0] = 0
    frontier = [0]
    edges = []
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.nonzero(adj[u])[0]:
                edges.append((u, int(v)))
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(int(v))
        frontier = nxt
    g = 0
    for u, v in edges:
        g = math.gcd(g, int(level[u]) + 1 - int(level[v]))
    return abs(g) if g != 0 else 1


def stationary_distribution(
    env: ExoJmdp, policy: Policy, tol: float = 1e-12, max_iter: int = 200_000
) -> StationaryDist:
    """Invariant state-action law of the policy's marginal chain, by power
    iteration; falls back to uniform (with a diagnostic note) when the chain is
    not irreducible and aperiodic."""
    kernel = marginal_kernel(env, policy)
    n = kernel.shape[0]
    adj = kernel > 0.0
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    if n_comp != 1:
        return StationaryDist(
            np.full(n, 1.0 / n),
            "uniform-fallback",
            f"chain is not irreducible ({n_comp} strongly connected components); "
            "the positive-stationary-weight assumption fails",
        )
    period = _chain_period(adj)
    if period != 1:
        return StationaryDist(
            np.full(n, 1.0 / n),
            "uniform-fallback",
            f"chain is periodic (period {period}); "
            "the positive-stationary-weight assumption fails",
        )
    nu = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        new = nu @ kernel
        new /= new.sum()
        if float(np.abs(new - nu).sum()) <= tol:
            nu = new
            break
        nu = new
    if float(np.max(np.abs(nu @ kernel - nu))) > 1e-10:
        return StationaryDist(
            np.full(n, 1.0 / n),
            "uniform-fallback",
            "power iteration failed to certify invariance at the requested tolerance",
        )
    return StationaryDist(nu, "stationary")


def nu_norm(f: np.ndarray, nu: np.ndarray) -> float:
    return float(np.sqrt(np.sum(nu * np.asarray(f) ** 2)))


def nu2_norm(table: np.ndarray, nu: np.ndarray) -> float:
    return float(np.sqrt(np.einsum("i,j,ij->", nu, nu, np.asarray(table) ** 2)))


def beta_norm(m: MomentCollection2, nu: np.ndarray, beta: float) -> float:
    """max(||m_mu||_nu, beta * ||m_sigma||_{nu x nu})."""
    return max(nu_norm(m.m_mu, nu), beta * nu2_norm(m.m_sigma, nu))


def project_mu(target: np.ndarray, features: FeatureMap, nu: np.ndarray) -> np.ndarray:
    """Weighted least-squares fit of the mean table onto the feature span."""
    target = np.asarray(target, dtype=float)
    phi = features.phi
    if target.shape != (phi.shape[0],):
        raise InvalidInputError(
            f"target has shape {target.shape}, features cover {phi.shape[0]} coordinates"
        )
    w_phi = phi * nu[:, None]
    gram = phi.T @ w_phi
    theta = np.linalg.solve(gram, w_phi.T @ target)
    resid = phi @ theta - target
    check = float(np.max(np.abs(w_phi.T @ resid)))
    scale = max(float(np.max(np.abs(target))), 1.0)
    if check > 1e-7 * scale:
        raise ArithmeticError(
            f"projection residual not orthogonal to the span (|Phi' D r| = {check:.3e})"
        )
    return theta


def project_sigma_psd(
    target: np.ndarray, features: FeatureMap, nu: np.ndarray
) -> tuple[np.ndarray, float]:
    """Nearest PSD quadratic form to the target table in the product-weighted norm.

    Closed form: with B = D^(1/2) Phi = QR, the optimum is
    Theta = R^-1 clip(Q' D^(1/2) S D^(1/2) Q) R^-T, where clip zeroes negative
    eigenvalues. Returns (Theta, asymmetry) where asymmetry is the largest
    deviation of the raw target from symmetry (the target is symmetrized first).
    """
    s_raw = np.asarray(target, dtype=float)
    n = features.num_x
    if s_raw.shape != (n, n):
        raise InvalidInputError(f"target must be {n}x{n}, got {s_raw.shape}")
    asym = float(np.max(np.abs(s_raw - s_raw.T), initial=0.0))
    s_sym = 0.5 * (s_raw + s_raw.T)
    d_half = np.sqrt(nu)
    b = features.phi * d_half[:, None]
    q, r = np.linalg.qr(b)
    if np.min(np.abs(np.diag(r))) <= 1e-12 * max(np.max(np.abs(np.diag(r))), 1.0):
        raise FeatureRankError("weighted feature matrix is numerically rank deficient")
    s_w = d_half[:, None] * s_sym * d_half[None, :]
    core = q.T @ s_w @ q
    core = 0.5 * (core + core.T)
    eigval, eigvec = np.linalg.eigh(core)
    clipped = (eigvec * np.maximum(eigval, 0.0)) @ eigvec.T
    r_inv = np.linalg.inv(r)
    theta = r_inv @ clipped @ r_inv.T
    theta = 0.5 * (theta + theta.T)
    return theta, asym


def beta_weight(gamma: float, sqrt_c_rho: float) -> tuple[float, float]:
    """Midpoint weight for the mixed norm, and the implied contraction factor.

    beta = (1 - gamma^2 sqrt_c_rho) / (4 gamma); kappa = max(gamma,
    2 beta gamma + gamma^2 sqrt_c_rho) < 1. Requires gamma^2 sqrt_c_rho < 1.
    """
    if sqrt_c_rho < 0.0:
        raise InvalidInputError(f"sqrt_c_rho must be >= 0, got {sqrt_c_rho}")
    product = gamma**2 * sqrt_c_rho
    if product >= 1.0:
        raise AssumptionError(
            f"coupling too strong for the projected scheme: "
            f"gamma^2 * sqrt_c_rho = {product:.6g} >= 1"
        )
    beta = (1.0 - product) / (4.0 * gamma)
    kappa = max(gamma, 2.0 * beta * gamma + product)
    return beta, kappa


@dataclass(frozen=True)
class CouplingReport:
    sqrt_c_rho: float
    gamma: float
    product: float  # gamma^2 * sqrt_c_rho
    satisfied: bool
    mode: str


def _pair_kernel(env: ExoJmdp, policy: Policy, mode: str) -> np.ndarray:
    """Dense two-branch transition kernel over X^2.

    mode 'same_state': branches at a common state draw one shared noise value
    (their joint one-step law); branches at distinct states, and a branch pair
    addressing one identical coordinate, evolve as independent marginal queries.
    mode 'global': a single exogenous draw drives both branches at every row,
    whatever their states.
    """
    n_s, n_a = env.space.num_states, env.space.num_actions
    n_x = env.space.num_x
    pi = policy.probs
    probs = env.noise.probs
    h = env.h
    if mode == "global":
        # succ_pi[x, u, x'] = pi(a' | h(x, u)) laid out over x'.
        succ_pi = np.zeros((n_x, env.noise.support_size, n_x))
        for s in range(n_s):
            for a in range(n_a):
                x = s * n_a + a
                for u in range(env.noise.support_size):
                    succ_pi[x, u, h[s, a, u] * n_a : h[s, a, u] * n_a + n_a] = pi[
                        h[s, a, u]
                    ]
        kernel = np.einsum("u,auc,bud->abcd", probs, succ_pi, succ_pi)
        return kernel.reshape(n_x * n_x, n_x * n_x)
    if mode != "same_state":
        raise InvalidQueryError(f"unknown pair-coupling mode {mode!r}")
    p1 = marginal_kernel(env, policy)
    kernel = np.kron(p1, p1).reshape(n_x, n_x, n_x, n_x)
    for s in range(n_s):
        for a in range(n_a):
            for b in range(n_a):
                if a == b:
                    continue  # identical coordinates keep the product row
                x, y = s * n_a + a, s * n_a + b
                row = np.zeros((n_x, n_x))
                for u in range(env.noise.support_size):
                    sa, sb = h[s, a, u], h[s, b, u]
                    row[sa * n_a : sa * n_a + n_a, sb * n_a : sb * n_a + n_a] += (
                        probs[u] * np.outer(pi[sa], pi[sb])
                    )
                kernel[x, y] = row
    return kernel.reshape(n_x * n_x, n_x * n_x)


def coupling_coefficient(
    env: ExoJmdp,
    policy: Policy,
    nu: np.ndarray,
    tol: float = 1e-10,
    mode: str = "same_state",
    max_pairs: int = 20_000,
) -> CouplingReport:
    """Operator norm of the two-branch kernel in the product-weighted geometry.

    Computed as the largest singular value of D^(1/2) P2 D^(-1/2) with
    D = diag(nu x nu), by power iteration on the normal matrix to `tol`.
    """
    n_x = env.space.num_x
    if n_x * n_x > max_pairs:
        raise BudgetError(
            f"dense pair kernel needs {n_x * n_x} rows, cap is {max_pairs}"
        )
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (n_x,) or np.any(nu <= 0.0):
        raise InvalidInputError("nu must be a strictly positive vector over X")
    p2 = _pair_kernel(env, policy, mode)
    w = np.kron(nu, nu)
    a = (np.sqrt(w)[:, None] * p2) / np.sqrt(w)[None, :]
    ata = a.T @ a
    v = np.full(ata.shape[0], 1.0 / np.sqrt(ata.shape[0]))
    lam = 0.0
    for _ in range(100_000):
        nv = ata @ v
        new_lam = float(np.linalg.norm(nv))
        if new_lam == 0.0:
            lam = 0.0
            break
        nv /= new_lam
        if abs(new_lam - lam) <= tol * max(new_lam, 1.0):
            lam = new_lam
            v = nv
            break
        lam = new_lam
        v = nv
    sqrt_c = float(np.sqrt(lam))
    product = env.gamma**2 * sqrt_c
    return CouplingReport(sqrt_c, env.gamma, product, product < 1.0, mode)


@dataclass(frozen=True)
class ProjectedReport:
    moments: LinearMoments
    distances: list  # successive beta-weighted distances, one per iteration
    converged: bool
    iterations: int
    beta: float
    kappa: float | None
    sqrt_c_rho: float | None


def projected_jipe2(
    env: ExoJmdp,
    policy: Policy,
    features: FeatureMap,
    nu: np.ndarray,
    epsilon: float,
    max_iter: int = 10_000,
    beta: float | None = None,
    sqrt_c_rho: float | None = None,
    divergence_window: int = 10,
) -> ProjectedReport:
    """Projected fixed-point iteration: exact backup on the densified tables,
    then weighted least squares for the mean and traffic into the PSD cone for
    the second moment.

    Stops when the beta-weighted distance between successive densified
    approximants drops below epsilon. If that distance grows for
    `divergence_window` consecutive iterations the run aborts with a
    diagnostic quoting gamma^2 * sqrt_c_rho.
    """
    if epsilon <= 0.0:
        raise InvalidInputError(f"epsilon must be > 0, got {epsilon}")
    nu = np.asarray(nu, dtype=float)
    kappa = None
    if sqrt_c_rho is None:
        try:
            rep = coupling_coefficient(env, policy, nu)
            sqrt_c_rho = rep.sqrt_c_rho
        except BudgetError:
            sqrt_c_rho = None
    if beta is None:
        if sqrt_c_rho is not None and env.gamma**2 * sqrt_c_rho < 1.0:
            beta, kappa = beta_weight(env.gamma, sqrt_c_rho)
        else:
            beta = 1.0
    elif sqrt_c_rho is not None and env.gamma**2 * sqrt_c_rho < 1.0:
        _, kappa = beta_weight(env.gamma, sqrt_c_rho)

    d = features.dim
    current = LinearMoments(np.zeros(d), np.zeros((d, d)))
    dense = current.densify(features)
    distances: list = []
    grow_streak = 0
    for k in range(max_iter):
        backed = apply_t2(env, policy, dense)
        theta_mu = project_mu(backed.m_mu, features, nu)
        theta_sig, _ = project_sigma_psd(backed.m_sigma, features, nu)
        new = LinearMoments(theta_mu, theta_sig)
        new_dense = new.densify(features)
        dist = beta_norm(new_dense - dense, nu, beta)
        distances.append(dist)
        if len(distances) >= 2 and distances[-1] > distances[-2]:
            grow_streak += 1
        else:
            grow_streak = 0
        if grow_streak >= divergence_window:
            product = (
                env.gamma**2 * sqrt_c_rho if sqrt_c_rho is not None else float("nan")
            )
            raise DivergenceError(
                f"successive-iterate distance grew for {divergence_window} "
                f"consecutive iterations (last {dist:.3e}); "
                f"gamma^2 * sqrt_c_rho = {product:.6g} "
                f"(contraction requires < 1)"
            )
        current, dense = new, new_dense
        if dist <= epsilon:
            return ProjectedReport(current, distances, True, k + 1, beta, kappa, sqrt_c_rho)
    return ProjectedReport(current, distances, False, max_iter, beta, kappa, sqrt_c_rho)


# ---------------------------------------------------------------------------
# Feature constructions
# ---------------------------------------------------------------------------


def identity_features(num_x: int) -> FeatureMap:
    return FeatureMap(np.eye(num_x))


def state_poly_features(num_states: int, num_actions: int, degree: int) -> FeatureMap:
    """Action-independent polynomial features of the normalized state index."""
    if degree < 0:
        raise InvalidInputError(f"degree must be >= 0, got {degree}")
    t = np.arange(num_states, dtype=float)
    t = t / max(num_states - 1, 1)
    cols = np.stack([t**p for p in range(degree + 1)], axis=1)
    phi = np.repeat(cols, num_actions, axis=0)
    return FeatureMap(phi)


def state_ramp_features(num_states: int, num_actions: int) -> FeatureMap:
    """Single increasing feature of the state index; extrapolates aggressively,
    which is what makes it adversarial for mass-concentrating dynamics."""
    t = (np.arange(num_states, dtype=float) + 1.0) / num_states
    phi = np.repeat(t[:, None], num_actions, axis=0)
    return FeatureMap(phi)

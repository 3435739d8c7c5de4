"""Asynchronous one-sample stochastic approximation of the second-order backup.

Each update draws fresh outcomes for the selected coordinate (generative
access through the induced one- and two-action joint laws), forms the
one-sample backup, and relaxes the table entry toward it. Off-diagonal
second-moment updates are mirrored to the swapped coordinate, which preserves
symmetry without changing the fixed point.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import (
    Index2,
    LambdaWeights,
    MomentCollection2,
    enumerate_indices,
    lambda_norm,
)
from .dp import apply_t2
from .env import ExoJmdp, Policy
from .errors import InvalidInputError, InvalidQueryError

__all__ = [
    "StepSchedule",
    "VisitationScheme",
    "sample_backup",
    "run_incremental",
    "IncrementalResult",
    "noise_diagnostic",
    "NoiseDiagnostic",
    "noise_bound_constants",
    "write_incremental_csv",
]


@dataclass
class StepSchedule:
    """Step-size rule with per-coordinate visit counters.

    harmonic(c): alpha = c / (c + visits), which satisfies the usual
    divergent-sum / summable-squares conditions per coordinate. constant(a0)
    uses a fixed step. Mirrored second-moment coordinates share one counter.
    """

    rule: str
    c: float = 10.0
    alpha0: float = 0.1
    _counts: np.ndarray | None = None

    @classmethod
    def harmonic(cls, c: float = 10.0) -> "StepSchedule":
        if c <= 0.0:
            raise InvalidInputError(f"harmonic constant must be > 0, got {c}")
        return cls("harmonic", c=c)

    @classmethod
    def constant(cls, alpha0: float) -> "StepSchedule":
        if not (0.0 < alpha0 <= 1.0):
            raise InvalidInputError(f"constant step must lie in (0, 1], got {alpha0}")
        return cls("constant", alpha0=alpha0)

    def bind(self, num_slots: int) -> None:
        self._counts = np.zeros(num_slots, dtype=np.int64)

    def step(self, slot: int) -> float:
        if self._counts is None:
            raise InvalidInputError("schedule not bound to an index set")
        if self.rule == "harmonic":
            alpha = self.c / (self.c + self._counts[slot])
        else:
            alpha = self.alpha0
        self._counts[slot] += 1
        return float(alpha)


@dataclass(frozen=True)
class VisitationScheme:
    """Coordinate selection rule: cyclic sweep or uniform-random.

    Both select every coordinate infinitely often over an unbounded run.
    """

    mode: str

    def __post_init__(self):
        if self.mode not in ("sweep", "uniform"):
            raise InvalidQueryError(f"unknown visitation mode {self.mode!r}")

    @classmethod
    def sweep(cls) -> "VisitationScheme":
        return cls("sweep")

    @classmethod
    def uniform(cls) -> "VisitationScheme":
        return cls("uniform")


class _SamplingContext:
    """Precomputed cumulative laws for fast repeated draws."""

    def __init__(self, env: ExoJmdp, policy: Policy):
        self.env = env
        self.noise_cdf = np.cumsum(env.noise.probs)
        self.noise_cdf[-1] = 1.0
        self.policy_cdf = np.cumsum(policy.probs, axis=1)
        self.policy_cdf[:, -1] = 1.0
        self.n_actions = env.space.num_actions

    def draw_u(self, r: float) -> int:
        return int(np.searchsorted(self.noise_cdf, r, side="right"))

    def draw_action(self, s: int, r: float) -> int:
        return int(np.searchsorted(self.policy_cdf[s], r, side="right"))


def _backup_value(
    ctx: _SamplingContext,
    mu: np.ndarray,
    sig: np.ndarray,
    kind: str,
    x: int,
    y: int,
    uniforms,
) -> float:
    """One-sample backup at a coordinate; `uniforms` yields i.i.d. U(0,1) draws.

    mu is indexed by flat x; sig by (x, x'). Same-state coordinates share a
    single noise draw; cross-state coordinates use two independent draws.
    """
    env = ctx.env
    n_a = ctx.n_actions
    g, h, gamma = env.g, env.h, env.gamma
    s, a = divmod(x, n_a)
    if kind == "mu":
        u = ctx.draw_u(next(uniforms))
        s1 = int(h[s, a, u])
        a1 = ctx.draw_action(s1, next(uniforms))
        return float(g[s, a, u]) + gamma * float(mu[s1 * n_a + a1])
    s2, a2 = divmod(y, n_a)
    if x == y:
        u = ctx.draw_u(next(uniforms))
        r = float(g[s, a, u])
        s1 = int(h[s, a, u])
        a1 = ctx.draw_action(s1, next(uniforms))
        x1 = s1 * n_a + a1
        return r * r + 2.0 * gamma * r * float(mu[x1]) + gamma**2 * float(sig[x1, x1])
    if s == s2:
        u = ctx.draw_u(next(uniforms))
        r1, r2 = float(g[s, a, u]), float(g[s2, a2, u])
        s1, t1 = int(h[s, a, u]), int(h[s2, a2, u])
    else:
        u1 = ctx.draw_u(next(uniforms))
        u2 = ctx.draw_u(next(uniforms))
        r1, r2 = float(g[s, a, u1]), float(g[s2, a2, u2])
        s1, t1 = int(h[s, a, u1]), int(h[s2, a2, u2])
    a1 = ctx.draw_action(s1, next(uniforms))
    b1 = ctx.draw_action(t1, next(uniforms))
    x1 = s1 * n_a + a1
    y1 = t1 * n_a + b1
    return (
        r1 * r2
        + gamma * r1 * float(mu[y1])
        + gamma * r2 * float(mu[x1])
        + gamma**2 * float(sig[x1, y1])
    )


def _rng_uniform_stream(rng: np.random.Generator, block: int = 1 << 16):
    while True:
        for v in rng.random(block):
            yield float(v)


def sample_backup(
    env: ExoJmdp,
    policy: Policy,
    m: MomentCollection2,
    i: Index2,
    rng: np.random.Generator,
) -> float:
    """Draw one random backup for coordinate i; its conditional mean is the
    exact operator coordinate."""
    if m.m_mu.size != env.space.num_x:
        raise InvalidInputError("moment tables do not match the environment")
    ctx = _SamplingContext(env, policy)
    uniforms = _rng_uniform_stream(rng, block=8)
    y = i.x if i.kind == "mu" else i.x2
    return _backup_value(ctx, m.m_mu, m.m_sigma, i.kind, i.x, y, uniforms)


@dataclass(frozen=True)
class IncrementalResult:
    final: MomentCollection2
    trace: list  # (update_index, lambda_distance_to_fixed_point or nan, last alpha)
    num_updates: int


def run_incremental(
    env: ExoJmdp,
    policy: Policy,
    schedule: StepSchedule,
    visitation: VisitationScheme,
    num_updates: int,
    seed: int,
    m0: MomentCollection2 | None = None,
    fixed_point: MomentCollection2 | None = None,
    trace_stride: int = 10_000,
) -> IncrementalResult:
    """Asynchronous one-coordinate updates; deterministic given the seed.

    When fixed_point is provided, the trace records the weighted sup-norm
    distance to it every trace_stride updates (and at the final update).
    """
    if num_updates < 1:
        raise InvalidInputError(f"num_updates must be >= 1, got {num_updates}")
    n_x = env.space.num_x
    m_start = MomentCollection2.zeros(env.space) if m0 is None else m0
    mu = m_start.m_mu.copy()
    sig = m_start.m_sigma.copy()

    indices = enumerate_indices(env.space)
    # Unordered slot id per coordinate so mirrored pairs share a visit counter.
    slots = np.empty(len(indices), dtype=np.int64)
    pair_slot = {}
    next_slot = 0
    meta = []
    for pos, idx in enumerate(indices):
        if idx.kind == "mu":
            key = ("mu", idx.x)
            y = idx.x
        else:
            key = ("sigma", min(idx.x, idx.x2), max(idx.x, idx.x2))
            y = idx.x2
        if key not in pair_slot:
            pair_slot[key] = next_slot
            next_slot += 1
        slots[pos] = pair_slot[key]
        meta.append((idx.kind, idx.x, y))
    schedule.bind(next_slot)

    ctx = _SamplingContext(env, policy)
    rng = np.random.default_rng(seed)
    uniforms = _rng_uniform_stream(rng)
    weights = LambdaWeights(env.gamma)
    n_idx = len(indices)

    trace: list = []
    alpha = float("nan")

    def record(k: int) -> None:
        if fixed_point is None:
            dist = float("nan")
        else:
            dist = lambda_norm(
                MomentCollection2(mu, 0.5 * (sig + sig.T)) - fixed_point, weights
            )
        trace.append((k, dist, alpha))

    for k in range(num_updates):
        if visitation.mode == "sweep":
            pos = k % n_idx
        else:
            pos = int(next(uniforms) * n_idx)
            if pos == n_idx:  # guard against next(uniforms) == 1.0
                pos = n_idx - 1
        kind, x, y = meta[pos]
        value = _backup_value(ctx, mu, sig, kind, x, y, uniforms)
        alpha = schedule.step(int(slots[pos]))
        if kind == "mu":
            mu[x] = (1.0 - alpha) * mu[x] + alpha * value
        else:
            new = (1.0 - alpha) * sig[x, y] + alpha * value
            sig[x, y] = new
            sig[y, x] = new
        if (k + 1) % trace_stride == 0 or k + 1 == num_updates:
            record(k + 1)

    final = MomentCollection2(mu, 0.5 * (sig + sig.T))
    return IncrementalResult(final, trace, num_updates)


def write_incremental_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["update_index", "lambda_distance_to_fixed_point", "step_size_last"]
        )
        for k, dist, alpha in trace:
            writer.writerow([k, repr(dist), repr(alpha)])


def noise_bound_constants(gamma: float) -> tuple[float, float]:
    """(C0, C1) of the conditional second-moment bound C0 + C1 * ||m||^2."""
    lam = 2.0 / (1.0 - gamma)
    return 8.0, 8.0 * max(gamma**2, (2.0 * gamma + gamma**2 * lam) ** 2)


@dataclass(frozen=True)
class NoiseDiagnostic:
    mean_error: float
    mean_error_se: float
    second_moment: float
    bound: float
    num_samples: int


def noise_diagnostic(
    env: ExoJmdp,
    policy: Policy,
    m: MomentCollection2,
    i: Index2,
    num_samples: int,
    seed: int,
) -> NoiseDiagnostic:
    """Empirical mean and second moment of the backup noise at one coordinate.

    The noise is backup minus exact operator coordinate; its conditional mean
    is zero and its second moment is bounded by C0 + C1 * ||m||_lambda^2.
    """
    if num_samples < 1000:
        raise InvalidInputError(f"need at least 1000 samples, got {num_samples}")
    exact_full = apply_t2(env, policy, m)
    if i.kind == "mu":
        exact = float(exact_full.m_mu[i.x])
    else:
        exact = float(exact_full.m_sigma[i.x, i.x2])

    n_a = env.space.num_actions
    g, h, gamma = env.g, env.h, env.gamma
    rng = np.random.default_rng(seed)
    mu, sig = m.m_mu, m.m_sigma
    noise_cdf = np.cumsum(env.noise.probs)
    noise_cdf[-1] = 1.0
    pol_cdf = np.cumsum(policy.probs, axis=1)
    pol_cdf[:, -1] = 1.0

    def draw_u(n):
        return np.searchsorted(noise_cdf, rng.random(n), side="right")

    def draw_actions(states):
        r = rng.random(states.size)
        cdf = pol_cdf[states]
        return (r[:, None] >= cdf).sum(axis=1)

    n = num_samples
    s, a = divmod(i.x, n_a)
    if i.kind == "mu":
        u = draw_u(n)
        s1 = h[s, a, u]
        a1 = draw_actions(s1)
        vals = g[s, a, u] + gamma * mu[s1 * n_a + a1]
    elif i.x == i.x2:
        u = draw_u(n)
        r = g[s, a, u]
        s1 = h[s, a, u]
        a1 = draw_actions(s1)
        x1 = s1 * n_a + a1
        vals = r * r + 2.0 * gamma * r * mu[x1] + gamma**2 * sig[x1, x1]
    else:
        s2, a2 = divmod(i.x2, n_a)
        if s == s2:
            u1 = draw_u(n)
            u2 = u1
        else:
            u1 = draw_u(n)
            u2 = draw_u(n)
        r1, r2 = g[s, a, u1], g[s2, a2, u2]
        s1, t1 = h[s, a, u1], h[s2, a2, u2]
        a1 = draw_actions(s1)
        b1 = draw_actions(t1)
        x1 = s1 * n_a + a1
        y1 = t1 * n_a + b1
        vals = (
            r1 * r2
            + gamma * r1 * mu[y1]
            + gamma * r2 * mu[x1]
            + gamma**2 * sig[x1, y1]
        )

    omega = vals - exact
    mean_err = float(omega.mean())
    se = float(omega.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    second = float((omega**2).mean())
    c0, c1 = noise_bound_constants(gamma)
    norm = lambda_norm(m, LambdaWeights(gamma))
    return NoiseDiagnostic(mean_err, se, second, c0 + c1 * norm**2, n)

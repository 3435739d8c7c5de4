"""Index spaces, moment collections, and the weighted sup norms used by every solver.

A state-action pair (s, a) is flattened to x = s * num_actions + a throughout.
Second-moment tables live on X x X, order-k tables on X^k.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, InvalidInputError, InvalidQueryError

__all__ = [
    "StateActionSpace",
    "LambdaWeights",
    "MomentCollection2",
    "MomentCollectionN",
    "Index2",
    "lambda_norm",
    "lambda_norm_n",
    "enumerate_indices",
    "order_table_bytes",
]


@dataclass(frozen=True)
class StateActionSpace:
    """Finite state-action space with the canonical flat index x = s*N + a."""

    num_states: int
    num_actions: int

    def __post_init__(self):
        if self.num_states < 1 or self.num_actions < 1:
            raise InvalidInputError("num_states and num_actions must be >= 1")

    @property
    def num_x(self) -> int:
        return self.num_states * self.num_actions

    def x(self, s: int, a: int) -> int:
        if not (0 <= s < self.num_states and 0 <= a < self.num_actions):
            raise InvalidQueryError(f"state-action ({s}, {a}) out of range")
        return s * self.num_actions + a

    def sa(self, x: int) -> tuple[int, int]:
        if not (0 <= x < self.num_x):
            raise InvalidQueryError(f"flat index {x} out of range")
        return divmod(x, self.num_actions)


@dataclass(frozen=True)
class LambdaWeights:
    """Order weights for the joint-moment sup norm.

    lam = 2/(1-gamma); the order-k table is weighted by 1/lam**(k-1).
    """

    gamma: float

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise InvalidInputError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def lam(self) -> float:
        return 2.0 / (1.0 - self.gamma)

    def lam_k(self, k: int) -> float:
        if k < 1:
            raise InvalidQueryError(f"moment order must be >= 1, got {k}")
        return self.lam ** (k - 1)


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class MomentCollection2:
    """Candidate first and second joint return moments (tables over X and X x X).

    The second-moment table must be symmetric: it represents expectations of
    products, which do not depend on coordinate order.
    """

    m_mu: np.ndarray
    m_sigma: np.ndarray
    symmetry_tol: float = 1e-9

    def __post_init__(self):
        mu = _frozen(np.asarray(self.m_mu, dtype=float))
        sig = _frozen(np.asarray(self.m_sigma, dtype=float))
        if mu.ndim != 1 or sig.shape != (mu.size, mu.size):
            raise InvalidInputError(
                f"shape mismatch: m_mu {mu.shape}, m_sigma {sig.shape}"
            )
        asym = float(np.max(np.abs(sig - sig.T))) if sig.size else 0.0
        if asym > self.symmetry_tol:
            raise InvalidInputError(
                f"m_sigma must be symmetric (max asymmetry {asym:.3e})"
            )
        object.__setattr__(self, "m_mu", mu)
        object.__setattr__(self, "m_sigma", sig)

    @classmethod
    def zeros(cls, space: StateActionSpace) -> "MomentCollection2":
        n = space.num_x
        return cls(np.zeros(n), np.zeros((n, n)))

    def __sub__(self, other: "MomentCollection2") -> "MomentCollection2":
        return MomentCollection2(self.m_mu - other.m_mu, self.m_sigma - other.m_sigma)


def order_table_bytes(space: StateActionSpace, order: int) -> int:
    """Total bytes for float64 tables of orders 1..order over X^k."""
    return sum(8 * space.num_x**k for k in range(1, order + 1))


@dataclass(frozen=True)
class MomentCollectionN:
    """Moment tables of orders 1..n; the order-k table lives on X^k.

    Each table must be invariant under permutations of its k axes.
    """

    tables: tuple
    symmetry_tol: float = 1e-9

    def __post_init__(self):
        tabs = tuple(_frozen(np.asarray(t, dtype=float)) for t in self.tables)
        if not tabs:
            raise InvalidInputError("need at least the order-1 table")
        n_x = tabs[0].size
        for k, t in enumerate(tabs, start=1):
            if t.shape != (n_x,) * k:
                raise InvalidInputError(
                    f"order-{k} table has shape {t.shape}, expected {(n_x,) * k}"
                )
            for ax in range(k - 1):
                swapped = np.swapaxes(t, ax, ax + 1)
                if not np.allclose(t, swapped, rtol=0.0, atol=self.symmetry_tol):
                    raise InvalidInputError(
                        f"order-{k} table is not permutation invariant (axes {ax},{ax + 1})"
                    )
        object.__setattr__(self, "tables", tabs)

    @property
    def order(self) -> int:
        return len(self.tables)

    @property
    def num_x(self) -> int:
        return self.tables[0].size

    def table(self, k: int) -> np.ndarray:
        if not (1 <= k <= self.order):
            raise InvalidQueryError(f"order {k} outside 1..{self.order}")
        return self.tables[k - 1]

    @classmethod
    def zeros(
        cls, space: StateActionSpace, order: int, memory_budget_bytes: int | None = None
    ) -> "MomentCollectionN":
        if order < 1:
            raise InvalidInputError(f"order must be >= 1, got {order}")
        need = order_table_bytes(space, order)
        if memory_budget_bytes is not None and need > memory_budget_bytes:
            raise BudgetError(
                f"order-{order} tables need {need} bytes, budget is {memory_budget_bytes}"
            )
        n = space.num_x
        return cls(tuple(np.zeros((n,) * k) for k in range(1, order + 1)))


@dataclass(frozen=True)
class Index2:
    """A coordinate of a second-order moment collection.

    kind 'mu' addresses m_mu[x]; kind 'sigma' addresses m_sigma[x, x2].
    """

    kind: str
    x: int
    x2: int | None = None

    def __post_init__(self):
        if self.kind not in ("mu", "sigma"):
            raise InvalidQueryError(f"unknown index kind {self.kind!r}")
        if self.kind == "sigma" and self.x2 is None:
            raise InvalidQueryError("sigma index needs both coordinates")
        if self.kind == "mu" and self.x2 is not None:
            raise InvalidQueryError("mu index takes a single coordinate")


def enumerate_indices(space: StateActionSpace) -> list[Index2]:
    """All |X| + |X|^2 coordinates, mu entries first, sigma pairs row-major."""
    n = space.num_x
    out = [Index2("mu", x) for x in range(n)]
    out.extend(
        Index2("sigma", x, y) for x, y in itertools.product(range(n), range(n))
    )
    return out


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")


def lambda_norm(m: MomentCollection2, w: LambdaWeights) -> float:
    """max(max|m_mu|, max|m_sigma| / lam); zero iff both tables vanish."""
    _check_finite(m.m_mu, "m_mu")
    _check_finite(m.m_sigma, "m_sigma")
    mu_part = float(np.max(np.abs(m.m_mu)))
    sig_part = float(np.max(np.abs(m.m_sigma))) / w.lam
    return max(mu_part, sig_part)


def lambda_norm_n(m: MomentCollectionN, w: LambdaWeights) -> float:
    """max over k of max|table_k| / lam**(k-1); agrees with lambda_norm at n=2."""
    best = 0.0
    for k in range(1, m.order + 1):
        t = m.table(k)
        _check_finite(t, f"order-{k} table")
        best = max(best, float(np.max(np.abs(t))) / w.lam_k(k))
    return best

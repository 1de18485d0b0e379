"""Abstract contractive DP models and the time-indexed Bellman operators.

Cost tables are 1-D float arrays indexed by state, policies are 1-D integer
arrays of action indices, and Q-tables are ``(n_states, n_actions)`` float
arrays holding ``+inf`` at infeasible pairs so that a plain ``argmin`` over
the action axis is the minimum over the feasible set.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np


class ContractViolation(ValueError):
    """An argument breaks an operation's precondition."""


class OutOfHorizonError(IndexError):
    """A time index outside the revealed stages was requested."""


class NumericalFailure(RuntimeError):
    """An iterative solve missed its residual target."""


@dataclass(frozen=True)
class StateSpace:
    """Finite state set ``{0, ..., n_states-1}`` with a positive weight function."""

    n_states: int
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        if int(self.n_states) < 1:
            raise ContractViolation("n_states must be >= 1")
        w = np.ones(self.n_states) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (self.n_states,):
            raise ContractViolation(f"weights must have shape ({self.n_states},), got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ContractViolation("weights must be finite and strictly positive")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "n_states", int(self.n_states))

    @property
    def unweighted(self) -> bool:
        return bool(np.all(self.weights == 1.0))


def as_cost_table(J, space: StateSpace) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    if J.shape != (space.n_states,):
        raise ContractViolation(
            f"cost table has shape {J.shape}, expected ({space.n_states},)")
    return J


def weighted_sup_norm(J, space: StateSpace) -> float:
    """``max_x |J(x)| / nu(x)``."""
    J = as_cost_table(J, space)
    return float(np.max(np.abs(J) / space.weights))


def semilinear_gap(y, space: StateSpace) -> float:
    """One-sided gap ``M(y) = max_x y(x) / nu(x)``; may be negative."""
    y = as_cost_table(y, space)
    return float(np.max(y / space.weights))


def q_sup_norm(Q, space: StateSpace, feasible: np.ndarray) -> float:
    """Weighted sup-norm of a Q-table over feasible pairs only."""
    Q = np.asarray(Q, dtype=float)
    if Q.shape != feasible.shape:
        raise ContractViolation(f"Q-table has shape {Q.shape}, expected {feasible.shape}")
    scaled = np.abs(np.where(feasible, Q, 0.0)) / space.weights[:, None]
    return float(np.max(scaled))


class AbstractModel(ABC):
    """A revealed sequence of monotone contractive mappings ``H_0, ..., H_{K-1}``.

    Subclasses provide :meth:`q_values`, the table ``H_k(x, u, J)`` over all
    state-action pairs. Every operator in this module is built from it.
    """

    space: StateSpace
    feasible: np.ndarray
    horizon: int
    alpha: float

    @property
    def n_states(self) -> int:
        return self.space.n_states

    @property
    def n_actions(self) -> int:
        return self.feasible.shape[1]

    @property
    def contraction_modulus(self) -> float:
        return self.alpha

    def feasible_actions(self, x: int) -> list[int]:
        return [int(u) for u in np.flatnonzero(self.feasible[x])]

    def check_time(self, k: int) -> None:
        if not 0 <= k < self.horizon:
            raise OutOfHorizonError(f"time index {k} outside revealed stages [0, {self.horizon})")

    def check_policy(self, mu) -> np.ndarray:
        mu = np.asarray(mu)
        if mu.shape != (self.n_states,) or not np.issubdtype(mu.dtype, np.integer):
            raise ContractViolation(f"policy must be an integer array of shape ({self.n_states},)")
        if np.any(mu < 0) or np.any(mu >= self.n_actions):
            raise ContractViolation("policy action index out of range")
        if not np.all(self.feasible[np.arange(self.n_states), mu]):
            bad = int(np.flatnonzero(~self.feasible[np.arange(self.n_states), mu])[0])
            raise ContractViolation(f"policy picks infeasible action {int(mu[bad])} at state {bad}")
        return mu

    @abstractmethod
    def q_values(self, k: int, J: np.ndarray) -> np.ndarray:
        """``H_k(x, u, J)`` for all pairs, ``+inf`` where ``u`` is infeasible at ``x``."""

    def mapping(self, k: int, x: int, u: int, J) -> float:
        if not self.feasible[x, u]:
            raise ContractViolation(f"action {u} infeasible at state {x}")
        return float(self.q_values(k, as_cost_table(J, self.space))[x, u])

    def num_policies(self) -> int:
        return int(np.prod(self.feasible.sum(axis=1), dtype=object))

    def lowest_policy(self) -> np.ndarray:
        return np.argmax(self.feasible, axis=1)


def apply_policy_operator(model: AbstractModel, k: int, mu, J) -> np.ndarray:
    """``(T_{k,mu} J)(x) = H_k(x, mu(x), J)``."""
    model.check_time(k)
    mu = model.check_policy(mu)
    q = model.q_values(k, as_cost_table(J, model.space))
    return q[np.arange(model.n_states), mu]


def apply_bellman_operator(model: AbstractModel, k: int, J) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(T_k J, greedy policy)``; ties go to the lowest action index."""
    model.check_time(k)
    q = model.q_values(k, as_cost_table(J, model.space))
    policy = np.argmin(q, axis=1)
    return q[np.arange(model.n_states), policy], policy


def operator_power(model: AbstractModel, k: int, m: int, J, policy=None) -> np.ndarray:
    """Apply ``T_{k,policy}`` (or ``T_k`` when ``policy`` is None) ``m`` times."""
    if int(m) < 1:
        raise ContractViolation(f"operator power must be >= 1, got {m}")
    J = as_cost_table(J, model.space)
    for _ in range(int(m)):
        if policy is None:
            J, _ = apply_bellman_operator(model, k, J)
        else:
            J = apply_policy_operator(model, k, policy, J)
    return J

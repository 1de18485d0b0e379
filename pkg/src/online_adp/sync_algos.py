"""Synchronous online VI / PI variants with controlled error injection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from online_adp.core import (
    AbstractModel,
    ContractViolation,
    StateSpace,
    apply_bellman_operator,
    apply_policy_operator,
    as_cost_table,
    operator_power,
    semilinear_gap,
    weighted_sup_norm,
)
from online_adp.oracle import OracleTrack, solve_all, solve_policy_cost

NAN = float("nan")


@dataclass(frozen=True)
class PowerSchedule:
    """Per-step operator powers ``m_k >= 1``."""

    m: tuple

    def __post_init__(self):
        m = tuple(int(v) for v in self.m)
        for k, v in enumerate(m):
            if v < 1:
                raise ContractViolation(f"powers.m[{k}] must be >= 1, got {v}")
        if not m:
            raise ContractViolation("power schedule is empty")
        object.__setattr__(self, "m", m)

    @classmethod
    def constant(cls, m: int, horizon: int) -> "PowerSchedule":
        return cls((m,) * horizon)

    @classmethod
    def cycling(cls, values: Sequence[int], horizon: int) -> "PowerSchedule":
        return cls(tuple(values[k % len(values)] for k in range(horizon)))

    def __getitem__(self, k):
        return self.m[k] if k < len(self.m) else self.m[-1]

    def __len__(self):
        return len(self.m)

    @property
    def m_d(self) -> int:
        return min(self.m)

    @property
    def m_s(self) -> int:
        return max(self.m)


@dataclass(frozen=True)
class ErrorInjector:
    """Per-step error magnitudes; a scalar magnitude applies to every step."""

    magnitudes: tuple = (0.0,)
    seed: int = 0
    mode: str = "exact-magnitude"

    def __post_init__(self):
        mags = self.magnitudes
        if np.isscalar(mags):
            mags = (mags,)
        mags = tuple(float(v) for v in mags)
        if any(not v >= 0 for v in mags):
            raise ContractViolation("injection magnitudes must be nonnegative")
        if self.mode not in ("exact-magnitude", "zero"):
            raise ContractViolation(f"unknown injector mode {self.mode!r}")
        object.__setattr__(self, "magnitudes", mags or (0.0,))

    @classmethod
    def zero(cls) -> "ErrorInjector":
        return cls((0.0,), 0, "zero")

    def magnitude(self, k: int) -> float:
        if self.mode == "zero":
            return 0.0
        return self.magnitudes[k] if k < len(self.magnitudes) else self.magnitudes[-1]


def _rng(seed, k, tag):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(k), tag]))


def inject_error(J, magnitude: float, seed: int, k: int, space: StateSpace | None = None) -> np.ndarray:
    """Perturb one seeded state by ``magnitude * nu(x0)`` with a seeded sign.

    The result differs from ``J`` by exactly ``magnitude`` in the weighted
    sup-norm, up to rounding of the single perturbed entry.
    """
    J = np.array(J, dtype=float)
    if magnitude < 0:
        raise ContractViolation("magnitude must be nonnegative")
    if magnitude == 0:
        return J
    rng = _rng(seed, k, 1)
    x0 = int(rng.integers(len(J)))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    nu = 1.0 if space is None else float(space.weights[x0])
    J[x0] += sign * magnitude * nu
    return J


def epsilon_greedy(model: AbstractModel, k: int, J, eps: float, seed: int) -> tuple[np.ndarray, float]:
    """Greedy policy at ``J``, with one seeded second-best swap whose operator gap is ``<= eps``.

    Returns the policy and the realized gap ``||T_{k,mu} J - T_k J||``
    (zero when no admissible swap exists).
    """
    TJ, mu = apply_bellman_operator(model, k, J)
    if not eps > 0:
        return mu, 0.0
    rng = _rng(seed, k, 2)
    x0 = int(rng.integers(model.n_states))
    q = model.q_values(k, J)[x0]
    order = np.argsort(q, kind="stable")
    if len(order) < 2 or not np.isfinite(q[order[1]]):
        return mu, 0.0
    swapped = mu.copy()
    second = order[1] if order[0] == mu[x0] else order[0]
    swapped[x0] = second
    gap = weighted_sup_norm(apply_policy_operator(model, k, swapped, J) - TJ, model.space)
    if gap <= eps:
        return swapped, gap
    return mu, 0.0


@dataclass
class Trajectory:
    """Per-step record of one online run.

    Scalar columns hold ``nan`` where a quantity does not apply at that step
    (for instance the injection at the final step, where no update runs).
    """

    algorithm: str
    seed: int = 0
    scenario_digest: str = ""
    iterates: list = field(default_factory=list)
    policies: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    m: list = field(default_factory=list)
    e: list = field(default_factory=list)
    realized_eps: list = field(default_factory=list)
    realized_delta: list = field(default_factory=list)
    bound: list = field(default_factory=list)
    bound_rec: list = field(default_factory=list)
    bound_kind: str = "per-step"
    q_iterates: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    oracle: OracleTrack | None = None

    def __len__(self):
        return len(self.errors)

    @property
    def horizon(self) -> int:
        return len(self.errors)


def _new(algorithm, model, oracle):
    oracle = solve_all(model) if oracle is None else oracle
    return Trajectory(algorithm=algorithm, oracle=oracle), oracle


def _max_realized(seq):
    vals = [v for v in seq if not math.isnan(v)]
    return max(vals) if vals else 0.0


def run_approx_online_vi(model: AbstractModel, J0, powers: PowerSchedule, inj: ErrorInjector,
                         oracle: OracleTrack | None = None) -> Trajectory:
    """``J_{k+1} = inject(T_k^{m_k} J_k, e_k)``; error is ``||J_k - J_k*||``."""
    traj, oracle = _new("avi", model, oracle)
    J = as_cost_table(J0, model.space).copy()
    K = model.horizon
    for k in range(K):
        traj.iterates.append(J)
        traj.errors.append(weighted_sup_norm(J - oracle.J_star[k], model.space))
        traj.m.append(powers[k])
        if k == K - 1:
            traj.e.append(NAN)
            break
        Y = operator_power(model, k, powers[k], J)
        J = inject_error(Y, inj.magnitude(k), inj.seed, k, model.space)
        traj.e.append(weighted_sup_norm(J - Y, model.space))
    traj.realized_eps = [NAN] * K
    traj.realized_delta = [NAN] * K
    traj.meta.update(e_max=_max_realized(traj.e), gap0=traj.errors[0], m_d=powers.m_d, m_s=powers.m_s)
    return traj


def run_online_pi(model: AbstractModel, mu0, oracle: OracleTrack | None = None) -> Trajectory:
    """Exact policy evaluation then greedy improvement at each revealed stage."""
    traj, oracle = _new("pi", model, oracle)
    mu = model.check_policy(np.asarray(mu0))
    K = model.horizon
    for k in range(K):
        Jmu = solve_policy_cost(model, k, mu)
        traj.iterates.append(Jmu)
        traj.policies.append(mu)
        traj.errors.append(weighted_sup_norm(Jmu - oracle.J_star[k], model.space))
        if k < K - 1:
            _, mu = apply_bellman_operator(model, k, Jmu)
    traj.m = [NAN] * K
    traj.e = [NAN] * K
    traj.realized_eps = [NAN] * K
    traj.realized_delta = [NAN] * K
    traj.meta.update(gap0=traj.errors[0])
    return traj


def run_approx_online_pi(model: AbstractModel, mu0, inj_eval: ErrorInjector, inj_improve: ErrorInjector,
                         oracle: OracleTrack | None = None) -> Trajectory:
    """Policy evaluation off by ``delta_{1,k}``, improvement off by at most ``eps_{1,k}``.

    The recorded error is that of the true policy cost ``||J_{k,mu_k} - J_k*||``;
    ``iterates`` hold the perturbed evaluations the improvement step saw.
    """
    traj, oracle = _new("api", model, oracle)
    mu = model.check_policy(np.asarray(mu0))
    K = model.horizon
    fallbacks = 0
    for k in range(K):
        Jmu = solve_policy_cost(model, k, mu)
        J = inject_error(Jmu, inj_eval.magnitude(k), inj_eval.seed, k, model.space)
        traj.iterates.append(J)
        traj.policies.append(mu)
        traj.errors.append(weighted_sup_norm(Jmu - oracle.J_star[k], model.space))
        traj.realized_delta.append(weighted_sup_norm(J - Jmu, model.space))
        if k < K - 1:
            eps = inj_improve.magnitude(k)
            mu, gap = epsilon_greedy(model, k, J, eps, inj_improve.seed)
            fallbacks += int(eps > 0 and gap == 0)
            traj.realized_eps.append(gap)
        else:
            traj.realized_eps.append(NAN)
    traj.m = [NAN] * K
    traj.e = [NAN] * K
    traj.meta.update(gap0=traj.errors[0], eps_max=_max_realized(traj.realized_eps),
                     delta_max=_max_realized(traj.realized_delta), greedy_fallbacks=fallbacks)
    return traj


def run_online_optimistic_pi(model: AbstractModel, J0, powers: PowerSchedule,
                             oracle: OracleTrack | None = None) -> Trajectory:
    """``mu_k`` greedy at ``J_k``; ``J_{k+1} = T_{k,mu_k}^{m_k} J_k``."""
    traj, oracle = _new("opi", model, oracle)
    J = as_cost_table(J0, model.space).copy()
    K = model.horizon
    T0J0, _ = apply_bellman_operator(model, 0, J)
    c = max(0.0, semilinear_gap(T0J0 - J, model.space))
    for k in range(K):
        _, mu = apply_bellman_operator(model, k, J)
        traj.iterates.append(J)
        traj.policies.append(mu)
        traj.errors.append(weighted_sup_norm(J - oracle.J_star[k], model.space))
        traj.m.append(powers[k])
        if k < K - 1:
            J = operator_power(model, k, powers[k], J, mu)
    traj.e = [NAN] * K
    traj.realized_eps = [NAN] * K
    traj.realized_delta = [NAN] * K
    traj.meta.update(c=c, gap0=traj.errors[0], m_d=powers.m_d, m_s=powers.m_s)
    return traj


def run_approx_online_optimistic_pi(model: AbstractModel, J0, powers: PowerSchedule,
                                    inj_improve: ErrorInjector, inj_eval: ErrorInjector,
                                    oracle: OracleTrack | None = None) -> Trajectory:
    """Approximate optimistic PI indexed from ``k = 1``.

    ``mu_{k+1}`` is eps_k-greedy at ``J_k`` for ``T_k``, and
    ``J_k = inject(T_{k-1,mu_k}^{m_k} J_{k-1}, delta_k)``. The error at ``k``
    is ``||J_{k,mu_k} - J_k*||``; row 0 reports the cost of ``mu_1`` at stage 0.
    """
    K = model.horizon
    if K < 2:
        raise ContractViolation("approximate optimistic PI needs horizon >= 2")
    traj, oracle = _new("aopi", model, oracle)
    J = as_cost_table(J0, model.space).copy()
    space = model.space

    mu, gap = epsilon_greedy(model, 0, J, inj_improve.magnitude(0), inj_improve.seed)
    T1J0 = apply_policy_operator(model, 1, mu, J)
    traj.meta.update(
        M_r1=semilinear_gap(T1J0 - J, space),
        M_t1=semilinear_gap(operator_power(model, 1, powers[1], J, mu) - oracle.J_star[1], space),
        M_t1_single=semilinear_gap(T1J0 - oracle.J_star[1], space),
    )
    traj.iterates.append(J)
    traj.policies.append(mu)
    traj.errors.append(weighted_sup_norm(solve_policy_cost(model, 0, mu) - oracle.J_star[0], space))
    traj.m.append(NAN)
    traj.realized_delta.append(NAN)
    traj.realized_eps.append(gap)
    for k in range(1, K):
        Y = operator_power(model, k - 1, powers[k], J, mu)
        J = inject_error(Y, inj_eval.magnitude(k), inj_eval.seed, k, space)
        traj.realized_delta.append(weighted_sup_norm(J - Y, space))
        traj.iterates.append(J)
        traj.policies.append(mu)
        traj.m.append(powers[k])
        traj.errors.append(weighted_sup_norm(solve_policy_cost(model, k, mu) - oracle.J_star[k], space))
        if k < K - 1:
            mu, gap = epsilon_greedy(model, k, J, inj_improve.magnitude(k), inj_improve.seed)
            traj.realized_eps.append(gap)
        else:
            traj.realized_eps.append(NAN)
    traj.e = [NAN] * K
    ms = [int(v) for v in traj.m[1:]]
    traj.meta.update(eps_max=_max_realized(traj.realized_eps), delta_max=_max_realized(traj.realized_delta),
                     m_d=min(ms), m_s=max(ms))
    return traj

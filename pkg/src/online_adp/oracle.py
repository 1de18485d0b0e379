"""Per-step ground truth (J_k*, mu_k*, Q_k*, policy costs) and drift constants."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from online_adp.core import (
    AbstractModel,
    NumericalFailure,
    apply_bellman_operator,
    apply_policy_operator,
    as_cost_table,
    operator_power,
    q_sup_norm,
    weighted_sup_norm,
)

RESIDUAL_TOL = 1e-10
EXACT_POLICY_LIMIT = 4096


def _residual_target(J, tol):
    # absolute target for tables of order one, relative for large ones
    return tol * max(1.0, float(np.max(np.abs(J))))


def solve_policy_cost(model: AbstractModel, k: int, mu, tol: float = RESIDUAL_TOL,
                      max_iter: int = 100_000) -> np.ndarray:
    """Fixed point ``J_{k,mu}`` of ``T_{k,mu}``.

    MDP models are solved directly from ``(I - alpha P_mu) J = gbar_mu``;
    other models fall back to fixed-point iteration.
    """
    model.check_time(k)
    mu = model.check_policy(mu)
    if hasattr(model, "policy_system"):
        P, gbar = model.policy_system(k, mu)
        J = np.linalg.solve(np.eye(model.n_states) - model.discount * P, gbar)
        res = weighted_sup_norm(apply_policy_operator(model, k, mu, J) - J, model.space)
        if res > _residual_target(J, tol):
            raise NumericalFailure(f"policy evaluation residual {res:.3e} at k={k}")
        return J
    J = np.zeros(model.n_states)
    for _ in range(max_iter):
        TJ = apply_policy_operator(model, k, mu, J)
        res = weighted_sup_norm(TJ - J, model.space)
        J = TJ
        if res <= _residual_target(J, tol) * (1 - model.alpha):
            return J
    raise NumericalFailure(f"policy evaluation did not converge in {max_iter} iterations at k={k}")


def solve_optimal(model: AbstractModel, k: int, tol: float = RESIDUAL_TOL,
                  max_iter: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    """Optimal cost ``J_k*`` and a lowest-index greedy optimal policy.

    Howard policy iteration when the model exposes linear policy systems,
    value iteration otherwise.
    """
    model.check_time(k)
    idx = np.arange(model.n_states)
    if hasattr(model, "policy_system"):
        _, mu = apply_bellman_operator(model, k, np.zeros(model.n_states))
        for _ in range(max_iter):
            J = solve_policy_cost(model, k, mu, tol)
            q = model.q_values(k, J)
            better = q[idx, mu] - q.min(axis=1) > 1e-13 * max(1.0, float(np.max(np.abs(J))))
            if not better.any():
                break
            mu = np.where(better, np.argmin(q, axis=1), mu)
        else:
            raise NumericalFailure(f"policy iteration did not terminate at k={k}")
    else:
        J = np.zeros(model.n_states)
        for _ in range(max_iter * 10):
            TJ, _ = apply_bellman_operator(model, k, J)
            step = weighted_sup_norm(TJ - J, model.space)
            J = TJ
            if step <= _residual_target(J, tol) * (1 - model.alpha):
                break
        else:
            raise NumericalFailure(f"value iteration did not converge at k={k}")
    TJ, mu_star = apply_bellman_operator(model, k, J)
    res = weighted_sup_norm(TJ - J, model.space)
    if res > _residual_target(J, tol):
        raise NumericalFailure(f"Bellman residual {res:.3e} at k={k}")
    return J, mu_star


def compute_q_star(model: AbstractModel, k: int, J_star) -> np.ndarray:
    """``Q_k*(x, u) = H_k(x, u, J_k*)``; infeasible pairs hold ``+inf``."""
    model.check_time(k)
    return model.q_values(k, as_cost_table(J_star, model.space))


@dataclass(frozen=True)
class OracleTrack:
    """Exact per-step optima for every revealed stage."""

    J_star: np.ndarray   # (K, n)
    mu_star: np.ndarray  # (K, n)
    Q_star: np.ndarray   # (K, n, A)

    def __len__(self):
        return len(self.J_star)


def solve_all(model: AbstractModel) -> OracleTrack:
    J, mu, Q = [], [], []
    cache = {}
    for k in range(model.horizon):
        key = _stage_key(model, k)
        if key is not None and key in cache:
            Jk, muk = cache[key]
        else:
            Jk, muk = solve_optimal(model, k)
            if key is not None:
                cache[key] = (Jk, muk)
        J.append(Jk)
        mu.append(muk)
        Q.append(compute_q_star(model, k, Jk))
    return OracleTrack(np.array(J), np.array(mu), np.array(Q))


def _stage_key(model, k):
    # identical stage objects (static and piecewise scenarios) share one solve
    stages = getattr(model, "stages", None)
    return None if stages is None else id(stages[k])


def enumerate_policies(model: AbstractModel) -> np.ndarray:
    choices = [model.feasible_actions(x) for x in range(model.n_states)]
    return np.array(list(itertools.product(*choices)), dtype=np.int64)


def random_policies(model: AbstractModel, count: int, rng) -> np.ndarray:
    out = np.empty((count, model.n_states), dtype=np.int64)
    for x in range(model.n_states):
        out[:, x] = rng.choice(model.feasible_actions(x), size=count)
    return out


# ---------------------------------------------------------------------------
# drift constants

DRIFT_NAMES = ("rho", "gamma1", "gamma2", "eta1", "eta2", "eta3", "rho_bar")


@dataclass
class DriftReport:
    """Per-step drift constants (index k compares stages k and k+1) and their maxima."""

    alpha: float
    rho: list
    gamma1: list
    gamma2: list
    eta1: list
    eta2: list
    eta3: list
    rho_bar: list
    estimates: dict = field(default_factory=dict)
    eta1_sampled: list = field(default_factory=list)

    def max(self, name: str) -> float:
        seq = getattr(self, name)
        return float(max(seq)) if len(seq) else 0.0

    @property
    def maxima(self) -> dict:
        return {name: self.max(name) for name in DRIFT_NAMES}

    def at(self, name: str, k: int) -> float:
        seq = getattr(self, name)
        return float(seq[k]) if 0 <= k < len(seq) else float("nan")

    def to_dict(self) -> dict:
        out = {"alpha": self.alpha, "estimates": dict(self.estimates), "max": self.maxima}
        for name in DRIFT_NAMES:
            out[name] = [float(v) for v in getattr(self, name)]
        out["eta1_sampled"] = [float(v) for v in self.eta1_sampled]
        return out


def _weighted_rows(diff, nu):
    return np.max(np.abs(diff) / nu, axis=-1)


def measure_drift_constants(model: AbstractModel, sample_budget: int = 256, seed: int = 0,
                            oracle: OracleTrack | None = None, powers=None,
                            box: float | None = None) -> DriftReport:
    """Measure the consecutive-stage drift constants over the revealed horizon.

    Parameters
    ----------
    model : AbstractModel
        Revealed stages ``0..K-1``; constants are reported for ``k = 0..K-2``.
    sample_budget : int
        Number of random cost tables (and random policies, when enumeration
        is too large) used for the sampled quantities.
    seed : int
        Seed for all sampling.
    oracle : OracleTrack, optional
        Precomputed optima; solved here when omitted.
    powers : sequence of int, optional
        Per-step operator powers ``m_k``. When given, the policy-operator
        drift also covers ``j = m_k`` and ``j = m_{k+1}``.
    box : float, optional
        Half-width of the sampling box for random cost tables. Defaults
        to ``max |g| / (1 - alpha)``.

    Returns
    -------
    DriftReport
        ``estimates`` flags each quantity as ``exact``, ``upper-bound``
        (analytic bound for MDPs, at least as large as the sampled value),
        or ``sampled`` (a lower estimate).
    """
    K = model.horizon
    oracle = solve_all(model) if oracle is None else oracle
    nu = model.space.weights
    feas = model.feasible
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD21F7]))
    report = DriftReport(alpha=model.alpha, rho=[], gamma1=[], gamma2=[], eta1=[], eta2=[], eta3=[],
                         rho_bar=[])
    if K < 2:
        report.estimates = {name: "exact" for name in DRIFT_NAMES}
        return report

    J_star, Q_star = oracle.J_star, oracle.Q_star
    rho = _weighted_rows(J_star[1:] - J_star[:-1], nu)
    qdiff = np.where(feas, Q_star[1:] - Q_star[:-1], 0.0)
    qnorm = np.max(np.abs(qdiff) / nu[:, None], axis=(1, 2))
    is_mdp = hasattr(model, "expected_costs")
    n_pol = model.num_policies()
    exact_pol = n_pol <= EXACT_POLICY_LIMIT
    policies = enumerate_policies(model) if exact_pol else random_policies(model, sample_budget, rng)
    estimates = {"rho": "exact", "gamma2": "exact", "eta3": "exact", "rho_bar": "exact"}

    if box is None:
        if is_mdp:
            gmax = float(np.max(np.abs(np.where(feas, model.expected_costs, 0.0))))
        else:
            gmax = max(float(np.max(np.abs(apply_bellman_operator(model, k, np.zeros(model.n_states))[0])))
                       for k in range(K))
        box = gmax / (1 - model.alpha)
    Js = rng.uniform(-box, box, size=(sample_budget, model.n_states))

    if is_mdp:
        P = model.kernel.transition
        d = model.discount
        G = model.expected_costs
        dG = np.where(feas, G[1:] - G[:-1], 0.0)                # (K-1, n, A)
        pair_drift = np.max(np.abs(dG) / nu[:, None], axis=(1, 2))
        idx = np.arange(model.n_states)
        Pmu = P[idx, policies]                                   # (Np, n, n)
        A = np.eye(model.n_states) - d * Pmu
        Gmu = G[:, idx, policies]                                # (K, Np, n)

        # policy costs for every stage at once: J_{k,mu} = A_mu^{-1} gbar_{k,mu}
        Jpol = np.linalg.solve(A, np.transpose(Gmu, (1, 2, 0)))  # (Np, n, K)
        gamma1 = np.max(np.abs(np.diff(Jpol, axis=2)) / nu[None, :, None], axis=(0, 1))
        estimates["gamma1"] = "exact" if exact_pol else "sampled"

        # Bellman-operator drift on the sampled box, plus the analytic ceiling
        PJ = np.einsum("xuy,sy->sxu", P, Js)
        vals = np.where(feas, G[:, None] + d * PJ[None], np.inf)  # (K, S, n, A)
        TJ = vals.min(axis=3)
        eta1_sampled = np.max(np.abs(TJ[1:] - TJ[:-1]) / nu, axis=(1, 2))
        if model.offsets is not None:
            offs = np.asarray(model.offsets)
            eta1 = np.abs(np.diff(offs)) * float(np.max(1.0 / nu))
            estimates["eta1"] = "exact"
        else:
            eta1 = np.maximum(eta1_sampled, pair_drift)
            estimates["eta1"] = "upper-bound"

        # policy-operator drift is independent of J for MDPs:
        # (T^j_{k,mu} - T^j_{k+1,mu}) J = A_mu^{-1} (I - (d P_mu)^j) (gbar_{k,mu} - gbar_{k+1,mu})
        m = None if powers is None else [int(v) for v in powers]
        dP = d * Pmu
        small = {1: dP}
        for j in range(2, (max(m) if m else 1) + 1):
            small[j] = small[j - 1] @ dP
        running = dP                                             # (d P_mu)^{k+1}
        eta2 = np.empty(K - 1)
        for k in range(K - 1):
            if k > 0:
                running = running @ dP
            v = Gmu[k] - Gmu[k + 1]                              # (Np, n)
            mats = [running]
            if m is not None:
                mats += [small[j] for j in {m[k], m[min(k + 1, len(m) - 1)]} if j > 1]
            best = pair_drift[k]
            for mat in mats:
                rhs = v - np.einsum("pij,pj->pi", mat, v)
                D = np.linalg.solve(A, rhs[..., None])[..., 0]
                best = max(best, float(np.max(np.abs(D) / nu)))
            eta2[k] = best
        estimates["eta2"] = "exact" if exact_pol else "sampled"
    else:
        gamma1 = np.zeros(K - 1)
        costs = [[solve_policy_cost(model, k, mu) for mu in policies] for k in range(K)]
        for k in range(K - 1):
            gamma1[k] = max(weighted_sup_norm(a - b, model.space) for a, b in zip(costs[k], costs[k + 1]))
        estimates["gamma1"] = "exact" if exact_pol else "sampled"
        eta1_sampled = np.zeros(K - 1)
        eta2 = np.zeros(K - 1)
        for k in range(K - 1):
            for J in Js:
                a, _ = apply_bellman_operator(model, k, J)
                b, _ = apply_bellman_operator(model, k + 1, J)
                eta1_sampled[k] = max(eta1_sampled[k], weighted_sup_norm(a - b, model.space))
            js = {1, k + 1}
            if powers is not None:
                js.update((int(powers[k]), int(powers[min(k + 1, len(powers) - 1)])))
            for i, J in enumerate(Js):
                mu = policies[i % len(policies)]
                for j in js:
                    diff = operator_power(model, k, j, J, mu) - operator_power(model, k + 1, j, J, mu)
                    eta2[k] = max(eta2[k], weighted_sup_norm(diff, model.space))
        eta1 = eta1_sampled
        estimates["eta1"] = "sampled"
        estimates["eta2"] = "sampled"

    report.rho = [float(v) for v in rho]
    report.gamma1 = [float(v) for v in gamma1]
    report.gamma2 = list(report.rho)
    report.eta3 = list(report.rho)
    report.eta1 = [float(v) for v in eta1]
    report.eta1_sampled = [float(v) for v in eta1_sampled]
    report.eta2 = [float(v) for v in eta2]
    report.rho_bar = [float(max(a, b)) for a, b in zip(rho, qnorm)]
    report.estimates = estimates
    return report


def policy_cost_gap(model: AbstractModel, k: int, mu, J_star) -> float:
    """``||J_{k,mu} - J_k*||`` (used as the error of policy-iteration variants)."""
    return weighted_sup_norm(solve_policy_cost(model, k, mu) - J_star, model.space)


__all__ = [
    "DriftReport",
    "OracleTrack",
    "compute_q_star",
    "enumerate_policies",
    "measure_drift_constants",
    "policy_cost_gap",
    "q_sup_norm",
    "solve_all",
    "solve_optimal",
    "solve_policy_cost",
]

"""Closed-form tracking-error bounds and the optimistic-PI sandwich check."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from online_adp.core import (
    AbstractModel,
    ContractViolation,
    apply_bellman_operator,
)
from online_adp.models import Violation
from online_adp.oracle import DriftReport

CHECK_TOL = 1e-9
TAIL_SLACK = 1e-6

ALGORITHMS = ("avi", "pi", "api", "opi", "aopi", "async-vi", "async-pi")
THEOREM_TAG = {"avi": "t1", "pi": "t2", "api": "t3", "opi": "t4", "aopi": "t5",
               "async-vi": "t6", "async-pi": "t7"}


@dataclass(frozen=True)
class BoundParams:
    """Every constant the bound formulas consume.

    Scalars are the maxima the theorems use; ``*_seq`` fields hold the
    per-step sequences when they are known.
    """

    alpha: float
    m: tuple = (1,)
    rho: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    eta1: float = 0.0
    eta2: float = 0.0
    eta3: float = 0.0
    rho_bar: float = 0.0
    e: float = 0.0
    eps1: float = 0.0
    delta1: float = 0.0
    eps: float = 0.0
    delta: float = 0.0
    T_a: int = 1
    T_d: int = 0
    gap0: float = 0.0
    M_r1: float = 0.0
    M_t1: float = 0.0
    c: float = 0.0
    m_d: int | None = None
    m_s: int | None = None
    eta1_seq: tuple = ()
    rho_seq: tuple = ()
    gamma1_seq: tuple = ()
    e_seq: tuple = ()
    eps_seq: tuple = ()
    delta_seq: tuple = ()

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ContractViolation(f"alpha must lie in (0, 1), got {self.alpha}")
        m = tuple(int(v) for v in self.m)
        if not m or min(m) < 1:
            raise ContractViolation("powers must be >= 1")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "m_d", min(m) if self.m_d is None else int(self.m_d))
        object.__setattr__(self, "m_s", max(m) if self.m_s is None else int(self.m_s))
        if self.m_d < 1:
            raise ContractViolation("m_d must be >= 1")
        for name in ("rho", "gamma1", "gamma2", "eta1", "eta2", "eta3", "rho_bar",
                     "e", "eps1", "delta1", "eps", "delta", "gap0", "c"):
            v = getattr(self, name)
            if not v >= 0 or not math.isfinite(v):
                raise ContractViolation(f"{name} must be finite and nonnegative, got {v}")

    def power(self, k: int) -> int:
        return self.m[k] if k < len(self.m) else self.m[-1]


def bound_vi_t1(p: BoundParams, k: int) -> float:
    """``alpha^{sum_{s<k} m_s} ||J_0 - J_0*|| + (rho + e) / (1 - alpha^{m_d})``."""
    total = sum(p.power(s) for s in range(k))
    return p.alpha ** total * p.gap0 + (p.rho + p.e) / (1 - p.alpha ** p.m_d)


def bound_pi_t2_t3(p: BoundParams, k: int, variant: str = "exact") -> float:
    """Online PI (``exact``) or approximate online PI (``approximate``) bound at step ``k``."""
    a = p.alpha
    r = p.gamma1 + p.gamma2
    if variant == "approximate":
        r += (p.eps1 + 2 * a * p.delta1) / (1 - a)
    elif variant != "exact":
        raise ContractViolation(f"unknown variant {variant!r}")
    return a ** k * p.gap0 + r / (1 - a)


def lambda_coefficient(c: float, k: int, eta1_seq: Sequence[float], alpha_seq, m_seq: Sequence[int]) -> float:
    """``lambda_k(c) = sum_{s<k} eta_{1,s} prod_{l=s+1}^{k-1} alpha_l^{m_l} + c prod_{l<k} alpha_l^{m_l}``.

    ``alpha_seq`` may be a scalar; empty products are 1.
    """
    if k < 0:
        raise ContractViolation("k must be >= 0")
    if k == 0:
        return float(c)
    if np.isscalar(alpha_seq):
        alpha_seq = [float(alpha_seq)] * k
    decay = [alpha_seq[l] ** m_seq[l] for l in range(k)]
    total = 0.0
    for s in range(k):
        total += eta1_seq[s] * math.prod(decay[s + 1:k])
    return total + c * math.prod(decay)


def lambda_sequence(c: float, K: int, eta1_seq, alpha: float, m_seq) -> list[float]:
    """``lambda_0 .. lambda_{K-1}`` by the equivalent one-step recursion."""
    out = [float(c)]
    for k in range(1, K):
        out.append(alpha ** m_seq[k - 1] * out[-1] + eta1_seq[k - 1])
    return out


def _eta1_seq(p, K):
    if len(p.eta1_seq) >= K - 1:
        return list(p.eta1_seq)
    return [p.eta1] * max(K - 1, 0)


def check_sandwich_lemma1(model: AbstractModel, traj, p: BoundParams, tol: float = CHECK_TOL) -> list[Violation]:
    """Check ``T_k J_k + alpha/(1-alpha) lambda_k nu >= J_{k+1} >= T_{k+1} J_{k+1} - lambda_{k+1} nu``."""
    K = len(traj.iterates)
    nu = model.space.weights
    a = p.alpha
    lam = lambda_sequence(p.c, K, _eta1_seq(p, K), a, [int(v) for v in traj.m])
    out = []
    TJ = [apply_bellman_operator(model, k, J)[0] for k, J in enumerate(traj.iterates)]
    for k in range(K - 1):
        J1 = traj.iterates[k + 1]
        upper = TJ[k] + a / (1 - a) * lam[k] * nu
        lower = TJ[k + 1] - lam[k + 1] * nu
        for x in np.flatnonzero(upper - J1 < -tol):
            out.append(Violation("sandwich-upper", (k, int(x)), f"J_{k+1} exceeds by {J1[x] - upper[x]:.3e}"))
        for x in np.flatnonzero(J1 - lower < -tol):
            out.append(Violation("sandwich-lower", (k, int(x)), f"J_{k+1} below by {lower[x] - J1[x]:.3e}"))
    return out


def _t4_terms(p, traj, K):
    lam = lambda_sequence(p.c, K, _eta1_seq(p, K), p.alpha, [int(v) for v in traj.m])
    return lam


def bound_optimistic_t4(model: AbstractModel, traj, p: BoundParams, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Componentwise envelope ``lower <= J_k - J_k* <= upper`` for online optimistic PI.

    Direct evaluation; :func:`optimistic_t4_envelopes` computes every step
    at once with shared operator powers.
    """
    if k >= len(traj.iterates):
        raise ContractViolation(f"trajectory has {len(traj.iterates)} steps, asked for k={k}")
    K = len(traj.iterates)
    nu = model.space.weights
    a = p.alpha
    lam = _t4_terms(p, traj, K)
    J_star = traj.oracle.J_star
    lower = -lam[k] * nu / (1 - a)
    upper = a ** k * p.gap0 * nu
    for l in range(k):
        upper = upper + (J_star[l] - J_star[l + 1])
    for l in range(1, k):
        A = B = traj.iterates[l]
        for _ in range(k - l):
            A = apply_bellman_operator(model, l, A)[0]
            B = apply_bellman_operator(model, l - 1, B)[0]
        upper = upper + (A - B)
    for l in range(k):
        upper = upper + a ** (k - l) * lam[l] * nu / (1 - a)
    return lower, upper


def optimistic_t4_envelopes(model: AbstractModel, traj, p: BoundParams,
                            k_max: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """:func:`bound_optimistic_t4` for ``k = 0..k_max`` in O(k_max^2) operator applications."""
    K = len(traj.iterates)
    k_max = K - 1 if k_max is None else min(k_max, K - 1)
    nu = model.space.weights
    a = p.alpha
    lam = _t4_terms(p, traj, K)
    J_star = traj.oracle.J_star
    # powers[l][j-1] = T_l^j J_l - T_{l-1}^j J_l
    diffs = {}
    for l in range(1, k_max):
        A = B = traj.iterates[l]
        row = []
        for _ in range(k_max - l):
            A = apply_bellman_operator(model, l, A)[0]
            B = apply_bellman_operator(model, l - 1, B)[0]
            row.append(A - B)
        diffs[l] = row
    out = []
    drift = np.zeros(model.n_states)
    for k in range(k_max + 1):
        if k > 0:
            drift = drift + (J_star[k - 1] - J_star[k])
        upper = a ** k * p.gap0 * nu + drift
        for l in range(1, k):
            upper = upper + diffs[l][k - l - 1]
        for l in range(k):
            upper = upper + a ** (k - l) * lam[l] * nu / (1 - a)
        out.append((-lam[k] * nu / (1 - a), upper))
    return out


def t5_constants(p: BoundParams) -> dict:
    """``c_1``, ``beta``, ``varepsilon_1``, ``varepsilon_2`` of the approximate optimistic PI bound."""
    a, ms, md = p.alpha, p.m_s, p.m_d
    eps1 = p.eps + (1 + a) * p.delta + (2 + a) * p.eta2
    eps2 = (a - a ** ms) * eps1 / ((1 - a) * (1 - a ** md)) + p.eps + p.eta2 + p.eta3 + a * (p.delta + p.eta2)
    c1 = (a - a ** ms) / (1 - a) * max(p.M_r1, 0.0)
    return {"c1": c1, "beta": a ** md, "eps1": eps1, "eps2": eps2}


def bound_approx_optimistic_t5(p: BoundParams, k: int) -> float:
    """Per-step bound on ``||J_{k,mu_k} - J_k*||`` for approximate optimistic PI, ``k >= 1``.

    The anchors ``M_r1``, ``M_t1`` enter through ``max(., 0)``.
    """
    if k < 1:
        raise ContractViolation("the approximate optimistic PI bound starts at k = 1")
    a = p.alpha
    cst = t5_constants(p)
    c1, beta, eps1, eps2 = cst["c1"], cst["beta"], cst["eps1"], cst["eps2"]
    Mr1, Mt1 = max(p.M_r1, 0.0), max(p.M_t1, 0.0)
    total = sum(p.power(l) for l in range(1, k + 1))
    return (a ** total / (1 - a) * Mr1
            + a ** (k - 1) * Mt1
            + c1 * beta ** math.ceil(k / 2) / (1 - beta)
            + c1 * beta * a ** (k // 2) / (1 - a)
            + a ** p.power(k) * eps1 / ((1 - a) * (1 - a ** p.m_d))
            + eps2 / (1 - a))


def t5_tail_bound(p: BoundParams, m_liminf: int) -> float:
    """Asymptotic form with ``alpha_hat = alpha^{liminf m_k}``."""
    a = p.alpha
    cst = t5_constants(p)
    return (a ** m_liminf * cst["eps1"] / ((1 - a) * (1 - a ** p.m_d))) + cst["eps2"] / (1 - a)


def bound_async(p: BoundParams, which: str) -> float:
    """Asymptotic bounds for asynchronous VI (``t6``) and asynchronous PI (``t7``)."""
    a = p.alpha
    if which == "t6":
        b = a ** p.m_d
        return (p.rho * (p.T_a + b * p.T_d) + p.e) / (1 - b)
    if which == "t7":
        return p.rho_bar * p.T_a / (1 - a)
    raise ContractViolation(f"unknown asynchronous bound {which!r}")


def limsup_bound(b: float, tau: float) -> float:
    """Limit-superior ceiling ``b / (1 - tau)`` for ``a_k <= b + tau a_{k - delta_k}``."""
    if not 0.0 < tau < 1.0:
        raise ContractViolation(f"tau must lie in (0, 1), got {tau}")
    return b / (1 - tau)


# ---------------------------------------------------------------------------
# recursions with per-step constants (tighter companions of the theorem curves)

def vi_recursive_curve(p: BoundParams, K: int) -> list[float]:
    out = [p.gap0]
    for k in range(K - 1):
        rho = p.rho_seq[k] if k < len(p.rho_seq) else p.rho
        e = p.e_seq[k] if k < len(p.e_seq) else p.e
        out.append(p.alpha ** p.power(k) * out[-1] + e + rho)
    return out


def pi_recursive_curve(p: BoundParams, K: int, variant: str = "exact") -> list[float]:
    a = p.alpha
    out = [p.gap0]
    for k in range(K - 1):
        g1 = p.gamma1_seq[k] if k < len(p.gamma1_seq) else p.gamma1
        g2 = p.rho_seq[k] if k < len(p.rho_seq) else p.gamma2
        step = g1 + g2
        if variant == "approximate":
            eps = p.eps_seq[k] if k < len(p.eps_seq) else p.eps1
            dl = p.delta_seq[k] if k < len(p.delta_seq) else p.delta1
            step += (eps + 2 * a * dl) / (1 - a)
        out.append(a * out[-1] + step)
    return out


# ---------------------------------------------------------------------------
# assembling and checking

def _finite(seq):
    return [float(v) for v in seq if v == v]


def _nz(seq):
    return tuple(0.0 if v != v else float(v) for v in seq)


def params_for(traj, drift: DriftReport, **overrides) -> BoundParams:
    """Bound constants for a trajectory: measured drift plus realized injections."""
    meta = traj.meta
    ms = [int(v) for v in traj.m if v == v] or [1]
    kw = dict(
        alpha=drift.alpha,
        m=tuple(ms) if traj.algorithm != "aopi" else (ms[0],) + tuple(ms),
        rho=drift.max("rho"), gamma1=drift.max("gamma1"), gamma2=drift.max("gamma2"),
        eta1=drift.max("eta1"), eta2=drift.max("eta2"), eta3=drift.max("eta3"),
        rho_bar=drift.max("rho_bar"),
        e=max(_finite(traj.e) or [0.0]),
        eps1=meta.get("eps_max", 0.0), delta1=meta.get("delta_max", 0.0),
        eps=meta.get("eps_max", 0.0), delta=meta.get("delta_max", 0.0),
        T_a=int(meta.get("T_a", 1)), T_d=int(meta.get("T_d", 0)),
        gap0=float(traj.errors[0]) if traj.algorithm != "aopi" else 0.0,
        M_r1=meta.get("M_r1", 0.0), M_t1=meta.get("M_t1", 0.0), c=meta.get("c", 0.0),
        eta1_seq=tuple(drift.eta1), rho_seq=tuple(drift.rho), gamma1_seq=tuple(drift.gamma1),
        e_seq=_nz(traj.e), eps_seq=_nz(traj.realized_eps), delta_seq=_nz(traj.realized_delta),
    )
    if traj.algorithm in ("aopi",):
        kw["m_d"] = meta.get("m_d")
        kw["m_s"] = meta.get("m_s")
    kw.update(overrides)
    return BoundParams(**kw)


def tail_indices(K: int, burn_in: float = 0.3, window: float = 0.2) -> range:
    """Final ``ceil(window*K)`` steps, never earlier than ``ceil(burn_in*K)``."""
    start = max(math.ceil(burn_in * K), K - math.ceil(window * K))
    return range(min(start, K - 1), K)


@dataclass
class Check:
    name: str
    passed: bool
    margin: float
    detail: str = ""

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "margin": float(self.margin),
                "detail": self.detail}


def theorem_curve(model: AbstractModel, traj, p: BoundParams, env=None) -> tuple[list[float], list[float]]:
    """Scalar bound column and a per-step recursion column (``nan`` where not defined).

    ``env`` reuses precomputed :func:`optimistic_t4_envelopes` output.
    """
    K = len(traj.errors)
    alg = traj.algorithm
    nan = float("nan")
    if alg == "avi":
        return [bound_vi_t1(p, k) for k in range(K)], vi_recursive_curve(p, K)
    if alg in ("pi", "api"):
        variant = "exact" if alg == "pi" else "approximate"
        return [bound_pi_t2_t3(p, k, variant) for k in range(K)], pi_recursive_curve(p, K, variant)
    if alg == "opi":
        nu = model.space.weights
        env = optimistic_t4_envelopes(model, traj, p) if env is None else env
        return [float(np.max(np.maximum(u, -lo) / nu)) for lo, u in env], [nan] * K
    if alg == "aopi":
        return [nan] + [bound_approx_optimistic_t5(p, k) for k in range(1, K)], [nan] * K
    if alg == "async-vi":
        return [bound_async(p, "t6")] * K, [nan] * K
    if alg == "async-pi":
        return [bound_async(p, "t7")] * K, [nan] * K
    raise ContractViolation(f"unknown algorithm {alg!r}")


def evaluate_checks(model: AbstractModel, traj, p: BoundParams, burn_in: float = 0.3,
                    window: float = 0.2, tol: float = CHECK_TOL) -> list[Check]:
    """Bound checks for one trajectory; fills ``traj.bound`` and ``traj.bound_rec``."""
    env = optimistic_t4_envelopes(model, traj, p) if traj.algorithm == "opi" else None
    bound, rec = theorem_curve(model, traj, p, env)
    traj.bound, traj.bound_rec = bound, rec
    tag = THEOREM_TAG[traj.algorithm]
    err = np.asarray(traj.errors, dtype=float)
    b = np.asarray(bound, dtype=float)
    checks = []
    if traj.bound_kind == "asymptotic-tail":
        idx = list(tail_indices(len(err), burn_in, window))
        worst = float(np.max(err[idx]))
        margin = float(b[idx[0]] + TAIL_SLACK - worst)
        checks.append(Check(f"{tag}-tail", margin >= 0, margin,
                            f"max error {worst:.6g} over steps {idx[0]}..{idx[-1]}"))
        return checks
    ok = ~np.isnan(b)
    margins = b[ok] + tol - err[ok]
    checks.append(Check(f"{tag}-per-step", bool(np.all(margins >= 0)), float(np.min(margins)),
                        f"{int(ok.sum())} steps"))
    if traj.algorithm == "opi":
        worst = math.inf
        for k, (lo, up) in enumerate(env):
            d = traj.iterates[k] - traj.oracle.J_star[k]
            worst = min(worst, float(np.min(d - lo)), float(np.min(up - d)))
        checks.append(Check("t4-containment", worst >= -tol, worst + tol, "componentwise"))
        sw = check_sandwich_lemma1(model, traj, p, tol)
        checks.append(Check("lemma1-sandwich", not sw, 0.0 if not sw else -1.0,
                            f"{len(sw)} violations"))
    if traj.algorithm == "aopi":
        idx = list(tail_indices(len(err), burn_in, window))
        m_tail = min(int(traj.m[k]) for k in idx)
        tail = t5_tail_bound(p, m_tail)
        worst = float(np.max(err[idx]))
        checks.append(Check("t5-tail", worst <= tail + TAIL_SLACK, tail + TAIL_SLACK - worst,
                            f"max error {worst:.6g} over final {len(idx)} steps"))
    return checks


def with_overrides(p: BoundParams, **kw) -> BoundParams:
    return replace(p, **kw)

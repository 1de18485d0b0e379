"""Asynchronous online VI and the uniform-fixed-point asynchronous online PI.

Asynchrony is simulated on a single logical clock ``k``: each processor owns
a block of states, updates only at its activation times, and reads other
blocks through a bounded-delay history window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from online_adp.core import (
    AbstractModel,
    ContractViolation,
    StateSpace,
    as_cost_table,
    operator_power,
    weighted_sup_norm,
)
from online_adp.models import Violation
from online_adp.oracle import OracleTrack, solve_all
from online_adp.sync_algos import NAN, ErrorInjector, PowerSchedule, Trajectory, inject_error


@dataclass(frozen=True)
class Partition:
    """``assignment[x]`` is the processor (``0..N-1``) owning state ``x``."""

    assignment: tuple
    N: int

    def __post_init__(self):
        a = tuple(int(v) for v in self.assignment)
        if any(v < 0 or v >= self.N for v in a):
            raise ContractViolation("processor ids must lie in 0..N-1")
        missing = sorted(set(range(self.N)) - set(a))
        if missing:
            raise ContractViolation(f"processors {missing} own no states")
        object.__setattr__(self, "assignment", a)

    @classmethod
    def contiguous(cls, n_states: int, N: int) -> "Partition":
        return cls(tuple(int(v) for v in np.repeat(np.arange(N), _block_sizes(n_states, N))), N)

    def block(self, l: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.assignment) == l)

    @property
    def blocks(self) -> list[np.ndarray]:
        return [self.block(l) for l in range(self.N)]


def _block_sizes(n, N):
    return [len(b) for b in np.array_split(np.arange(n), N)]


@dataclass(frozen=True)
class AsyncSchedule:
    """Activation sets and read delays.

    ``delays[k, l, i]`` is ``tau_{li}(k)``, the iterate index processor ``l``
    reads block ``i`` from at time ``k``; ``None`` means no delay. Evaluation
    sets are only used by asynchronous PI.
    """

    improve_sets: tuple
    T_a: int
    T_d: int = 0
    evaluate_sets: tuple | None = None
    delays: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "improve_sets", tuple(frozenset(int(t) for t in s) for s in self.improve_sets))
        if self.evaluate_sets is not None:
            object.__setattr__(self, "evaluate_sets",
                               tuple(frozenset(int(t) for t in s) for s in self.evaluate_sets))
        if self.delays is not None:
            d = np.array(self.delays, dtype=np.int64)
            d.setflags(write=False)
            object.__setattr__(self, "delays", d)

    @property
    def N(self) -> int:
        return len(self.improve_sets)

    def tau(self, l: int, k: int) -> np.ndarray:
        if self.delays is None:
            return np.full(self.N, k, dtype=np.int64)
        return self.delays[k, l]

    def to_dict(self) -> dict:
        out = {
            "T_a": self.T_a,
            "T_d": self.T_d,
            "improve_sets": [sorted(s) for s in self.improve_sets],
        }
        if self.evaluate_sets is not None:
            out["evaluate_sets"] = [sorted(s) for s in self.evaluate_sets]
        if self.delays is not None:
            out["delays"] = self.delays.tolist()
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "AsyncSchedule":
        return cls(improve_sets=tuple(doc["improve_sets"]), T_a=int(doc["T_a"]), T_d=int(doc.get("T_d", 0)),
                   evaluate_sets=None if doc.get("evaluate_sets") is None else tuple(doc["evaluate_sets"]),
                   delays=doc.get("delays"))


def round_robin_schedule(N: int, horizon: int) -> AsyncSchedule:
    """Processor ``l`` active at ``k = l mod N``; zero delays; ``T_a = N``."""
    return AsyncSchedule(tuple(frozenset(range(l, horizon, N)) for l in range(N)), T_a=N)


def random_vi_schedule(N: int, horizon: int, T_a: int, T_d: int, seed: int,
                       density: float = 0.5) -> AsyncSchedule:
    """Seeded activations meeting the ``T_a`` window and delays in ``[k - T_d, k]``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), N, T_a, T_d]))
    sets = []
    for _ in range(N):
        times, last = set(), -1
        for k in range(horizon):
            # forced when the window since the last activation is about to close
            if k - last > T_a or rng.random() < density:
                times.add(k)
                last = k
        sets.append(frozenset(times))
    back = rng.integers(0, T_d + 1, size=(horizon, N, N))
    back = np.minimum(back, np.arange(horizon)[:, None, None])
    delays = np.arange(horizon)[:, None, None] - back
    return AsyncSchedule(tuple(sets), T_a=T_a, T_d=T_d, delays=delays)


def alternating_pi_schedule(N: int, horizon: int, T_a: int, seed: int | None = None) -> AsyncSchedule:
    """Per processor, improvement and evaluation on disjoint residues modulo ``T_a``.

    With ``seed`` the residues are drawn per processor; otherwise processor
    ``l`` improves at ``k = l mod T_a`` and evaluates half a period later.
    """
    if T_a < 2:
        raise ContractViolation("disjoint improvement/evaluation windows need T_a >= 2")
    rng = None if seed is None else np.random.default_rng(np.random.SeedSequence([int(seed), N, T_a, 7]))
    imp, ev = [], []
    for l in range(N):
        if rng is None:
            a, b = l % T_a, (l + T_a // 2) % T_a
        else:
            a, b = (int(v) for v in rng.choice(T_a, size=2, replace=False))
        imp.append(frozenset(range(a, horizon, T_a)))
        ev.append(frozenset(range(b, horizon, T_a)))
    return AsyncSchedule(tuple(imp), T_a=T_a, evaluate_sets=tuple(ev))


def validate_schedule(sched: AsyncSchedule, horizon: int) -> list[Violation]:
    """Window, delay, and disjointness checks over ``0..horizon-1``; empty list = valid."""
    out = []
    if sched.T_a < 1:
        out.append(Violation("window", (), "T_a must be >= 1"))
    if sched.T_d < 0:
        out.append(Violation("delay", (), "T_d must be >= 0"))
    families = [("improve", sched.improve_sets)]
    if sched.evaluate_sets is not None:
        families.append(("evaluate", sched.evaluate_sets))
        if len(sched.evaluate_sets) != sched.N:
            out.append(Violation("shape", (), "evaluate sets must cover every processor"))
    for name, sets in families:
        for l, times in enumerate(sets):
            active = np.zeros(horizon + 1, dtype=np.int64)
            for t in times:
                if 0 <= t < horizon:
                    active[t + 1] = 1
            csum = np.cumsum(active)
            for k in range(0, horizon - sched.T_a):
                if csum[k + sched.T_a + 1] - csum[k] == 0:
                    out.append(Violation("window", (l, k), f"{name} set empty on [{k}, {k + sched.T_a}]"))
    if sched.evaluate_sets is not None:
        for l, (a, b) in enumerate(zip(sched.improve_sets, sched.evaluate_sets)):
            for t in sorted(a & b):
                out.append(Violation("overlap", (l, t), "improvement and evaluation at the same time"))
    if sched.delays is not None:
        d = sched.delays
        if d.shape[0] < horizon or d.shape[1:] != (sched.N, sched.N):
            out.append(Violation("shape", (), f"delay table shape {d.shape} does not cover the horizon"))
        else:
            lag = np.arange(horizon)[:, None, None] - d[:horizon]
            for k, l, i in zip(*np.nonzero((lag < 0) | (lag > sched.T_d))):
                out.append(Violation("delay", (int(l), int(i), int(k)),
                                     f"reads iterate {int(d[k, l, i])} at time {int(k)} (T_d={sched.T_d})"))
    return out


def _require_valid(sched, horizon, partition):
    if sched.N != partition.N:
        raise ContractViolation(f"schedule has {sched.N} processors, partition has {partition.N}")
    problems = validate_schedule(sched, horizon)
    if problems:
        head = "; ".join(str(p) for p in problems[:3])
        raise ContractViolation(f"invalid schedule ({len(problems)} violations): {head}")


# ---------------------------------------------------------------------------
# the (V, Q) construction

@dataclass(frozen=True)
class VQPair:
    """Cost function ``V`` and Q-factor ``Q`` (``+inf`` at infeasible pairs)."""

    V: np.ndarray
    Q: np.ndarray

    def __sub__(self, other: "VQPair") -> "VQPair":
        mask = np.isfinite(self.Q) & np.isfinite(other.Q)
        return VQPair(self.V - other.V, np.where(mask, self.Q - np.where(mask, other.Q, 0.0), np.inf))


def vq_norm(pair: VQPair, space: StateSpace) -> float:
    """``max(||V||, ||Q||)`` with ``||Q||`` the weighted sup over feasible pairs."""
    V = as_cost_table(pair.V, space)
    Q = np.asarray(pair.Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != space.n_states:
        raise ContractViolation(f"Q-table shape {Q.shape} does not match {space.n_states} states")
    qn = np.abs(np.where(np.isfinite(Q), Q, 0.0)) / space.weights[:, None]
    return float(max(np.max(np.abs(V) / space.weights), np.max(qn)))


def _mixed(model, mu, V, Q):
    mu = model.check_policy(mu)
    return np.minimum(V, Q[np.arange(model.n_states), mu])


def f_mapping(model: AbstractModel, k: int, mu, V, Q) -> np.ndarray:
    """``F_{k,mu}(V, Q)(x, u) = H_k(x, u, min{V, Q_mu})``."""
    model.check_time(k)
    return model.q_values(k, _mixed(model, mu, as_cost_table(V, model.space), np.asarray(Q, dtype=float)))


def mf_mapping(model: AbstractModel, k: int, mu, V, Q) -> tuple[np.ndarray, np.ndarray]:
    """Minimum of ``F_{k,mu}`` over feasible actions, with the lowest-index minimizer."""
    F = f_mapping(model, k, mu, V, Q)
    pol = np.argmin(F, axis=1)
    return F[np.arange(model.n_states), pol], pol


def g_mapping(model: AbstractModel, k: int, mu, pair: VQPair) -> VQPair:
    """``G_{k,mu}(V, Q) = (MF_{k,mu}(V, Q), F_{k,mu}(V, Q))``."""
    F = f_mapping(model, k, mu, pair.V, pair.Q)
    return VQPair(F.min(axis=1), F)


# ---------------------------------------------------------------------------
# runs

def run_async_online_vi(model: AbstractModel, J0, partition: Partition, sched: AsyncSchedule,
                        powers: PowerSchedule, inj: ErrorInjector,
                        oracle: OracleTrack | None = None) -> Trajectory:
    """Processor ``l`` active at ``k`` writes ``inject(T_k^{m_k} J_view, e_k)`` on its block.

    ``J_view`` assembles block ``i`` from iterate ``tau_{li}(k)``. Requires
    the unweighted sup-norm.
    """
    if not model.space.unweighted:
        raise ContractViolation("asynchronous online VI is checked under nu == 1 only")
    K = model.horizon
    _require_valid(sched, K, partition)
    oracle = solve_all(model) if oracle is None else oracle
    traj = Trajectory(algorithm="async-vi", oracle=oracle)
    blocks = partition.blocks
    J = as_cost_table(J0, model.space).copy()
    history = {0: J}
    for k in range(K):
        traj.iterates.append(J)
        traj.errors.append(weighted_sup_norm(J - oracle.J_star[k], model.space))
        traj.m.append(powers[k])
        if k == K - 1:
            traj.e.append(NAN)
            break
        nxt = J.copy()
        realized = 0.0
        for l in range(partition.N):
            if k not in sched.improve_sets[l]:
                continue
            taus = sched.tau(l, k)
            view = np.empty_like(J)
            for i, blk in enumerate(blocks):
                t = int(taus[i])
                if k - t > sched.T_d or t not in history:
                    raise RuntimeError(f"read of iterate {t} at time {k} outside the delay window")
                view[blk] = history[t][blk]
            Y = operator_power(model, k, powers[k], view)
            Z = inject_error(Y, inj.magnitude(k), inj.seed, k, model.space)
            realized = max(realized, weighted_sup_norm(Z - Y, model.space))
            nxt[blocks[l]] = Z[blocks[l]]
        traj.e.append(realized)
        J = nxt
        history[k + 1] = J
        history.pop(k + 1 - sched.T_d - 1, None)
    traj.realized_eps = [NAN] * K
    traj.realized_delta = [NAN] * K
    traj.bound_kind = "asymptotic-tail"
    traj.meta.update(e_max=max([v for v in traj.e if v == v] or [0.0]), m_d=powers.m_d, m_s=powers.m_s,
                     T_a=sched.T_a, T_d=sched.T_d, N=partition.N)
    return traj


def run_async_online_pi(model: AbstractModel, V0, Q0, mu0, partition: Partition, sched: AsyncSchedule,
                        mode: str = "full", oracle: OracleTrack | None = None) -> Trajectory:
    """Asynchronous online PI with local improvement (``T_l``) and evaluation (``Tbar_l``) steps.

    ``mode="full"`` keeps the whole Q-table and records the (V, Q) error
    against ``(J_k*, Q_k*)``. ``mode="reduced"`` keeps one value per state in
    place of ``Q(x, mu(x))``, overwritten by ``V`` at improvement steps, and
    records the V error. Read delays in the schedule are not used.
    """
    if mode not in ("full", "reduced"):
        raise ContractViolation(f"unknown mode {mode!r}")
    if sched.evaluate_sets is None:
        raise ContractViolation("asynchronous PI needs evaluation sets")
    K = model.horizon
    _require_valid(sched, K, partition)
    oracle = solve_all(model) if oracle is None else oracle
    traj = Trajectory(algorithm="async-pi", oracle=oracle)
    space = model.space
    idx = np.arange(model.n_states)
    blocks = partition.blocks
    V = as_cost_table(V0, space).copy()
    Q = np.where(model.feasible, np.asarray(Q0, dtype=float), np.inf)
    mu = model.check_policy(np.asarray(mu0)).copy()
    Jr = Q[idx, mu].copy()

    for k in range(K):
        traj.iterates.append(V)
        traj.policies.append(mu)
        if mode == "full":
            traj.q_iterates.append(Q)
            err = vq_norm(VQPair(V, Q) - VQPair(oracle.J_star[k], oracle.Q_star[k]), space)
        else:
            traj.q_iterates.append(Jr)
            err = weighted_sup_norm(V - oracle.J_star[k], space)
        traj.errors.append(err)
        if k == K - 1:
            break
        W = np.minimum(V, Q[idx, mu] if mode == "full" else Jr)
        F = model.q_values(k, W)
        best = np.argmin(F, axis=1)
        Vn, mun, Qn, Jn = V.copy(), mu.copy(), Q.copy(), Jr.copy()
        for l, blk in enumerate(blocks):
            if k in sched.improve_sets[l]:
                Vn[blk] = F[blk, best[blk]]
                mun[blk] = best[blk]
                Jn[blk] = Vn[blk]
            elif k in sched.evaluate_sets[l]:
                Qn[blk] = F[blk]
                Jn[blk] = F[blk, mu[blk]]
        V, mu = Vn, mun
        if mode == "full":
            Q = Qn
        else:
            Jr = Jn
    traj.m = [NAN] * K
    traj.e = [NAN] * K
    traj.realized_eps = [NAN] * K
    traj.realized_delta = [NAN] * K
    traj.bound_kind = "asymptotic-tail"
    traj.meta.update(T_a=sched.T_a, N=partition.N, mode=mode)
    return traj

"""Finite online MDPs, deterministic online control, and drift scenarios."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from online_adp.core import (
    AbstractModel,
    ContractViolation,
    StateSpace,
    as_cost_table,
)

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class Violation:
    kind: str
    where: tuple
    detail: str

    def __str__(self):
        return f"{self.kind} at {self.where}: {self.detail}"


@dataclass(frozen=True)
class MdpKernel:
    """Time-invariant transition kernel ``p_xy(u)`` and discount ``alpha``.

    ``transition`` has shape ``(n_states, n_actions, n_states)``; rows of
    infeasible pairs are ignored. Row-stochasticity is checked by
    :func:`validate_stage`, not here, so that defective kernels can be reported.
    """

    transition: np.ndarray
    discount: float
    feasible: np.ndarray = None

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ContractViolation(f"transition must have shape (n, A, n), got {P.shape}")
        feasible = (np.ones(P.shape[:2], dtype=bool) if self.feasible is None
                    else np.array(self.feasible, dtype=bool))
        if feasible.shape != P.shape[:2]:
            raise ContractViolation("feasible mask must have shape (n_states, n_actions)")
        if not np.all(feasible.any(axis=1)):
            raise ContractViolation("every state needs at least one feasible action")
        if not 0.0 < float(self.discount) < 1.0:
            raise ContractViolation(f"discount must lie in (0, 1), got {self.discount}")
        P.setflags(write=False)
        feasible.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "feasible", feasible)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class StageCost:
    """Stage cost ``g(x, u, y)`` with shape ``(n_states, n_actions, n_states)``."""

    g: np.ndarray

    def __post_init__(self):
        g = np.array(self.g, dtype=float)
        if g.ndim != 3:
            raise ContractViolation(f"stage cost must be 3-D, got shape {g.shape}")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    @classmethod
    def from_pairs(cls, cost, n_states: int | None = None) -> "StageCost":
        """Broadcast a pair cost ``g(x, u)`` over successors."""
        cost = np.asarray(cost, dtype=float)
        n = cost.shape[0] if n_states is None else n_states
        return cls(np.repeat(cost[:, :, None], n, axis=2))


def validate_stage(kernel: MdpKernel, stage: StageCost) -> list[Violation]:
    """Row-stochasticity, feasibility coverage, and finiteness; empty list = valid."""
    out = []
    P, g = kernel.transition, stage.g
    if g.shape != P.shape:
        return [Violation("shape", (), f"stage cost shape {g.shape} != kernel shape {P.shape}")]
    for x, u in zip(*np.nonzero(kernel.feasible)):
        row = P[x, u]
        if not np.all(np.isfinite(row)) or np.any(row < 0):
            out.append(Violation("probability", (int(x), int(u)), "row has negative or non-finite entries"))
        elif abs(row.sum() - 1.0) > ROW_SUM_TOL:
            out.append(Violation("row-stochastic", (int(x), int(u)), f"row sums to {row.sum():.17g}"))
        if not np.all(np.isfinite(g[x, u])):
            out.append(Violation("finite", (int(x), int(u)), "stage cost has non-finite entries"))
    return out


class StageSequence(AbstractModel):
    """Online finite-state discounted MDP: static kernel, revealed costs ``g_0..g_{K-1}``.

    ``H_k(x, u, J) = sum_y p_xy(u) (g_k(x, u, y) + alpha J(y))``.
    """

    def __init__(self, kernel: MdpKernel, stages: Sequence[StageCost], weights=None,
                 offsets: Sequence[float] | None = None):
        if len(stages) < 1:
            raise ContractViolation("a stage sequence needs at least one stage")
        for k, stage in enumerate(stages):
            problems = validate_stage(kernel, stage)
            if problems:
                raise ContractViolation(f"stage {k} invalid: " + "; ".join(map(str, problems)))
        self.kernel = kernel
        self.stages = tuple(stages)
        self.space = StateSpace(kernel.n_states, weights)
        self.feasible = kernel.feasible
        self.horizon = len(self.stages)
        # uniform additive offsets per stage, when the generator knows them
        self.offsets = None if offsets is None else tuple(float(o) for o in offsets)
        self.discount = kernel.discount

        P = kernel.transition
        gbar = np.stack([np.where(self.feasible, (P * s.g).sum(axis=2), 0.0) for s in self.stages])
        gbar.setflags(write=False)
        self._gbar = gbar
        nu = self.space.weights
        ratio = np.where(self.feasible, (P @ nu) / nu[:, None], 0.0)
        self.alpha = float(self.discount * ratio.max())
        if not self.alpha < 1.0:
            raise ContractViolation(f"weights give contraction modulus {self.alpha} >= 1")

    @property
    def expected_costs(self) -> np.ndarray:
        """``gbar[k, x, u] = sum_y p_xy(u) g_k(x, u, y)`` (zero at infeasible pairs)."""
        return self._gbar

    def q_values(self, k, J):
        vals = self._gbar[k] + self.discount * (self.kernel.transition @ J)
        return np.where(self.feasible, vals, np.inf)

    def policy_system(self, k: int, mu) -> tuple[np.ndarray, np.ndarray]:
        """``(P_mu, gbar_mu)`` so that ``J_{k,mu}`` solves ``(I - alpha P_mu) J = gbar_mu``."""
        idx = np.arange(self.n_states)
        return self.kernel.transition[idx, mu], self._gbar[k][idx, mu]

    def with_stages(self, stages, offsets=None) -> "StageSequence":
        return StageSequence(self.kernel, stages, self.space.weights, offsets)


def mdp_mapping(seq: StageSequence, k: int, x: int, u: int, J) -> float:
    """Exact expectation ``sum_y p_xy(u) (g_k(x,u,y) + alpha J(y))``."""
    seq.check_time(k)
    return seq.mapping(k, x, u, J)


class DeterministicControlModel(AbstractModel):
    """``H_k(x, u, J) = g_k(x, u) + alpha J(f(x, u))`` for a finite system ``x' = f(x, u)``."""

    def __init__(self, dynamics, costs: Sequence, discount: float, feasible=None, weights=None):
        f = np.array(dynamics, dtype=np.int64)
        if f.ndim != 2:
            raise ContractViolation("dynamics must be a (n_states, n_actions) table")
        n, A = f.shape
        self.feasible = np.ones((n, A), dtype=bool) if feasible is None else np.array(feasible, dtype=bool)
        if self.feasible.shape != (n, A) or not np.all(self.feasible.any(axis=1)):
            raise ContractViolation("feasible mask must be (n, A) with a feasible action per state")
        if np.any(self.feasible & ((f < 0) | (f >= n))):
            raise ContractViolation("dynamics must map feasible pairs into the state set")
        if not 0.0 < float(discount) < 1.0:
            raise ContractViolation(f"discount must lie in (0, 1), got {discount}")
        g = np.array(costs, dtype=float)
        if g.ndim != 3 or g.shape[1:] != (n, A) or len(g) < 1:
            raise ContractViolation("costs must be a non-empty list of (n_states, n_actions) tables")
        if not np.all(np.isfinite(np.where(self.feasible, g, 0.0))):
            raise ContractViolation("stage costs must be finite")
        f = np.where(self.feasible, f, 0)
        f.setflags(write=False)
        g.setflags(write=False)
        self.dynamics, self.costs = f, g
        self.discount = float(discount)
        self.space = StateSpace(n, weights)
        self.horizon = len(g)
        nu = self.space.weights
        self.alpha = float(self.discount * np.max(np.where(self.feasible, nu[f] / nu[:, None], 0.0)))
        if not self.alpha < 1.0:
            raise ContractViolation(f"weights give contraction modulus {self.alpha} >= 1")

    def q_values(self, k, J):
        return np.where(self.feasible, self.costs[k] + self.discount * J[self.dynamics], np.inf)

    def to_mdp(self) -> StageSequence:
        """Embed as an MDP with the degenerate kernel ``p_{x, f(x,u)}(u) = 1``."""
        n, A = self.dynamics.shape
        P = np.zeros((n, A, n))
        P[np.arange(n)[:, None], np.arange(A)[None, :], self.dynamics] = 1.0
        kernel = MdpKernel(P, self.discount, self.feasible)
        stages = [StageCost.from_pairs(np.where(self.feasible, g, 0.0), n) for g in self.costs]
        return StageSequence(kernel, stages, self.space.weights)


def control_mapping(model: DeterministicControlModel, k: int, x: int, u: int, J) -> float:
    model.check_time(k)
    if not model.feasible[x, u]:
        raise ContractViolation(f"action {u} infeasible at state {x}")
    J = as_cost_table(J, model.space)
    return float(model.costs[k][x, u] + model.discount * J[model.dynamics[x, u]])


# ---------------------------------------------------------------------------
# scenarios

SCENARIO_KINDS = ("static", "sinusoidal", "bounded-random-walk", "piecewise-constant")


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    kernel: MdpKernel
    base_cost: StageCost
    horizon: int
    amplitude: float = 0.0
    period: int = 1
    step_bound: float = 0.0
    switch_times: tuple = ()
    alternates: tuple = ()
    seed: int = 0
    weights: np.ndarray | None = field(default=None)

    def check(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ContractViolation(f"unknown scenario kind {self.kind!r}")
        if int(self.horizon) < 1:
            raise ContractViolation("horizon must be >= 1")
        if self.amplitude < 0:
            raise ContractViolation("amplitude must be nonnegative")
        if self.kind == "sinusoidal" and int(self.period) < 1:
            raise ContractViolation("sinusoidal scenario needs period >= 1")
        if self.step_bound < 0:
            raise ContractViolation("step_bound must be nonnegative")
        if self.kind == "piecewise-constant":
            times = list(self.switch_times)
            if times != sorted(times) or len(times) != len(self.alternates):
                raise ContractViolation("switch_times must be sorted and match alternates one-to-one")
        if not 0 <= int(self.seed) < 2**64:
            raise ContractViolation("seed must be an unsigned 64-bit integer")

    def step_ceiling(self) -> float:
        """Largest per-step entry change the generator can produce (inf for switches)."""
        if self.kind == "sinusoidal":
            return self.amplitude * 2 * math.pi / self.period
        if self.kind == "bounded-random-walk":
            return self.step_bound
        if self.kind == "piecewise-constant" and self.switch_times:
            return math.inf
        return 0.0


def _walk_step(seed: int, k: int, shape, bound: float) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(k)]))
    return rng.uniform(-bound, bound, size=shape)


def generate_scenario(spec: ScenarioSpec) -> StageSequence:
    """Deterministic stage sequence from ``(spec, seed)``."""
    spec.check()
    base = spec.base_cost.g
    K = int(spec.horizon)
    offsets = None
    if spec.kind == "static":
        stages = [spec.base_cost] * K
        offsets = [0.0] * K
    elif spec.kind == "sinusoidal":
        offsets = [spec.amplitude * math.sin(2 * math.pi * k / spec.period) for k in range(K)]
        stages = [StageCost(base + o) for o in offsets]
    elif spec.kind == "bounded-random-walk":
        stages = [spec.base_cost]
        g = base
        for k in range(1, K):
            if spec.step_bound > 0:
                g = g + _walk_step(spec.seed, k, base.shape, spec.step_bound)
            stages.append(StageCost(g))
        if spec.step_bound == 0:
            offsets = [0.0] * K
    else:
        stages = []
        regime = spec.base_cost
        switches = list(zip(spec.switch_times, spec.alternates))
        for k in range(K):
            while switches and switches[0][0] <= k:
                regime = switches.pop(0)[1]
            stages.append(regime)
    return StageSequence(spec.kernel, stages, spec.weights, offsets)


def static_sequence(kernel: MdpKernel, cost: StageCost, horizon: int, weights=None) -> StageSequence:
    return StageSequence(kernel, [cost] * horizon, weights, [0.0] * horizon)


# ---------------------------------------------------------------------------
# canonical instances

def m1_kernel() -> tuple[MdpKernel, StageCost]:
    """One state, one action, self-loop, unit cost, discount 0.5."""
    return MdpKernel(np.ones((1, 1, 1)), 0.5), StageCost(np.ones((1, 1, 1)))


def m2_kernel() -> tuple[MdpKernel, StageCost]:
    """Two states, actions ``a=0`` and ``b=1``, discount 0.9, deterministic moves.

    (0,a) stays at 0 for cost 1; (0,b) moves to 1 for cost 3;
    (1,a) stays at 1 for cost 2; (1,b) moves to 0 for cost 0.
    """
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[0, 1, 1] = P[1, 0, 1] = P[1, 1, 0] = 1.0
    return MdpKernel(P, 0.9), StageCost.from_pairs([[1.0, 3.0], [2.0, 0.0]])


def random_mdp(n_states: int, n_actions: int, seed: int, discount: float = 0.9,
               cost_range=(0.0, 1.0), sparse_feasible: bool = False) -> tuple[MdpKernel, StageCost]:
    """Dense Dirichlet transition rows and uniform costs, seeded."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), n_states, n_actions]))
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    g = rng.uniform(*cost_range, size=(n_states, n_actions, n_states))
    feasible = np.ones((n_states, n_actions), dtype=bool)
    if sparse_feasible and n_actions > 1:
        feasible = rng.random((n_states, n_actions)) < 0.7
        feasible[np.arange(n_states), rng.integers(0, n_actions, n_states)] = True
    return MdpKernel(P, discount, feasible), StageCost(g)


# ---------------------------------------------------------------------------
# JSON documents

def kernel_to_dict(kernel: MdpKernel) -> dict:
    return {
        "n_states": kernel.n_states,
        "n_actions": kernel.n_actions,
        "discount": kernel.discount,
        "transition": kernel.transition.tolist(),
        "feasible": kernel.feasible.tolist(),
    }


def kernel_from_dict(doc: dict) -> MdpKernel:
    return MdpKernel(np.array(doc["transition"], dtype=float), float(doc["discount"]),
                     doc.get("feasible"))


def cost_from_doc(doc, n_states: int) -> StageCost:
    """A cost given either per ``(x, u, y)`` or per ``(x, u)``."""
    arr = np.array(doc, dtype=float)
    if arr.ndim == 2:
        return StageCost.from_pairs(arr, n_states)
    return StageCost(arr)


def sequence_to_dict(seq: StageSequence) -> dict:
    return {
        "kernel": kernel_to_dict(seq.kernel),
        "weights": seq.space.weights.tolist(),
        "stages": [s.g.tolist() for s in seq.stages],
    }


def sequence_from_dict(doc: dict) -> StageSequence:
    kernel = kernel_from_dict(doc["kernel"])
    stages = [cost_from_doc(s, kernel.n_states) for s in doc["stages"]]
    return StageSequence(kernel, stages, doc.get("weights"))

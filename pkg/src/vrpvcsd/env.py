"""Multi-vehicle routing MDP with demands revealed on first visit.

The global state is a value: every transition returns a fresh ``GlobalState``
and never mutates its input.  Customers are indexed 0..n-1; in the distance
matrix node 0 is the depot and customer c is node c + 1.  Actions are ints:
a customer index, ``DEPOT`` or ``RETIRE`` (park at the depot for the rest of
the day -- only used by fixed-route replay).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DataError, UsageError
from .instance import CustomerRealization, DemandScenario, InstanceSpec

DEPOT = -1
RETIRE = -2

# slack for the deadline assertion; feasibility itself is tested exactly
DEADLINE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Problem:
    """Static data of one customer realization."""
    Q: float
    L: float
    m: int
    depot: np.ndarray
    locations: np.ndarray
    dbar: np.ndarray
    dist: np.ndarray          # (n+1, n+1), node 0 = depot
    spec: InstanceSpec
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return len(self.dbar)

    @property
    def to_depot(self) -> np.ndarray:
        return self.dist[0, 1:]

    def node_xy(self, node: int) -> np.ndarray:
        return self.depot if node == 0 else self.locations[node - 1]


def make_problem(realization: CustomerRealization, spec: InstanceSpec) -> Problem:
    depot = np.asarray(spec.area.depot, dtype=float)
    pts = np.vstack([depot[None, :], realization.locations.reshape(-1, 2)])
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    return Problem(float(spec.Q), float(spec.L), int(spec.m), depot,
                   realization.locations.reshape(-1, 2).astype(float), realization.dbar.astype(float),
                   dist, spec)


@dataclass(frozen=True)
class CustomerState:
    id: int
    location: tuple[float, float]
    h: int
    dbar: float
    dhat: float


@dataclass(frozen=True)
class VehicleState:
    id: int
    destination: tuple[float, float]
    node: int
    arrival: float
    capacity_left: float


@dataclass(frozen=True, eq=False)
class GlobalState:
    problem: Problem
    h: np.ndarray          # bool (n,)
    dhat: np.ndarray       # float (n,), -1 until realized
    node: np.ndarray       # int (m,), destination node
    arrival: np.ndarray    # float (m,)
    q: np.ndarray          # float (m,)
    pending: np.ndarray    # bool (m,), arrival not yet processed
    waiting: np.ndarray    # bool (m,), idling at the depot until the next event
    retired: np.ndarray    # bool (m,)
    travel: np.ndarray     # float (m,), cumulative driving time
    clock: float

    # -- views -------------------------------------------------------------
    @property
    def params(self) -> tuple[float, float, tuple[float, float]]:
        p = self.problem
        return p.Q, p.L, (float(p.depot[0]), float(p.depot[1]))

    @property
    def customers(self) -> list[CustomerState]:
        p = self.problem
        return [CustomerState(c, (float(p.locations[c, 0]), float(p.locations[c, 1])), int(self.h[c]),
                              float(p.dbar[c]), float(self.dhat[c])) for c in range(p.n)]

    @property
    def vehicles(self) -> list[VehicleState]:
        p = self.problem
        out = []
        for v in range(p.m):
            xy = p.node_xy(int(self.node[v]))
            out.append(VehicleState(v, (float(xy[0]), float(xy[1])), int(self.node[v]),
                                    float(self.arrival[v]), float(self.q[v])))
        return out

    @property
    def remaining(self) -> np.ndarray:
        """d-tilde: expected demand if unrealized, remaining demand otherwise."""
        return np.where(self.dhat < 0, self.problem.dbar, self.dhat)

    def key(self) -> tuple:
        """Hashable identity of the dynamic part of the state."""
        return (self.h.tobytes(), self.dhat.tobytes(), self.node.tobytes(), self.arrival.tobytes(),
                self.q.tobytes(), self.pending.tobytes(), self.waiting.tobytes(), self.retired.tobytes(),
                self.clock)

    def _replace(self, **kw) -> "GlobalState":
        d = {k: getattr(self, k) for k in _FIELDS}
        d.update(kw)
        return GlobalState(**d)


_FIELDS = ("problem", "h", "dhat", "node", "arrival", "q", "pending", "waiting", "retired", "travel", "clock")


def initial_state(realization: CustomerRealization | Problem, spec: Optional[InstanceSpec] = None) -> GlobalState:
    p = realization if isinstance(realization, Problem) else make_problem(realization, spec)
    if p.m < 1:
        raise UsageError("need at least one vehicle")
    n, m = p.n, p.m
    return GlobalState(p, np.ones(n, dtype=bool), np.full(n, -1.0), np.zeros(m, dtype=np.int64),
                       np.zeros(m), np.full(m, p.Q), np.zeros(m, dtype=bool), np.zeros(m, dtype=bool),
                       np.zeros(m, dtype=bool), np.zeros(m), 0.0)


# ---------------------------------------------------------------------------
# feasibility

def feasible_mask(state: GlobalState, v: int) -> np.ndarray:
    p = state.problem
    row = p.dist[state.node[v], 1:]
    return state.h & (row + p.dist[0, 1:] <= p.L - state.clock)


def feasible_customers(state: GlobalState, v: int) -> set[int]:
    return set(np.flatnonzero(feasible_mask(state, v)).tolist())


def is_active(state: GlobalState, v: int) -> bool:
    return bool(state.arrival[v] == state.clock and not state.retired[v])


def active_vehicles(state: GlobalState) -> np.ndarray:
    return np.flatnonzero((state.arrival == state.clock) & ~state.retired)


def decentralized_action_space(state: GlobalState, v: int,
                               targets: Optional[Sequence[int]] = None) -> list[int]:
    """Actions open to the active vehicle v.

    Customers come from ``targets`` (all feasible customers when None), in that
    order, followed by the depot when allowed: the depot is the only option at
    zero capacity and is excluded at the depot while a customer is reachable.
    """
    if not is_active(state, v):
        raise UsageError(f"vehicle {v} is not active at t={state.clock}")
    if state.q[v] <= 0:
        return [DEPOT]
    mask = feasible_mask(state, v)
    if targets is None:
        J = np.flatnonzero(mask).tolist()
    else:
        J = [int(c) for c in targets if mask[c]]
    if state.node[v] == 0 and J:
        return J
    return J + [DEPOT]


def redefined_action_space(state: GlobalState, v: int) -> list[int]:
    """Non-preemptive set used by the random and greedy benchmarks."""
    if not is_active(state, v):
        raise UsageError(f"vehicle {v} is not active at t={state.clock}")
    if state.q[v] <= 0:
        return [DEPOT]
    J = np.flatnonzero(feasible_mask(state, v)).tolist()
    return J if J else [DEPOT]


def _current_action(state: GlobalState, v: int) -> int:
    nd = int(state.node[v])
    return DEPOT if nd == 0 else nd - 1


def centralized_action_space(state: GlobalState, cap: int = 8) -> list[tuple[int, ...]]:
    """All joint actions of the centralized formulation (small instances only)."""
    p = state.problem
    if p.n > cap:
        raise UsageError(f"{p.n} customers exceed the enumeration cap {cap}")
    act = set(active_vehicles(state).tolist())
    J = {v: set(np.flatnonzero(feasible_mask(state, v)).tolist()) for v in act}
    options = []
    for v in range(p.m):
        if v not in act:
            options.append([_current_action(state, v)])
        elif state.q[v] <= 0:
            options.append([DEPOT])
        else:
            options.append(sorted(J[v]) + [DEPOT])
    out = []
    for joint in itertools.product(*options):
        chosen = [a for v, a in enumerate(joint) if v in act and a != DEPOT]
        if len(chosen) != len(set(chosen)):
            continue
        ok = True
        for v in act:
            if joint[v] == DEPOT and state.node[v] == 0:
                others = {joint[u] for u in act if u != v and joint[u] != DEPOT}
                if J[v] - others:
                    ok = False
                    break
        if ok:
            out.append(tuple(joint))
    return out


# ---------------------------------------------------------------------------
# transitions

def _next_clock(arrival: np.ndarray, retired: np.ndarray, clock: float) -> float:
    live = arrival[~retired]
    if live.size == 0:
        return clock
    t = float(live.min())
    return clock if t == np.inf else t


def apply_action(state: GlobalState, v: int, a: int, check: bool = True) -> GlobalState:
    """Commit vehicle v to action a; returns the post-decision state."""
    p = state.problem
    if check:
        if not is_active(state, v):
            raise ContractError(f"vehicle {v} is not active at t={state.clock}")
        if a == RETIRE:
            if state.node[v] != 0:
                raise ContractError("a vehicle can only retire at the depot")
        elif a not in decentralized_action_space(state, v):
            raise ContractError(f"action {a} is infeasible for vehicle {v} at t={state.clock}")
    h, node, arrival = state.h, state.node.copy(), state.arrival.copy()
    pending, waiting, retired = state.pending.copy(), state.waiting.copy(), state.retired
    travel = state.travel
    t = state.clock
    cur = int(node[v])
    waiting[v] = False
    if a >= 0:
        h = h.copy()
        h[a] = False
        d = p.dist[cur, a + 1]
        node[v] = a + 1
        arrival[v] = t + d
        pending[v] = True
        travel = travel.copy()
        travel[v] += d
    elif a == DEPOT:
        if cur == 0:
            waiting[v] = True
        else:
            d = p.dist[cur, 0]
            node[v] = 0
            arrival[v] = t + d
            pending[v] = True
            travel = travel.copy()
            travel[v] += d
    elif a == RETIRE:
        retired = retired.copy()
        retired[v] = True
        arrival[v] = np.inf
    else:
        raise ContractError(f"unknown action {a}")
    if waiting.any():
        # idle vehicles wake at the next arrival of a moving vehicle
        moving = ~waiting & ~retired & (arrival > t)
        wake = float(arrival[moving].min()) if moving.any() else np.inf
        sleepers = waiting & (arrival > t) | (waiting & (np.arange(p.m) == v))
        arrival[sleepers] = wake
        pending[sleepers] = False
    clock = _next_clock(arrival, retired, t)
    return GlobalState(p, h, state.dhat, node, arrival, state.q, pending, waiting, retired, travel, clock)


def _demand_array(scenario) -> np.ndarray:
    return scenario.realized if isinstance(scenario, DemandScenario) else np.asarray(scenario)


def reveal_and_advance(state: GlobalState, scenario) -> tuple[GlobalState, list[tuple[int, float]]]:
    """Process every vehicle arriving at the current clock.

    Demand is realized on the first visit; the vehicle serves min(remaining, q),
    customers left with demand become available again, and depot arrivals
    refill to Q.
    """
    arriving = np.flatnonzero(state.pending & (state.arrival == state.clock) & ~state.retired)
    if arriving.size == 0:
        return state, []
    p = state.problem
    w = _demand_array(scenario)
    h, dhat, q, pending = state.h.copy(), state.dhat.copy(), state.q.copy(), state.pending.copy()
    served = []
    for v in arriving.tolist():
        nd = int(state.node[v])
        pending[v] = False
        if nd == 0:
            q[v] = p.Q
            served.append((v, 0.0))
            continue
        c = nd - 1
        if dhat[c] < 0:
            if c >= len(w):
                raise DataError(f"scenario has no demand for customer {c}")
            dhat[c] = w[c]
        eta = min(dhat[c], q[v])
        dhat[c] -= eta
        q[v] -= eta
        h[c] = dhat[c] > 0
        served.append((v, float(eta)))
    return GlobalState(p, h, dhat, state.node, state.arrival, q, pending, state.waiting, state.retired,
                       state.travel, state.clock), served


def select_active_vehicle(state: GlobalState, rng: Optional[np.random.Generator] = None) -> int:
    """Uniform among vehicles active at the clock; lowest id when rng is None."""
    act = active_vehicles(state)
    if act.size == 0:
        raise ContractError("no active vehicle")
    if rng is None or act.size == 1:
        return int(act[0])
    return int(act[rng.integers(act.size)])


def is_terminal(state: GlobalState) -> bool:
    live = ~state.retired
    if not live.any():
        return True
    if (state.node[live] != 0).any():
        return False
    if (state.arrival[live & ~state.waiting] > state.clock).any():
        return False
    p = state.problem
    return not (state.h & (2.0 * p.dist[0, 1:] <= p.L - state.clock)).any()


# ---------------------------------------------------------------------------
# logging

@dataclass
class EpochRecord:
    epoch: int
    vehicle: int
    action: int
    clock: float
    served: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class EpisodeLog:
    records: list[EpochRecord] = field(default_factory=list)
    initial_served: list[tuple[int, float]] = field(default_factory=list)
    total_served: float = 0.0
    travel: np.ndarray = field(default_factory=lambda: np.zeros(0))
    final_state: Optional[GlobalState] = None

    def to_lines(self) -> list[str]:
        return [json.dumps({"epoch": r.epoch, "vehicle": r.vehicle, "action": r.action,
                            "clock": r.clock, "served": r.served}) for r in self.records]


def check_invariants(prev: GlobalState, nxt: GlobalState) -> None:
    """Raise AssertionError when a transition breaks a structural invariant."""
    p = nxt.problem
    assert nxt.clock >= prev.clock, "clock went backwards"
    assert (nxt.q >= 0).all() and (nxt.q <= p.Q).all(), "capacity out of bounds"
    done = nxt.dhat >= 0
    assert (nxt.dhat[done] >= 0).all()
    back = (nxt.node == 0) & ~nxt.retired
    assert (nxt.arrival[back & ~nxt.waiting] <= p.L + DEADLINE_TOL).all(), "depot arrival after L"

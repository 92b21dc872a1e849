"""Routing policies and the episode driver.

Every policy exposes ``decide(state, v, rng) -> action`` where the action is a
customer index, ``DEPOT`` or ``RETIRE``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import neuralnet as nn
from .env import (DEPOT, RETIRE, EpisodeLog, EpochRecord, GlobalState, Problem, active_vehicles,
                  apply_action, check_invariants, feasible_mask, initial_state, is_terminal,
                  make_problem, redefined_action_space, reveal_and_advance, select_active_vehicle)
from .errors import DataError, StorageError, UsageError
from .instance import CustomerRealization, DemandScenario, InstanceSpec, sample_demand_matrix
from .observation import ObservationConfig, action_mask, observe

GAMMA = 0.999


# ---------------------------------------------------------------------------
# benchmark rules

def random_decide(state: GlobalState, v: int, rng: np.random.Generator) -> int:
    acts = redefined_action_space(state, v)
    return acts[0] if len(acts) == 1 else acts[int(rng.integers(len(acts)))]


def greedy_decide(state: GlobalState, v: int) -> int:
    """Largest d~ among reachable customers; ties by distance, then index."""
    acts = redefined_action_space(state, v)
    if acts == [DEPOT]:
        return DEPOT
    cand = np.asarray(acts)
    rem = state.remaining[cand]
    tau = state.problem.dist[state.node[v], cand + 1]
    return int(cand[np.lexsort((cand, tau, -rem))[0]])


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> int:
    return int(np.argmax(np.where(mask, q, -np.inf)))


def q_decide(state: GlobalState, v: int, params: nn.MlpParams, cfg: ObservationConfig) -> int:
    obs, targets = observe(state, v, cfg)
    mask = action_mask(state, v, targets, cfg)
    i = masked_argmax(nn.forward(params, obs), mask)
    return DEPOT if i == cfg.n_tilde else targets[i]


# ---------------------------------------------------------------------------
# rollout

def _branches(P: GlobalState, W: np.ndarray, idx: np.ndarray):
    """Reveal step from post-decision state P, grouped by the demand values it reads.

    Scenarios that agree on every customer revealed at this step lead to the
    same successor, so each distinct successor is built once.
    """
    arriving = np.flatnonzero(P.pending & (P.arrival == P.clock) & ~P.retired)
    nodes = P.node[arriving]
    cust = nodes[nodes > 0] - 1
    cust = cust[P.dhat[cust] < 0]
    if cust.size == 0:
        s, _ = reveal_and_advance(P, W[idx[0]])
        return [(s, idx)]
    if cust.size == 1:
        _, first, inv = np.unique(W[idx, cust[0]], return_index=True, return_inverse=True)
    else:
        _, first, inv = np.unique(W[np.ix_(idx, cust)], axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    out = []
    for g in range(len(first)):
        sub = idx[inv == g]
        s, _ = reveal_and_advance(P, W[sub[0]])
        out.append((s, sub))
    return out


def _next_vehicle(state: GlobalState) -> int:
    return int(active_vehicles(state)[0])


def rollout_values(state: GlobalState, v: int, params: nn.MlpParams, cfg: ObservationConfig,
                   W: np.ndarray, gamma: float = GAMMA) -> tuple[list[int], np.ndarray]:
    """Two-step lookahead value of every candidate action, averaged over scenarios W.

    value(x) = mean_w [ R(x) + gamma R(x') + gamma^2 max Q(o'') ], where R is the
    expected (non-delayed) reward d~ of a customer action, x' is the base
    policy's choice for the next active vehicle and the max runs over the
    feasible actions of the vehicle active after that.  Terminal states
    contribute nothing further.
    """
    _, targets = observe(state, v, cfg)
    acts = action_list(state, v, targets, cfg)
    nW = W.shape[0]
    all_idx = np.arange(nW)
    rem0 = state.remaining
    total = np.array([rem0[x] * nW if x >= 0 else 0.0 for x in acts], dtype=float)

    # step 1: branch on the first reveal and pick the base action
    level1 = []          # (candidate, s1, idx, v1, targets1, mask1)
    obs1 = []
    for i, x in enumerate(acts):
        P = apply_action(state, v, x, check=False)
        for s1, idx in _branches(P, W, all_idx):
            if is_terminal(s1):
                continue
            v1 = _next_vehicle(s1)
            o, tg = observe(s1, v1, cfg, check=False)
            level1.append((i, s1, idx, v1, tg, action_mask(s1, v1, tg, cfg)))
            obs1.append(o)
    if not level1:
        return acts, total / nW
    Q1 = nn.forward(params, np.asarray(obs1))

    # step 2: apply the base action, branch again and bootstrap with max Q
    leaves = []          # (candidate, weight, mask2)
    obs2 = []
    for (i, s1, idx, v1, tg, mask), q in zip(level1, Q1):
        k = masked_argmax(q, mask)
        x1 = DEPOT if k == cfg.n_tilde else tg[k]
        if x1 >= 0:
            total[i] += gamma * s1.remaining[x1] * len(idx)
        P2 = apply_action(s1, v1, x1, check=False)
        for s2, idx2 in _branches(P2, W, idx):
            if is_terminal(s2):
                continue
            v2 = _next_vehicle(s2)
            o, tg2 = observe(s2, v2, cfg, check=False)
            leaves.append((i, len(idx2), action_mask(s2, v2, tg2, cfg)))
            obs2.append(o)
    if leaves:
        Q2 = nn.forward(params, np.asarray(obs2))
        for (i, w, mask), q in zip(leaves, Q2):
            total[i] += gamma * gamma * w * float(q[mask].max())
    return acts, total / nW


def action_list(state: GlobalState, v: int, targets: Sequence[int], cfg: ObservationConfig) -> list[int]:
    mask = action_mask(state, v, targets, cfg)
    acts = [int(targets[i]) for i in range(len(targets)) if mask[i]]
    if mask[-1]:
        acts.append(DEPOT)
    return acts


def rollout_decide(state: GlobalState, v: int, params: nn.MlpParams, cfg: ObservationConfig,
                   W: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None,
                   n_scenarios: int = 50, gamma: float = GAMMA) -> int:
    """Best candidate by two-step lookahead; the first listed action wins ties."""
    _, targets = observe(state, v, cfg)
    acts = action_list(state, v, targets, cfg)
    if len(acts) == 1:
        return acts[0]
    if W is None:
        if rng is None:
            raise UsageError("rollout needs either scenarios W or an rng to sample them")
        p = state.problem
        W = sample_demand_matrix(p.dbar, p.spec, n_scenarios, rng)
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] < 1:
        raise UsageError("W must be a non-empty (scenarios, customers) array")
    acts, vals = rollout_values(state, v, params, cfg, W, gamma)
    return acts[int(np.argmax(vals))]


# ---------------------------------------------------------------------------
# fixed routes with classical recourse

Route = list  # customer indices, depot implicit at both ends


def fixed_route_decide(state: GlobalState, v: int, routes: Sequence[Sequence[int]]) -> int:
    """Next move of vehicle v when following its a-priori route.

    The vehicle visits its customers in order, restocking whenever capacity
    runs out; once the next leg plus the return no longer fits in the
    remaining time it goes home and parks.
    """
    p = state.problem
    at_depot = state.node[v] == 0
    if state.q[v] <= 0:
        return DEPOT
    route = routes[v] if v < len(routes) else ()
    for c in route:
        if state.dhat[c] < 0 or state.dhat[c] > 0:
            if p.dist[state.node[v], c + 1] + p.dist[0, c + 1] <= p.L - state.clock:
                return int(c)
            break
    return RETIRE if at_depot else DEPOT


def simulate_fixed_routes(routes: Sequence[Sequence[int]], realization: CustomerRealization | Problem,
                          scenario, spec: Optional[InstanceSpec] = None) -> float:
    """Served demand when each vehicle follows its route under classical recourse."""
    p = realization if isinstance(realization, Problem) else make_problem(realization, spec)
    w = scenario.realized if isinstance(scenario, DemandScenario) else np.asarray(scenario)
    check_routes(routes, p.n)
    if len(routes) > p.m:
        raise DataError(f"{len(routes)} routes for {p.m} vehicles")
    D = p.dist
    served = 0.0
    for route in routes:
        t, pos, q = 0.0, 0, p.Q
        rem = {}
        while True:
            a = DEPOT
            if q > 0:
                a = RETIRE if pos == 0 else DEPOT
                for c in route:
                    if rem.get(c, 1.0) > 0:
                        if D[pos, c + 1] + D[0, c + 1] <= p.L - t:
                            a = c
                        break
            if a == RETIRE:
                break
            if a == DEPOT:
                t += D[pos, 0]
                pos, q = 0, p.Q
                continue
            t += D[pos, a + 1]
            pos = a + 1
            r = rem.get(a, float(w[a]))
            eta = min(r, q)
            rem[a] = r - eta
            q -= eta
            served += eta
    return served


def check_routes(routes: Sequence[Sequence[int]], n: int) -> None:
    seen = set()
    for r in routes:
        for c in r:
            if not 0 <= c < n:
                raise DataError(f"route references unknown customer index {c}")
            if c in seen:
                raise DataError(f"customer index {c} appears in more than one route position")
            seen.add(c)


def read_routes(path, realization: Optional[CustomerRealization] = None) -> list[list[int]]:
    """One vehicle per line, whitespace-separated customer ids; returns indices."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    id_to_idx = None
    if realization is not None:
        id_to_idx = {int(i): k for k, i in enumerate(realization.ids)}
    routes = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0]
        try:
            ids = [int(t) for t in line.split()]
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
        if id_to_idx is None:
            routes.append([i - 1 for i in ids])
        else:
            try:
                routes.append([id_to_idx[i] for i in ids])
            except KeyError as e:
                raise DataError(f"{path}:{lineno}: unknown customer id {e.args[0]}") from e
    return routes


def write_routes(routes: Sequence[Sequence[int]], path, realization: Optional[CustomerRealization] = None) -> None:
    ids = realization.ids if realization is not None else None
    text = "\n".join(" ".join(str(int(ids[c]) if ids is not None else c + 1) for c in r) for r in routes)
    try:
        Path(path).write_text(text + "\n")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


# ---------------------------------------------------------------------------
# policy objects

class Policy:
    name = "policy"

    def decide(self, state: GlobalState, v: int, rng: np.random.Generator) -> int:
        raise NotImplementedError


@dataclass
class RandomPolicy(Policy):
    name = "random"

    def decide(self, state, v, rng):
        return random_decide(state, v, rng)


@dataclass
class GreedyPolicy(Policy):
    name = "greedy"

    def decide(self, state, v, rng):
        return greedy_decide(state, v)


@dataclass
class GreedyQPolicy(Policy):
    params: nn.MlpParams
    cfg: ObservationConfig = field(default_factory=ObservationConfig)
    name = "decqn"

    def decide(self, state, v, rng):
        return q_decide(state, v, self.params, self.cfg)


@dataclass
class RolloutPolicy(Policy):
    params: nn.MlpParams
    cfg: ObservationConfig = field(default_factory=ObservationConfig)
    n_scenarios: int = 50
    gamma: float = GAMMA
    name = "rollout"

    def __post_init__(self):
        if self.n_scenarios < 1:
            raise UsageError("rollout needs at least one scenario")

    def decide(self, state, v, rng):
        return rollout_decide(state, v, self.params, self.cfg, rng=rng, n_scenarios=self.n_scenarios,
                              gamma=self.gamma)


@dataclass
class FixedRoutesPolicy(Policy):
    routes: list
    name = "fixed"

    def decide(self, state, v, rng):
        return fixed_route_decide(state, v, self.routes)


def run_episode(policy: Policy, realization: CustomerRealization | Problem, scenario,
                spec: Optional[InstanceSpec] = None, rng: Optional[np.random.Generator] = None,
                check: bool = False, record: bool = False) -> EpisodeLog:
    """Drive the environment with ``policy`` until the day ends.

    With ``check`` every transition is validated and the structural invariants
    are asserted; with ``record`` the per-epoch records are kept.
    """
    p = realization if isinstance(realization, Problem) else make_problem(realization, spec)
    if rng is None:
        rng = np.random.default_rng(0)
    s = initial_state(p)
    log = EpisodeLog()
    total = 0.0
    k = 0
    while not is_terminal(s):
        v = select_active_vehicle(s, rng)
        a = policy.decide(s, v, rng)
        s2 = apply_action(s, v, a, check=check)
        s3, served = reveal_and_advance(s2, scenario)
        for _, eta in served:
            total += eta
        if check:
            check_invariants(s, s3)
        if record:
            log.records.append(EpochRecord(k, v, int(a), float(s.clock), served))
        s = s3
        k += 1
    log.total_served = total
    log.travel = s.travel.copy()
    log.final_state = s
    return log

"""Fixed-size observation of the global state from the active vehicle's seat.

Layout of the vector (length 6*n_tilde + 2*|P| + 3*m + 1 + |extras|)::

    F  n_tilde target slots x (x, y, tau(c, v), tau(c, depot), d~, min(d~, q_v))
    H  per partition (customer count, summed d~)
    G  per vehicle (a_u - t, q_u, tau(l_u, depot)); the active vehicle first,
       then the others in id order
    t  clock
    extras  duration limit and/or variability code

Unused target slots are zero.  Output i of the Q-network maps to target i; the
last output is the depot.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .env import DEPOT, GlobalState, feasible_mask, is_active
from .errors import UsageError
from .instance import VARIABILITY_CODE, InstanceSpec

EXTRA_DURATION = "duration"
EXTRA_VARIABILITY = "variability"
N_TARGET_FEATURES = 6


@dataclass(frozen=True)
class ObservationConfig:
    n_tilde: int = 10
    partitions: tuple[int, int] = (5, 5)          # (cols, rows) over the service area
    extras: tuple[str, ...] = ()
    # optional elementwise affine map applied to the raw vector: (x - shift) * scale
    shift: Optional[tuple[float, ...]] = None
    scale: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.n_tilde < 1:
            raise UsageError("n_tilde must be >= 1")
        if self.partitions[0] < 1 or self.partitions[1] < 1:
            raise UsageError("partition grid must be at least 1x1")
        for e in self.extras:
            if e not in (EXTRA_DURATION, EXTRA_VARIABILITY):
                raise UsageError(f"unknown observation extra {e!r}")

    @property
    def n_partitions(self) -> int:
        return self.partitions[0] * self.partitions[1]

    @property
    def n_actions(self) -> int:
        return self.n_tilde + 1

    def size(self, m: int) -> int:
        return N_TARGET_FEATURES * self.n_tilde + 2 * self.n_partitions + 3 * m + 1 + len(self.extras)

    def blocks(self, m: int) -> dict[str, slice]:
        f = N_TARGET_FEATURES * self.n_tilde
        h = f + 2 * self.n_partitions
        g = h + 3 * m
        return {"F": slice(0, f), "H": slice(f, h), "G": slice(g - 3 * m, g), "t": slice(g, g + 1),
                "extras": slice(g + 1, g + 1 + len(self.extras))}


def score(remaining: float, q: float, tau: float) -> float:
    num = min(remaining, q)
    if tau <= 0:
        return float("inf")
    return num / tau


def _partition_index(state: GlobalState, cfg: ObservationConfig) -> np.ndarray:
    p = state.problem
    key = ("partition", cfg.partitions)
    idx = p.cache.get(key)
    if idx is None:
        area = p.spec.area
        cols, rows = cfg.partitions
        cx = np.clip(np.floor(p.locations[:, 0] / (area.width / cols)), 0, cols - 1)
        cy = np.clip(np.floor(p.locations[:, 1] / (area.height / rows)), 0, rows - 1)
        idx = (cy * cols + cx).astype(np.int64)
        p.cache[key] = idx
    return idx


def _vehicle_order(p, v: int) -> np.ndarray:
    key = ("vorder", v)
    order = p.cache.get(key)
    if order is None:
        order = np.concatenate(([v], np.delete(np.arange(p.m), v)))
        p.cache[key] = order
    return order


def select_targets(state: GlobalState, v: int, cfg: ObservationConfig) -> list[int]:
    """Top-n_tilde feasible customers by min(d~, q)/tau; ties: smaller tau, then id."""
    return _targets(state, v, cfg, state.remaining)[0].tolist()


def _targets(state, v, cfg, remaining):
    p = state.problem
    cand = np.flatnonzero(feasible_mask(state, v))
    tau = p.dist[state.node[v], cand + 1]
    if cand.size == 0:
        return cand, tau
    num = np.minimum(remaining[cand], state.q[v])
    pos = tau > 0
    rho = np.full(cand.size, np.inf)
    np.divide(num, tau, out=rho, where=pos)
    if cand.size == 1:
        return cand, tau
    order = np.lexsort((cand, tau, -rho))[:cfg.n_tilde]
    return cand[order], tau[order]


@dataclass(frozen=True)
class Heatmap:
    count: np.ndarray
    demand: np.ndarray


def build_heatmap(state: GlobalState, cfg: ObservationConfig) -> Heatmap:
    rem = state.remaining
    live = state.h | (state.dhat > 0)
    idx = _partition_index(state, cfg)[live]
    P = cfg.n_partitions
    return Heatmap(np.bincount(idx, minlength=P).astype(float),
                   np.bincount(idx, weights=rem[live], minlength=P).astype(float))


def extra_values(spec: InstanceSpec, cfg: ObservationConfig) -> list[float]:
    out = []
    for e in cfg.extras:
        if e == EXTRA_DURATION:
            out.append(float(spec.L))
        else:
            out.append(VARIABILITY_CODE[spec.variability] if spec.variability is not None else 0.0)
    return out


def observe(state: GlobalState, v: int, cfg: ObservationConfig,
            spec: Optional[InstanceSpec] = None, check: bool = True) -> tuple[np.ndarray, list[int]]:
    """Observation vector and the ordered target list for active vehicle v."""
    if check and not is_active(state, v):
        raise UsageError(f"vehicle {v} is not active at t={state.clock}")
    p = state.problem
    spec = spec if spec is not None else p.spec
    m, nt = p.m, cfg.n_tilde
    out = np.zeros(cfg.size(m))
    rem = state.remaining

    # F
    tg, tau = _targets(state, v, cfg, rem)
    k = tg.size
    if k:
        F = out[:N_TARGET_FEATURES * nt].reshape(nt, N_TARGET_FEATURES)
        F[:k, 0:2] = p.locations[tg]
        F[:k, 2] = tau
        F[:k, 3] = p.dist[0, tg + 1]
        F[:k, 4] = rem[tg]
        F[:k, 5] = np.minimum(rem[tg], state.q[v])

    # H
    base = N_TARGET_FEATURES * nt
    P = cfg.n_partitions
    live = state.h | (state.dhat > 0)
    if live.any():
        idx = _partition_index(state, cfg)[live]
        H = out[base:base + 2 * P].reshape(P, 2)
        H[:, 0] = np.bincount(idx, minlength=P)
        H[:, 1] = np.bincount(idx, weights=rem[live], minlength=P)

    # G
    g0 = base + 2 * P
    order = _vehicle_order(p, v)
    rel = state.arrival[order] - state.clock
    rel[~np.isfinite(rel)] = 0.0            # idle or parked at the depot
    G = out[g0:g0 + 3 * m].reshape(m, 3)
    G[:, 0] = rel
    G[:, 1] = state.q[order]
    G[:, 2] = p.dist[state.node[order], 0]

    out[g0 + 3 * m] = state.clock
    if cfg.extras:
        out[g0 + 3 * m + 1:] = extra_values(spec, cfg)
    if cfg.scale is not None:
        shift = np.asarray(cfg.shift) if cfg.shift is not None else 0.0
        out = (out - shift) * np.asarray(cfg.scale)
    return out, tg.tolist()


def action_mask(state: GlobalState, v: int, targets: Sequence[int], cfg: ObservationConfig) -> np.ndarray:
    """Boolean mask over the n_tilde + 1 network outputs (last slot = depot)."""
    mask = np.zeros(cfg.n_actions, dtype=bool)
    if state.q[v] <= 0:
        mask[-1] = True
        return mask
    k = len(targets)
    mask[:k] = True
    mask[-1] = not (state.node[v] == 0 and k > 0)
    return mask


def index_to_action(i: int, targets: Sequence[int], cfg: ObservationConfig) -> int:
    return DEPOT if i == cfg.n_tilde else int(targets[i])


def action_to_index(a: int, targets: Sequence[int], cfg: ObservationConfig) -> int:
    if a == DEPOT:
        return cfg.n_tilde
    return list(targets).index(a)


def dump_rows(rows: Sequence[np.ndarray]) -> str:
    """Text dump of observation vectors, one per line."""
    return "\n".join(" ".join(repr(float(x)) for x in r) for r in rows)

"""Deterministic multi-trip model (served-demand maximization) and LP-file plumbing.

Nodes are 0 (depot) and 1..n (customers, node i = customer index i - 1).  The
model is only built and exported; solving is left to an external MILP solver.
A brute-force oracle for tiny instances lives here as well.
"""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, StorageError, UsageError


@dataclass
class Var:
    name: str
    lb: float
    ub: float
    binary: bool = False


@dataclass
class Constraint:
    name: str
    coefs: dict[str, float]
    sense: str             # "<=", ">=", "="
    rhs: float


@dataclass
class MilpModel:
    n_nodes: int           # |N| including the depot
    m: int
    E: int
    Q: float
    L: float
    demand: np.ndarray     # (|N|,), depot entry 0
    tau: np.ndarray        # (|N|, |N|)
    variables: dict[str, Var] = field(default_factory=dict)
    objective: dict[str, float] = field(default_factory=dict)
    constraints: list[Constraint] = field(default_factory=list)
    big_m: dict[str, float] = field(default_factory=dict)

    def add_var(self, name, lb, ub, binary=False):
        self.variables[name] = Var(name, lb, ub, binary)
        return name

    def add(self, name, coefs, sense, rhs):
        c = {}
        for k, v in coefs:
            c[k] = c.get(k, 0.0) + v
        self.constraints.append(Constraint(name, c, sense, float(rhs)))

    def count(self, prefix: str) -> int:
        return sum(1 for k in self.variables if k.startswith(prefix + "_"))


# variable names: indices are (vehicle, trip, node[, node])
def X(v, e, i): return f"x_{v}_{e}_{i}"
def Y(v, e, i, j): return f"y_{v}_{e}_{i}_{j}"
def LAM(v, e, i): return f"lam_{v}_{e}_{i}"
def QV(v, e, i): return f"q_{v}_{e}_{i}"
def T(v, e, i): return f"t_{v}_{e}_{i}"
def TL(v, e): return f"tl_{v}_{e}"


def distance_matrix(locations: np.ndarray, depot: Sequence[float]) -> np.ndarray:
    pts = np.vstack([np.asarray(depot, dtype=float)[None, :], np.asarray(locations, dtype=float).reshape(-1, 2)])
    d = pts[:, None, :] - pts[None, :, :]
    return np.sqrt((d ** 2).sum(-1))


def trip_upper_bound(tau: np.ndarray, demand: Sequence[float], Q: float, L: float) -> int:
    """Trips a vehicle makes serving customers one per trip, nearest first.

    A customer whose demand exceeds Q is revisited after subtracting Q (so a
    customer costs ceil(d / Q) trips); the count stops once the next round trip
    no longer fits, or once the customer list is exhausted.
    """
    if not (Q > 0) or math.isinf(L):
        raise UsageError("trip bound needs Q > 0 and a finite L")
    d = np.asarray(demand, dtype=float).copy()
    n = len(d)
    order = sorted(range(n), key=lambda c: (tau[0, c + 1], c))
    E, i, l = 0, 0, 0.0
    while l <= L:
        if i >= n:
            return E
        c = order[i]
        rt = tau[0, c + 1] + tau[c + 1, 0]
        if l + rt > L:
            return E
        l += rt
        E += 1
        if d[c] > Q:
            d[c] -= Q
        else:
            i += 1
    return E


def build_model(tau: np.ndarray, demand: Sequence[float], Q: float, L: float, m: int, E: int) -> MilpModel:
    """Multi-trip served-demand model.

    ``tau`` is the node distance matrix (node 0 = depot) and ``demand`` the
    deterministic customer demands (expected values for a priori routing).
    """
    if E < 1:
        raise UsageError("the model needs at least one trip (E >= 1)")
    if m < 1:
        raise UsageError("the model needs at least one vehicle")
    N = tau.shape[0]
    dem = np.concatenate([[0.0], np.asarray(demand, dtype=float)])
    if len(dem) != N:
        raise UsageError("demand vector does not match the distance matrix")
    mdl = MilpModel(N, m, E, float(Q), float(L), dem, tau)
    M_card = float(N * N)
    M_cap = float(Q)
    M_time = float(L + tau.max())
    mdl.big_m = {"cardinality": M_card, "capacity": M_cap, "time": M_time}
    nodes = range(N)
    cust = range(1, N)
    V, Es = range(m), range(E)

    for v in V:
        for e in Es:
            for i in nodes:
                mdl.add_var(X(v, e, i), 0.0, Q)
                mdl.add_var(LAM(v, e, i), 0.0, 1.0, binary=True)
                mdl.add_var(QV(v, e, i), 0.0, Q)
                mdl.add_var(T(v, e, i), 0.0, L)
                for j in nodes:
                    mdl.add_var(Y(v, e, i, j), 0.0, 1.0, binary=True)
            mdl.add_var(TL(v, e), 0.0, L)
    for v in V:
        for e in Es:
            for i in nodes:
                mdl.objective[X(v, e, i)] = 1.0

    for v in V:
        for e in Es:
            for i in nodes:
                mdl.add(f"out_{v}_{e}_{i}", [(Y(v, e, i, j), 1.0) for j in nodes], "<=", 1)
                mdl.add(f"in_{v}_{e}_{i}", [(Y(v, e, j, i), 1.0) for j in nodes], "<=", 1)
                mdl.add(f"noloop_{v}_{e}_{i}", [(Y(v, e, i, i), 1.0)], "=", 0)
            mdl.add(f"leave_{v}_{e}", [(Y(v, e, 0, i), 1.0) for i in nodes]
                    + [(LAM(v, e, i), -1.0) for i in nodes], "<=", 0)
            for i in nodes:
                mdl.add(f"flowin_{v}_{e}_{i}", [(Y(v, e, j, i), 1.0) for j in nodes] + [(LAM(v, e, i), -1.0)], "=", 0)
                mdl.add(f"flowout_{v}_{e}_{i}", [(Y(v, e, i, j), 1.0) for j in nodes] + [(LAM(v, e, i), -1.0)], "=", 0)
            if e > 0:
                mdl.add(f"seqarc_{v}_{e}", [(Y(v, e, i, j), 1.0) for i in nodes for j in nodes]
                        + [(Y(v, e - 1, i, j), -M_card) for i in nodes for j in nodes], "<=", 0)
                mdl.add(f"seqvis_{v}_{e}", [(LAM(v, e, i), 1.0) for i in nodes]
                        + [(LAM(v, e - 1, i), -M_card) for i in nodes], "<=", 0)
            for i in nodes:
                mdl.add(f"serve_{v}_{e}_{i}", [(X(v, e, i), 1.0), (LAM(v, e, i), -max(dem[i], Q))], "<=", 0)
            mdl.add(f"depotx_{v}_{e}", [(X(v, e, 0), 1.0)], "=", 0)
    for i in nodes:
        mdl.add(f"demand_{i}", [(X(v, e, i), 1.0) for v in V for e in Es], "<=", dem[i])
    for v in V:
        for e in Es:
            for i in nodes:
                mdl.add(f"cap_{v}_{e}_{i}", [(X(v, e, i), 1.0), (QV(v, e, i), -1.0)], "<=", 0)
            mdl.add(f"load_{v}_{e}", [(X(v, e, i), 1.0) for i in nodes], "<=", Q)
            for j in nodes:
                # capacity on leaving the depot
                mdl.add(f"qstartub_{v}_{e}_{j}", [(QV(v, e, j), 1.0), (Y(v, e, 0, j), M_cap)], "<=", Q + M_cap)
                mdl.add(f"qstartlb_{v}_{e}_{j}", [(QV(v, e, j), 1.0), (Y(v, e, 0, j), -M_cap)], ">=", Q - M_cap)
            for i in nodes:
                for j in cust:
                    mdl.add(f"qflowub_{v}_{e}_{i}_{j}", [(QV(v, e, j), 1.0), (QV(v, e, i), -1.0), (X(v, e, i), 1.0),
                                                         (Y(v, e, i, j), M_cap)], "<=", M_cap)
                    mdl.add(f"qflowlb_{v}_{e}_{i}_{j}", [(QV(v, e, j), 1.0), (QV(v, e, i), -1.0), (X(v, e, i), 1.0),
                                                         (Y(v, e, i, j), -M_cap)], ">=", -M_cap)
            for i in nodes:
                mdl.add(f"qvisit_{v}_{e}_{i}", [(QV(v, e, i), 1.0), (LAM(v, e, i), -M_cap)], "<=", 0)
    for v in V:
        mdl.add(f"tstart_{v}", [(TL(v, 0), 1.0)], "=", 0)
        for e in range(E - 1):
            mdl.add(f"tnext_{v}_{e}", [(TL(v, e + 1), 1.0), (TL(v, e), -1.0)]
                    + [(Y(v, e, i, j), -float(tau[i, j])) for i in nodes for j in nodes if i != j], "=", 0)
        for e in Es:
            for j in nodes:
                mdl.add(f"tfirst_{v}_{e}_{j}", [(T(v, e, j), 1.0), (TL(v, e), -1.0), (Y(v, e, 0, j), -M_time)],
                        ">=", float(tau[0, j]) - M_time)
            for i in cust:
                for j in cust:
                    mdl.add(f"tarc_{v}_{e}_{i}_{j}", [(T(v, e, j), 1.0), (T(v, e, i), -1.0), (Y(v, e, i, j), -M_time)],
                            ">=", float(tau[i, j]) - M_time)
            for j in nodes:
                mdl.add(f"tvisit_{v}_{e}_{j}", [(T(v, e, j), 1.0), (LAM(v, e, j), -M_time)], "<=", 0)
        mdl.add(f"deadline_{v}", [(TL(v, E - 1), 1.0)]
                + [(Y(v, E - 1, i, j), float(tau[i, j])) for i in nodes for j in nodes if i != j], "<=", L)
    return mdl


def build_for_realization(realization, spec, E: Optional[int] = None, demand=None) -> MilpModel:
    """Model for a customer realization with expected demands (or the given demands)."""
    tau = distance_matrix(realization.locations, spec.area.depot)
    d = realization.dbar if demand is None else np.asarray(demand, dtype=float)
    if E is None:
        E = max(1, trip_upper_bound(tau, d, spec.Q, spec.L))
    return build_model(tau, d, spec.Q, spec.L, spec.m, E)


# ---------------------------------------------------------------------------
# LP file export / import

def _fmt(x: float) -> str:
    return repr(float(x)) if x != int(x) or abs(x) >= 1e15 else str(int(x))


def _terms(coefs: dict[str, float]) -> list[str]:
    out = []
    for k, c in coefs.items():
        if c == 0:
            continue
        sign = "-" if c < 0 else "+"
        mag = abs(c)
        out.append(f"{sign} {k}" if mag == 1 else f"{sign} {_fmt(mag)} {k}")
    return out


def _wrap(head: str, terms: list[str], tail: str = "") -> list[str]:
    if not terms:
        terms = ["0 " + "__none__"]
    lines, cur = [], head
    for t in terms:
        if len(cur) + len(t) > 200:
            lines.append(cur)
            cur = "   "
        cur += " " + t
    cur += tail
    lines.append(cur)
    return lines


def lp_text(model: MilpModel) -> str:
    lines = [f"\\ served-demand model: |N|={model.n_nodes} m={model.m} E={model.E} Q={_fmt(model.Q)} L={model.L!r}",
             "Maximize"]
    lines += _wrap(" obj:", _terms(model.objective))
    lines.append("Subject To")
    sense = {"<=": "<=", ">=": ">=", "=": "="}
    for c in model.constraints:
        t = _terms(c.coefs)
        if not t:
            continue
        lines += _wrap(f" {c.name}:", t, f" {sense[c.sense]} {_fmt(c.rhs)}")
    lines.append("Bounds")
    for v in model.variables.values():
        if not v.binary:
            lines.append(f" {_fmt(v.lb)} <= {v.name} <= {_fmt(v.ub)}")
    lines.append("Binaries")
    bins = [v.name for v in model.variables.values() if v.binary]
    for k in range(0, len(bins), 8):
        lines.append(" " + " ".join(bins[k:k + 8]))
    lines.append("End")
    return "\n".join(lines) + "\n"


def export_lp(model: MilpModel, path) -> None:
    try:
        Path(path).write_text(lp_text(model))
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


@dataclass
class LpData:
    objective: dict[str, float]
    constraints: dict[str, tuple[dict[str, float], str, float]]
    bounds: dict[str, tuple[float, float]]
    binaries: list[str]


_TERM = re.compile(r"([+-])\s*(?:([0-9.eE+-]+)\s+)?([A-Za-z_][A-Za-z0-9_]*)")


def _parse_expr(s: str) -> dict[str, float]:
    s = s.strip()
    if not s.startswith(("+", "-")):
        s = "+ " + s
    out = {}
    for sign, num, name in _TERM.findall(s):
        c = float(num) if num else 1.0
        out[name] = out.get(name, 0.0) + (-c if sign == "-" else c)
    return out


def read_lp(path) -> LpData:
    """Reader for the LP subset written by ``export_lp``."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    section = None
    stmts: dict[str, list[str]] = {"obj": [], "st": [], "bounds": [], "bin": []}
    cur = None
    for raw in text.splitlines():
        line = raw.split("\\", 1)[0].rstrip()
        key = line.strip().lower()
        if not key:
            continue
        if key in ("maximize", "minimize"):
            section = "obj"
            continue
        if key == "subject to":
            section = "st"
            continue
        if key == "bounds":
            section = "bounds"
            continue
        if key == "binaries":
            section = "bin"
            continue
        if key == "end":
            break
        if section in ("obj", "st"):
            if raw.startswith("   ") and stmts[section]:
                stmts[section][-1] += " " + line.strip()
            else:
                stmts[section].append(line.strip())
        elif section is not None:
            stmts[section].append(line.strip())
    obj = {}
    for s in stmts["obj"]:
        obj.update(_parse_expr(s.split(":", 1)[1]))
    cons = {}
    for s in stmts["st"]:
        name, rest = s.split(":", 1)
        m = re.match(r"(.*?)(<=|>=|=)\s*(\S+)\s*$", rest)
        if not m:
            raise DataError(f"cannot parse constraint {name}")
        cons[name.strip()] = (_parse_expr(m.group(1)), m.group(2), float(m.group(3)))
    bounds = {}
    for s in stmts["bounds"]:
        m = re.match(r"(\S+)\s*<=\s*(\S+)\s*<=\s*(\S+)", s)
        if not m:
            raise DataError(f"cannot parse bound {s!r}")
        bounds[m.group(2)] = (float(m.group(1)), float(m.group(3)))
    bins = [b for s in stmts["bin"] for b in s.split()]
    return LpData(obj, cons, bounds, bins)


def model_matches_lp(model: MilpModel, lp: LpData) -> bool:
    drop0 = lambda d: {k: v for k, v in d.items() if v != 0}
    if drop0(model.objective) != lp.objective:
        return False
    mine = {c.name: (drop0(c.coefs), c.sense, c.rhs) for c in model.constraints if drop0(c.coefs)}
    if mine != lp.constraints:
        return False
    if sorted(v.name for v in model.variables.values() if v.binary) != sorted(lp.binaries):
        return False
    cont = {v.name: (v.lb, v.ub) for v in model.variables.values() if not v.binary}
    return cont == lp.bounds


# ---------------------------------------------------------------------------
# solutions

def read_solution_values(path) -> dict[str, float]:
    """``name value`` lines; anything else (headers, comments) is skipped."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    vals = {}
    for line in lines:
        tok = line.split()
        if len(tok) < 2:
            continue
        try:
            vals[tok[0]] = float(tok[1])
        except ValueError:
            continue
    return vals


def routes_from_values(vals: dict[str, float], model: MilpModel, tol: float = 1e-6) -> list[list[int]]:
    """Per-vehicle node sequences (customer ids), trips concatenated in trip order."""
    N = model.n_nodes
    routes = []
    for v in range(model.m):
        route = []
        for e in range(model.E):
            arcs = {(i, j) for i in range(N) for j in range(N) if vals.get(Y(v, e, i, j), 0.0) > 0.5}
            if not arcs:
                continue
            succ = {}
            for i, j in arcs:
                if i in succ:
                    raise DataError(f"vehicle {v} trip {e}: node {i} has two successors")
                succ[i] = j
            if 0 not in succ:
                raise DataError(f"vehicle {v} trip {e}: arcs do not leave the depot")
            seq, cur, seen = [], succ[0], set()
            while cur != 0:
                if cur in seen or cur not in succ:
                    raise DataError(f"vehicle {v} trip {e}: broken arc chain at node {cur}")
                seen.add(cur)
                seq.append(cur)
                cur = succ[cur]
            if len(seen) + 1 != len(arcs):
                raise DataError(f"vehicle {v} trip {e}: arcs outside the depot tour (subtour)")
            for i in range(1, N):
                if vals.get(X(v, e, i), 0.0) > tol and i not in seen:
                    raise DataError(f"vehicle {v} trip {e}: serves node {i} without visiting it")
            route.extend(seq)
        routes.append(route)
    return routes


def fixed_routes(node_routes: Sequence[Sequence[int]]) -> list[list[int]]:
    """Node sequences to a-priori routes over customer indices.

    Split deliveries make the model revisit customers across trips; a fixed
    route with recourse visits each customer once (restocking as needed), so
    only the first visit of every customer is kept.
    """
    seen, out = set(), []
    for r in node_routes:
        route = []
        for node in r:
            if node not in seen:
                seen.add(node)
                route.append(int(node) - 1)
        out.append(route)
    return out


def parse_solution(path, model: MilpModel) -> list[list[int]]:
    return routes_from_values(read_solution_values(path), model)


def write_solution(vals: dict[str, float], path) -> None:
    try:
        Path(path).write_text("".join(f"{k} {v!r}\n" for k, v in vals.items()))
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


# ---------------------------------------------------------------------------
# brute-force oracle

def _subset_trips(tau: np.ndarray, n: int) -> list[tuple[frozenset, float]]:
    """Every non-empty customer subset with its shortest depot round trip."""
    out = []
    for k in range(1, n + 1):
        for sub in itertools.combinations(range(1, n + 1), k):
            best = min(tau[0, p[0]] + sum(tau[p[i], p[i + 1]] for i in range(k - 1)) + tau[p[-1], 0]
                       for p in itertools.permutations(sub))
            out.append((frozenset(sub), best))
    return out


def _max_served(trips: list[frozenset], demand: np.ndarray, Q: float) -> float:
    """Max flow source -> trip (cap Q) -> visited customer -> sink (cap d), via min cut."""
    best = math.inf
    k = len(trips)
    for r in range(k + 1):
        for cut in itertools.combinations(range(k), r):
            keep = [trips[i] for i in range(k) if i not in cut]
            reach = set().union(*keep) if keep else set()
            best = min(best, Q * r + sum(demand[i - 1] for i in reach))
    return best


def brute_force_max_served(tau: np.ndarray, demand: Sequence[float], Q: float, L: float, m: int, E: int,
                           tol: float = 1e-9) -> float:
    """Best served demand over all plans of at most E trips per vehicle within L."""
    d = np.asarray(demand, dtype=float)
    n = len(d)
    trips = [t for t in _subset_trips(tau, n) if t[1] <= L + tol]
    plans = [()]
    for k in range(1, E + 1):
        for combo in itertools.combinations_with_replacement(range(len(trips)), k):
            if sum(trips[i][1] for i in combo) <= L + tol:
                plans.append(combo)
    best = 0.0
    for joint in itertools.product(plans, repeat=m):
        sets = [trips[i][0] for p in joint for i in p]
        best = max(best, _max_served(sets, d, Q))
    return best


def solve_with_highs(lp_path, time_limit: float = 60.0) -> tuple[float, dict[str, float]]:
    """Solve an exported model with HiGHS (optional dependency)."""
    try:
        import highspy
    except ImportError as e:  # pragma: no cover - optional
        raise UsageError("highspy is not installed") from e
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("time_limit", float(time_limit))
    h.setOptionValue("mip_rel_gap", 0.0)
    h.readModel(str(lp_path))
    h.run()
    sol = h.getSolution()
    lp = h.getLp()
    names = list(lp.col_names_)
    vals = dict(zip(names, sol.col_value))
    return float(h.getInfo().objective_function_value), vals

"""Scenario-grid evaluation of policies and CSV comparison tables."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .env import make_problem
from .errors import DataError, StorageError, UsageError
from .instance import TAG_EPISODE, InstanceSpec, ScenarioSet, stream
from .policies import Policy, run_episode


@dataclass
class EvalRow:
    instance: str
    density: str
    Q: float
    m: int
    L: float
    expected_demand: float        # mean over the grid of the realized expected total demand
    policy: str
    mean: float
    std: float                    # population standard deviation
    n: int
    pct_served: float             # mean served / expected demand x 100
    pct_vs: dict[str, float] = field(default_factory=dict)


COLUMNS = ["instance", "density", "Q", "m", "L", "expected_demand", "policy", "mean", "std", "n",
           "pct_served", "pct_vs_random", "pct_vs_greedy"]
BASELINES = ("random", "greedy")


def improvement(a: float, b: float) -> float:
    """Relative improvement of a over b, in percent."""
    if not b > 0:
        raise DataError(f"improvement undefined for baseline mean {b!r}")
    return (a - b) / b * 100.0


def _episode_values(policy: Policy, spec: InstanceSpec, sset: ScenarioSet, seed: int,
                    positions: Sequence[int]) -> list[float]:
    problems = {}
    out = []
    for k in positions:
        r, scen = sset.pairs[k]
        if r not in problems:
            problems[r] = make_problem(sset.realizations[r], spec)
        log = run_episode(policy, problems[r], scen, rng=stream(seed, TAG_EPISODE, k))
        out.append(log.total_served)
    return out


def _worker(args):
    return _episode_values(*args)


def episode_values(policy: Policy, spec: InstanceSpec, sset: ScenarioSet, seed: int, jobs: int = 1,
                   progress: Optional[Callable[[int, int], None]] = None) -> np.ndarray:
    """Served demand per grid position; position k always uses episode stream k."""
    n = len(sset)
    if n == 0:
        raise UsageError("empty scenario set")
    if jobs <= 1:
        vals = []
        step = max(1, n // 20)
        for lo in range(0, n, step):
            vals += _episode_values(policy, spec, sset, seed, range(lo, min(n, lo + step)))
            if progress:
                progress(len(vals), n)
        return np.asarray(vals, dtype=float)
    chunks = [list(range(lo, min(n, lo + math.ceil(n / (4 * jobs))))) for lo in range(0, n, math.ceil(n / (4 * jobs)))]
    vals = []
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        for part in ex.map(_worker, [(policy, spec, sset, seed, c) for c in chunks]):
            vals += part
            if progress:
                progress(len(vals), n)
    return np.asarray(vals, dtype=float)


def summarize(values: np.ndarray, policy: str, spec: InstanceSpec, sset: ScenarioSet,
              instance: str = "") -> EvalRow:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise UsageError("no episodes to summarize")
    expd = float(np.mean([sset.realizations[r].dbar.sum() for r, _ in sset.pairs]))
    mean = float(values.mean())
    density = spec.density.level.value if spec.density is not None else (
        spec.variability.value if spec.variability is not None else "")
    label = instance or f"{spec.kind.value}-{density}-Q{spec.Q:g}"
    return EvalRow(label, density, float(spec.Q), int(spec.m), float(spec.L), expd, policy, mean, float(values.std()),
                   int(values.size), mean / expd * 100.0 if expd > 0 else 0.0)


def evaluate(policy: Policy, spec: InstanceSpec, sset: ScenarioSet, seed: int = 0, jobs: int = 1,
             instance: str = "", progress=None) -> tuple[EvalRow, np.ndarray]:
    """Mean/std of served demand over every grid position, plus the raw values."""
    vals = episode_values(policy, spec, sset, seed, jobs, progress)
    return summarize(vals, policy.name, spec, sset, instance), vals


def attach_improvements(rows: list[EvalRow]) -> list[EvalRow]:
    """Fill %-vs-baseline columns for rows sharing an instance label."""
    for r in rows:
        for b in BASELINES:
            base = [x for x in rows if x.instance == r.instance and x.policy == b]
            if base and base[0].mean > 0:
                r.pct_vs[b] = improvement(r.mean, base[0].mean)
    return rows


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def tables_text(rows: Sequence[EvalRow]) -> str:
    buf = io.StringIO()
    buf.write("# std is the population standard deviation; pct columns are (mean - baseline) / baseline x 100\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        d = asdict(r)
        pv = d.pop("pct_vs")
        d["pct_vs_random"] = pv.get("random", "")
        d["pct_vs_greedy"] = pv.get("greedy", "")
        w.writerow([_fmt(d[c]) for c in COLUMNS])
    return buf.getvalue()


def emit_tables(rows: Sequence[EvalRow], path) -> None:
    try:
        Path(path).write_text(tables_text(rows))
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


def read_tables(path) -> list[EvalRow]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    rd = csv.DictReader(lines)
    if rd.fieldnames is not None and list(rd.fieldnames) != COLUMNS:
        raise DataError(f"{path}: unexpected columns {rd.fieldnames}")
    rows = []
    try:
        for d in rd:
            pv = {b: float(d[f"pct_vs_{b}"]) for b in BASELINES if d[f"pct_vs_{b}"] != ""}
            rows.append(EvalRow(d["instance"], d["density"], float(d["Q"]), int(d["m"]), float(d["L"]),
                                float(d["expected_demand"]), d["policy"], float(d["mean"]), float(d["std"]),
                                int(d["n"]), float(d["pct_served"]), pv))
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed row ({e})") from e
    return rows


def write_dump(values: np.ndarray, path) -> None:
    """Per-scenario dump: ``trial,served`` lines."""
    try:
        Path(path).write_text("trial,served\n" + "".join(f"{k},{float(v)!r}\n" for k, v in enumerate(values)))
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


def paired_improvement_ci(a: np.ndarray, b: np.ndarray, z: float = 1.959963984540054) -> tuple[float, float, float]:
    """Relative improvement of mean(a) over mean(b) in percent with a paired 95% interval.

    The interval comes from the delta method on the ratio of means with paired
    per-scenario differences.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = a.size
    if n != b.size or n < 2:
        raise UsageError("paired samples of equal length >= 2 required")
    mb = b.mean()
    if not mb > 0:
        raise DataError("baseline mean must be positive")
    r = a.mean() / mb
    resid = a - r * b
    se = np.sqrt(resid.var(ddof=1) / n) / mb
    return (r - 1) * 100.0, (r - 1 - z * se) * 100.0, (r - 1 + z * se) * 100.0

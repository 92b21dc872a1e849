import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vrpvcsd import milp
from vrpvcsd.errors import DataError, StorageError, UsageError

from conftest import toy_realization, toy_spec


def _tau(points, depot=(0.0, 0.0)):
    return milp.distance_matrix(np.asarray(points, float).reshape(-1, 2), depot)


def test_trip_bound_single_customer_split():
    assert milp.trip_upper_bound(_tau([[0, 10]]), [30], 25, 50) == 2


def test_trip_bound_short_day():
    assert milp.trip_upper_bound(_tau([[0, 10], [0, 20]]), [5, 5], 25, 19.9) == 0


def test_trip_bound_exhausts_customers():
    d = [30, 25, 60]
    assert milp.trip_upper_bound(_tau([[0, 1], [0, 2], [0, 3]]), d, 25, 1e6) == sum(-(-x // 25) for x in d)


def test_trip_bound_rejects_bad_input():
    with pytest.raises(UsageError):
        milp.trip_upper_bound(_tau([[0, 1]]), [5], 0, 10)
    with pytest.raises(UsageError):
        milp.trip_upper_bound(_tau([[0, 1]]), [5], 10, float("inf"))


@settings(max_examples=60, deadline=None)
@given(pts=st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), min_size=1, max_size=5),
       dem=st.lists(st.integers(1, 60), min_size=5, max_size=5),
       L=st.floats(0, 400), extra_L=st.floats(0, 100), extra_d=st.integers(0, 40), Q=st.integers(5, 40))
def test_trip_bound_monotone(pts, dem, L, extra_L, extra_d, Q):
    tau = _tau(pts)
    d = np.array(dem[:len(pts)], float)
    E = milp.trip_upper_bound(tau, d, Q, L)
    assert milp.trip_upper_bound(tau, d, Q, L + extra_L) >= E
    d2 = d.copy()
    d2[0] += extra_d
    assert milp.trip_upper_bound(tau, d2, Q, L) >= E


def test_model_counts_one_customer():
    mdl = milp.build_model(_tau([[0, 5]]), [10], 25, 50, 1, 1)
    xs = [v for v in mdl.variables if v.startswith("x_")]
    ys = [v for v in mdl.variables if v.startswith("y_")]
    assert len(ys) == 4 and len(xs) == 2
    # depot served amount is pinned to zero, so the objective is effectively x_0_0_1
    dep = [c for c in mdl.constraints if c.coefs == {"x_0_0_0": 1.0}]
    assert dep and dep[0].sense == "=" and dep[0].rhs == 0
    assert set(mdl.objective) == {"x_0_0_0", "x_0_0_1"}


@pytest.mark.parametrize("n,m,E", [(2, 1, 2), (3, 2, 1), (1, 2, 3)])
def test_model_variable_counts(n, m, E):
    mdl = milp.build_model(_tau(np.arange(2 * n).reshape(n, 2)), [5] * n, 25, 100, m, E)
    N = n + 1
    count = lambda p: sum(1 for k in mdl.variables if k.startswith(p))
    assert count("x_") == count("lam_") == count("q_") == count("t_") == N * m * E
    assert count("y_") == N * N * m * E
    assert count("tl_") == m * E


def test_model_with_no_customers():
    mdl = milp.build_model(np.zeros((1, 1)), [], 25, 50, 1, 1)
    # the all-zero point (no trips) satisfies every constraint
    for c in mdl.constraints:
        assert {"<=": 0 <= c.rhs, ">=": 0 >= c.rhs, "=": c.rhs == 0}[c.sense], c.name
    assert list(mdl.objective) == ["x_0_0_0"]


def test_model_rejects_bad_sizes():
    with pytest.raises(UsageError):
        milp.build_model(_tau([[0, 5]]), [10], 25, 50, 1, 0)
    with pytest.raises(UsageError):
        milp.build_model(_tau([[0, 5]]), [10], 25, 50, 0, 1)
    with pytest.raises(UsageError):
        milp.build_model(_tau([[0, 5]]), [10, 3], 25, 50, 1, 1)


def test_lp_roundtrip_binaries_and_objective(tmp_path):
    mdl = milp.build_model(_tau([[0, 5], [3, 4]]), [10, 7], 25, 50, 2, 2)
    f = tmp_path / "m.lp"
    milp.export_lp(mdl, f)
    lp = milp.read_lp(f)
    assert milp.model_matches_lp(mdl, lp)
    assert sorted(lp.binaries) == sorted(k for k in mdl.variables if k.startswith(("y_", "lam_")))
    assert lp.objective == {k: 1.0 for k in mdl.variables if k.startswith("x_")}
    text = f.read_text()
    assert text.lower().startswith("\\") or text.lower().startswith("maximize")
    assert max(len(l) for l in text.splitlines()) <= 255


def test_lp_export_deterministic(tmp_path):
    mdl = milp.build_model(_tau([[0, 5], [3, 4]]), [10, 7], 25, 50, 1, 2)
    milp.export_lp(mdl, tmp_path / "a.lp")
    milp.export_lp(milp.build_model(_tau([[0, 5], [3, 4]]), [10, 7], 25, 50, 1, 2), tmp_path / "b.lp")
    assert (tmp_path / "a.lp").read_bytes() == (tmp_path / "b.lp").read_bytes()


def test_lp_io_errors(tmp_path):
    with pytest.raises(StorageError):
        milp.read_lp(tmp_path / "none.lp")
    with pytest.raises(StorageError):
        milp.export_lp(milp.build_model(_tau([[0, 5]]), [10], 25, 50, 1, 1), tmp_path / "no" / "x.lp")


def _model2():
    return milp.build_model(_tau([[0, 5], [3, 4]]), [10, 7], 25, 50, 1, 2)


def test_parse_single_trip(tmp_path):
    vals = {"y_0_0_0_1": 1, "y_0_0_1_0": 1, "x_0_0_1": 10}
    f = tmp_path / "s.sol"
    milp.write_solution(vals, f)
    assert milp.parse_solution(f, _model2()) == [[1]]


def test_parse_two_trips_in_order():
    vals = {"y_0_0_0_1": 1, "y_0_0_1_0": 1, "y_0_1_0_2": 1, "y_0_1_2_0": 1}
    assert milp.routes_from_values(vals, _model2()) == [[1, 2]]
    assert milp.fixed_routes([[1, 2]]) == [[0, 1]]


def test_parse_all_zero():
    assert milp.routes_from_values({}, _model2()) == [[]]


def test_parse_integrity_errors():
    with pytest.raises(DataError):
        milp.routes_from_values({"y_0_0_1_2": 1, "y_0_0_2_1": 1}, _model2())       # subtour, no depot
    with pytest.raises(DataError):
        milp.routes_from_values({"y_0_0_0_1": 1, "y_0_0_1_0": 1, "y_0_0_2_2": 1}, _model2())
    with pytest.raises(DataError):
        milp.routes_from_values({"y_0_0_0_1": 1, "y_0_0_1_0": 1, "x_0_0_2": 3.0}, _model2())


def test_solution_reader_skips_noise(tmp_path):
    f = tmp_path / "s.txt"
    f.write_text("# header\nObjective 12\ny_0_0_0_1 1\ny_0_0_1_0 1.0\nnot_a_number x\n")
    assert milp.read_solution_values(f)["y_0_0_1_0"] == 1.0
    assert milp.parse_solution(f, _model2()) == [[1]]


def test_fixed_routes_keeps_first_visit():
    assert milp.fixed_routes([[2, 1, 2], [3, 1]]) == [[1, 0], [2]]


def test_build_for_realization_uses_expected_demand():
    spec = toy_spec(Q=25, L=60)
    real = toy_realization([[0, 10], [6, 8]], [30, 10])
    mdl = milp.build_for_realization(real, spec)
    assert list(mdl.demand) == [0, 30, 10]
    assert mdl.E == milp.trip_upper_bound(mdl.tau, [30, 10], 25, 60)


# ---------------------------------------------------------------------------
# an integer enumeration oracle, independent of the min-cut used by the module

def _enumerate_served(tau, d, Q, L, E):
    """One vehicle, up to E trips: enumerate trip customer sets and integer split amounts."""
    n = len(d)
    subsets = [()]
    for k in range(1, n + 1):
        subsets += list(itertools.combinations(range(1, n + 1), k))

    def length(sub):
        if not sub:
            return 0.0
        return min(tau[0, p[0]] + sum(tau[p[i], p[i + 1]] for i in range(len(p) - 1)) + tau[p[-1], 0]
                   for p in itertools.permutations(sub))

    best = 0
    for plan in itertools.product(subsets, repeat=E):
        if sum(length(s) for s in plan) > L + 1e-9:
            continue

        def rec(t, rem):
            if t == len(plan):
                return 0
            sub = plan[t]
            out = 0
            ranges = [range(0, int(min(rem[c - 1], Q)) + 1) for c in sub]
            for amounts in itertools.product(*ranges):
                if sum(amounts) > Q:
                    continue
                r2 = list(rem)
                for c, a in zip(sub, amounts):
                    r2[c - 1] -= a
                out = max(out, sum(amounts) + rec(t + 1, r2))
            return out
        best = max(best, rec(0, list(d)))
    return best


@pytest.mark.parametrize("seed", range(6))
def test_brute_force_matches_integer_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    tau = _tau(rng.integers(0, 15, size=(n, 2)))
    d = rng.integers(1, 9, size=n).astype(float)
    Q = float(rng.integers(3, 9))
    L = float(rng.uniform(10, 50))
    E = int(rng.integers(1, 3))
    assert milp.brute_force_max_served(tau, d, Q, L, 1, E) == _enumerate_served(tau, d, Q, L, E)


def test_brute_force_hand_cases():
    tau = _tau([[0, 10]])
    assert milp.brute_force_max_served(tau, [30], 25, 50, 1, 2) == 30
    assert milp.brute_force_max_served(tau, [30], 25, 39, 1, 2) == 25
    assert milp.brute_force_max_served(tau, [30], 25, 19, 1, 2) == 0

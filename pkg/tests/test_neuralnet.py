import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vrpvcsd import neuralnet as nn
from vrpvcsd.errors import DataError, SchemaError, StorageError, UsageError


def _unit_net(w=1.0):
    """1-1-1-1 net with all weights w and zero biases."""
    return nn.MlpParams([np.full((1, 1), w)] * 3, [np.zeros(1)] * 3)


def test_hidden_sizes():
    assert nn.hidden_sizes(120, 11) == (83, 47)
    assert nn.hidden_sizes(1, 1) == (1, 1)
    p = nn.init(120, 11, np.random.default_rng(0))
    assert p.sizes == (120, 83, 47, 11)


def test_init_deterministic():
    a = nn.init(30, 5, np.random.default_rng(4))
    b = nn.init(30, 5, np.random.default_rng(4))
    assert a.equal(b)
    with pytest.raises(UsageError):
        nn.init(0, 5, np.random.default_rng(0))


def test_forward_examples():
    assert not nn.forward(nn.zeros(7, 3), np.ones(7)).any()
    assert nn.forward(_unit_net(), np.array([2.0]))[0] == 2.0
    p = nn.init(9, 4, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=9)
    assert np.array_equal(nn.forward(p, x), nn.forward(p, x))
    assert np.allclose(nn.forward(p, np.stack([x, x]))[1], nn.forward(p, x))
    with pytest.raises(UsageError):
        nn.forward(p, np.ones(8))


def test_huber_examples():
    assert nn.huber(0.0) == 0
    assert nn.huber(3.0) == 4.5
    assert nn.huber(10.0) == 37.5
    assert nn.huber(-10.0) == 37.5
    assert nn.huber(5.0) == 12.5
    assert nn.huber(5.0 + 1e-12) == pytest.approx(12.5)
    with pytest.raises(UsageError):
        nn.LossConfig(delta=0)


def test_backward_zero_when_on_target():
    p = nn.init(6, 3, np.random.default_rng(3))
    X = np.random.default_rng(4).normal(size=(4, 6))
    a = np.array([0, 1, 2, 1])
    t = nn.forward(p, X)[np.arange(4), a]
    _, g = nn.backward(p, X, a, t)
    assert all(not x.any() for x in g.arrays())


def test_backward_unit_net_by_hand():
    # y = w3 * relu(w2 * relu(w1 * x)); with all w = 2, x = 1: y = 8, target 5, err 3 < delta
    p = _unit_net(2.0)
    L, g = nn.backward(p, np.array([[1.0]]), np.array([0]), np.array([5.0]))
    assert L == 4.5
    # dL/dy = 3; dy/dw3 = z2 = 4, dy/dw2 = w3 * z1 = 4, dy/dw1 = w3 * w2 * x = 4
    assert [float(w[0, 0]) for w in g.W] == [12.0, 12.0, 12.0]
    # dy/db3 = 1, dy/db2 = w3 = 2, dy/db1 = w3 * w2 = 4
    assert [float(b[0]) for b in g.b] == [12.0, 6.0, 3.0]


def test_backward_ignores_unselected_outputs():
    p = nn.init(5, 3, np.random.default_rng(5))
    X = np.random.default_rng(6).normal(size=(3, 5))
    _, g = nn.backward(p, X, np.array([1, 1, 1]), np.zeros(3))
    assert not g.W[2][:, 0].any() and not g.W[2][:, 2].any()
    assert g.b[2][0] == 0 and g.b[2][2] == 0


def _fd_check(p, X, a, t, h=1e-5):
    _, g = nn.backward(p, X, a, t)
    worst = 0.0
    for k, (arr, garr) in enumerate(zip(p.arrays(), g.arrays())):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            lp = nn.loss(p, X, a, t)
            arr[i] = old - h
            lm = nn.loss(p, X, a, t)
            arr[i] = old
            fd = (lp - lm) / (2 * h)
            an = garr[i]
            denom = max(abs(fd), abs(an), 1e-6)
            worst = max(worst, abs(fd - an) / denom)
    return worst


def test_gradient_check_100_random_pairs():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        h_in, h_out = int(rng.integers(2, 7)), int(rng.integers(1, 4))
        p = nn.init(h_in, h_out, rng)
        for b in p.b:
            b += rng.normal(scale=0.1, size=b.shape)
        B = int(rng.integers(1, 5))
        X = rng.normal(size=(B, h_in))
        a = rng.integers(0, h_out, B)
        t = rng.normal(scale=4.0, size=B)
        worst = max(worst, _fd_check(p, X, a, t))
    assert worst < 1e-4


def test_adam_zero_gradient_keeps_params():
    p = nn.init(4, 2, np.random.default_rng(0))
    st = nn.AdamState.zeros_like(p)
    zero = nn.MlpParams([np.zeros_like(w) for w in p.W], [np.zeros_like(b) for b in p.b])
    p2, st2 = nn.adam_step(p, st, zero, 1e-3)
    assert p2.equal(p) and st2.t == 1


def test_adam_first_step_is_sign():
    p = nn.init(4, 2, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    g = nn.MlpParams([rng.normal(size=w.shape) for w in p.W], [rng.normal(size=b.shape) for b in p.b])
    p2, _ = nn.adam_step(p, nn.AdamState.zeros_like(p), g, 0.01)
    for a, b, gg in zip(p.arrays(), p2.arrays(), g.arrays()):
        assert np.allclose(b - a, -0.01 * np.sign(gg), atol=1e-6)


def test_adam_decreases_convex_loss():
    # linear net (positive pre-activations) fitted to a fixed target: convex in the last layer
    rng = np.random.default_rng(8)
    p = nn.init(3, 1, rng)
    X = np.abs(rng.normal(size=(16, 3))) + 0.5
    a = np.zeros(16, dtype=int)
    t = X.sum(1)
    st = nn.AdamState.zeros_like(p)
    losses = []
    for _ in range(100):
        L, g = nn.backward(p, X, a, t)
        losses.append(L)
        p, st = nn.adam_step(p, st, g, 1e-2)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_copy_is_independent():
    p = nn.init(4, 2, np.random.default_rng(0))
    c = nn.copy_to_target(p)
    p.W[0][0, 0] += 1
    assert not c.equal(p)


def test_save_load_roundtrip(tmp_path):
    p = nn.init(20, 4, np.random.default_rng(9))
    f = tmp_path / "p.npz"
    nn.save_params(p, f)
    assert nn.load_params(f).equal(p)
    f2 = tmp_path / "q.npz"
    nn.save_params(p, f2)
    assert f.read_bytes() == f2.read_bytes()


def test_load_truncated_and_missing(tmp_path):
    p = nn.init(20, 4, np.random.default_rng(9))
    f = tmp_path / "p.npz"
    nn.save_params(p, f)
    f.write_bytes(f.read_bytes()[:100])
    with pytest.raises(DataError):
        nn.load_params(f)
    with pytest.raises(StorageError):
        nn.load_params(tmp_path / "none.npz")


def test_training_determinism():
    def run(seed):
        rng = np.random.default_rng(seed)
        p = nn.init(5, 3, rng)
        st = nn.AdamState.zeros_like(p)
        for _ in range(20):
            X = rng.normal(size=(8, 5))
            _, g = nn.backward(p, X, rng.integers(0, 3, 8), rng.normal(size=8))
            p, st = nn.adam_step(p, st, g, 1e-3)
        return p
    assert run(3).equal(run(3))


@settings(max_examples=50, deadline=None)
@given(err=st.floats(-1e3, 1e3), delta=st.floats(0.1, 20))
def test_huber_bounds(err, delta):
    cfg = nn.LossConfig(delta)
    h = float(nn.huber(err, cfg))
    assert 0 <= h <= 0.5 * err * err + 1e-9
    assert h <= delta * abs(err) + 1e-9


def test_load_rejects_other_schema_version(tmp_path):
    p = nn.init(6, 2, np.random.default_rng(0))
    arrays = nn.params_to_arrays(p)
    arrays["schema_version"] = np.array(99)
    arrays["sizes"] = np.array(p.sizes)
    f = tmp_path / "p.npz"
    nn.write_npz(f, arrays)
    with pytest.raises(SchemaError):
        nn.load_params(f)

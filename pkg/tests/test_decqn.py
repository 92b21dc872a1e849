import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vrpvcsd import neuralnet as nn
from vrpvcsd.decqn import (Experience, ReplayMemory, TrainConfig, Trainer, TrainStats, epsilon_greedy,
                           is_terminal_for, linear_schedule, load_checkpoint, load_policy_params,
                           sample_batch, save_checkpoint, td_target, td_targets, train)
from vrpvcsd.env import DEPOT, apply_action, initial_state, reveal_and_advance
from vrpvcsd.errors import StorageError, UsageError
from vrpvcsd.instance import vcsd_spec
from vrpvcsd.observation import ObservationConfig, action_mask, observe

from conftest import toy_realization, toy_spec

SMALL = dict(batch_size=8, memory_size=500, beta_t=0.5, beta_d=5, eps_trials=10, lr_trials=20,
             probe_customers=2, probe_demands=2)


def _exp(state, v, reward, next_state, next_vehicle, cfg):
    o = np.zeros(cfg.size(state.problem.m))
    return Experience(state, v, 0, 0, reward, next_state, next_vehicle, o, o, np.zeros(cfg.n_actions, bool), False)


def test_linear_schedule():
    assert linear_schedule(1.0, 0.1, 100, 0) == 1.0
    assert linear_schedule(1.0, 0.1, 100, 50) == pytest.approx(0.55)
    assert linear_schedule(1.0, 0.1, 100, 100) == 0.1
    assert linear_schedule(1.0, 0.1, 100, 10_000) == 0.1
    assert linear_schedule(1.0, 0.1, 0, 0) == 0.1


def test_config_validation_and_roundtrip():
    with pytest.raises(UsageError):
        TrainConfig(gamma=0)
    with pytest.raises(UsageError):
        TrainConfig(batch_size=64, memory_size=32)
    with pytest.raises(UsageError):
        TrainConfig(eps_start=1.5)
    c = TrainConfig(obs=ObservationConfig(n_tilde=4, extras=("duration",)), seed=3)
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_td_target_terminal_is_reward():
    cfg = ObservationConfig(n_tilde=3)
    s = initial_state(toy_realization([], []), toy_spec())
    params = nn.init(cfg.size(1), cfg.n_actions, np.random.default_rng(0))
    assert td_target(_exp(s, 0, 7.0, s, 0, cfg), params, 0.999, cfg) == 7.0
    assert td_target(_exp(s, 0, 7.0, None, None, cfg), params, 0.999, cfg) == 7.0


def test_td_target_gamma_zero_and_zero_net():
    cfg = ObservationConfig(n_tilde=3)
    s = initial_state(toy_realization([[0, 5], [0, 9]], [10, 10]), toy_spec())
    nxt = reveal_and_advance(apply_action(s, 0, 0), [4, 4])[0]
    params = nn.init(cfg.size(1), cfg.n_actions, np.random.default_rng(0))
    assert td_target(_exp(s, 0, 12.0, nxt, 0, cfg), params, 0.0, cfg) == 12.0
    assert td_target(_exp(s, 0, 12.0, nxt, 0, cfg), nn.zeros(cfg.size(1), cfg.n_actions), 0.999, cfg) == 12.0


def test_td_target_masked_max():
    cfg = ObservationConfig(n_tilde=3)
    s = initial_state(toy_realization([[0, 5], [0, 9]], [10, 10]), toy_spec())
    nxt = reveal_and_advance(apply_action(s, 0, 0), [4, 4])[0]    # targets: [1], depot allowed
    params = nn.zeros(cfg.size(1), cfg.n_actions)
    params.b[2][:] = [-3.0, 50.0, 50.0, -1.0]                      # slots 1, 2 are empty
    assert td_target(_exp(s, 0, 2.0, nxt, 0, cfg), params, 0.5, cfg) == pytest.approx(2.0 + 0.5 * -1.0)
    o, tg = observe(nxt, 0, cfg)
    y = td_targets(np.array([2.0]), o[None], action_mask(nxt, 0, tg, cfg)[None], np.array([False]), params, 0.5)
    assert y[0] == pytest.approx(1.5)


def test_terminal_for_at_depot_with_nothing_left():
    cfg = ObservationConfig(n_tilde=3)
    s = initial_state(toy_realization([[0, 5]], [10]), toy_spec(m=2))
    s = apply_action(s, 0, 0)
    # vehicle 1 at the depot: the only customer is taken, so only the depot (wait) remains
    _, tg = observe(s, 1, cfg)
    assert is_terminal_for(s, 1, action_mask(s, 1, tg, cfg))


def test_epsilon_greedy_uniform_when_exploring():
    cfg = ObservationConfig(n_tilde=4)
    s = initial_state(toy_realization([[0, 5], [0, 9]], [10, 10]), toy_spec())
    s = reveal_and_advance(apply_action(s, 0, 0), [4, 4])[0]     # feasible: [1, DEPOT]
    o, tg = observe(s, 0, cfg)
    params = nn.init(cfg.size(1), cfg.n_actions, np.random.default_rng(0))
    rng = np.random.default_rng(5)
    picks = np.array([epsilon_greedy(o, tg, params, s, 0, 1.0, rng, cfg) for _ in range(10_000)])
    assert set(picks.tolist()) == {1, DEPOT}
    assert abs((picks == DEPOT).mean() - 0.5) <= 0.02


def test_epsilon_greedy_exploits():
    cfg = ObservationConfig(n_tilde=2)
    s = initial_state(toy_realization([[0, 5], [0, 9], [0, 2]], [10, 10, 10]), toy_spec())
    s = reveal_and_advance(apply_action(s, 0, 2), [4, 4, 4])[0]
    o, tg = observe(s, 0, cfg)
    params = nn.zeros(cfg.size(1), cfg.n_actions)
    params.b[2][:] = [5.0, 3.0, 1.0]
    assert epsilon_greedy(o, tg, params, s, 0, 0.0, np.random.default_rng(0), cfg) == tg[0]


def test_epsilon_greedy_single_action():
    cfg = ObservationConfig(n_tilde=2)
    s = initial_state(toy_realization([[0, 5]], [10]), toy_spec())
    o, tg = observe(s, 0, cfg)
    params = nn.init(cfg.size(1), cfg.n_actions, np.random.default_rng(0))
    rng = np.random.default_rng(0)
    assert {epsilon_greedy(o, tg, params, s, 0, e, rng, cfg) for e in (0.0, 0.5, 1.0) for _ in range(20)} == {0}


def _filled(n, cap=100):
    mem = ReplayMemory(cap, 3, 2)
    for i in range(n):
        mem.push(np.full(3, i), 0, float(i), np.zeros(3), np.ones(2, bool), False)
    return mem


def test_sample_batch_cases():
    rng = np.random.default_rng(0)
    assert sorted(sample_batch(_filled(32), 32, rng).tolist()) == list(range(32))
    assert sample_batch(_filled(31), 32, rng) is None
    counts = np.zeros(50)
    for _ in range(10_000):
        idx = sample_batch(MEM50, 5, rng)
        assert len(set(idx.tolist())) == 5
        counts[idx] += 1
    assert np.allclose(counts / counts.sum(), 1 / 50, atol=0.02)


MEM50 = _filled(50)


def test_replay_fifo_eviction():
    mem = _filled(13, cap=10)
    assert len(mem) == 10
    assert [mem.reward[i] for i in mem.order()] == list(range(3, 13))
    back = ReplayMemory.from_arrays(mem.arrays())
    assert [back.reward[i] for i in back.order()] == list(range(3, 13))


def test_stats_monotone_and_csv(tmp_path):
    st_ = TrainStats()
    st_.add(trial=1, probe_mean=1.0, loss=0.5, epsilon=1.0, lr=1e-3)
    with pytest.raises(ValueError):
        st_.add(trial=0, probe_mean=1.0, loss=0.5, epsilon=1.0, lr=1e-3)
    st_.to_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "trial,probe_mean,loss,epsilon,lr"
    with pytest.raises(StorageError):
        st_.to_csv(tmp_path / "missing" / "s.csv")


def test_zero_trials_returns_initial_params():
    spec = vcsd_spec("very-low", 25)
    cfg = TrainConfig(trials_max=0, seed=4, **SMALL)
    params, _ = train(spec, cfg)
    assert params.equal(Trainer.create(spec, cfg).params)


def test_training_is_deterministic():
    spec = vcsd_spec("very-low", 25)
    cfg = TrainConfig(trials_max=15, seed=2, **SMALL)
    a, _ = train(spec, cfg)
    b, _ = train(spec, cfg)
    assert a.equal(b)
    assert not a.equal(Trainer.create(spec, cfg).params)


def test_checkpoint_resume_is_bit_exact(tmp_path):
    spec = vcsd_spec("very-low", 25)
    cfg = TrainConfig(trials_max=12, seed=9, checkpoint_every=6, **SMALL)
    full, stats = train(spec, cfg)
    tr = Trainer.create(spec, cfg)
    tr.run(until=6)
    save_checkpoint(tr, tmp_path / "c.npz")
    resumed, stats2 = train(spec, cfg, resume_from=tmp_path / "c.npz")
    assert resumed.equal(full)
    assert [r["trial"] for r in stats.rows] == [6, 12]
    assert stats2.rows == stats.rows
    p, ocfg = load_policy_params(tmp_path / "c.npz")
    assert ocfg == cfg.obs and p.sizes == full.sizes
    assert load_checkpoint(tmp_path / "c.npz").trial == 6


def test_delayed_rewards_match_capacity_books():
    """Each completed reward equals the capacity the vehicle spent before its next decision."""
    spec = vcsd_spec("moderate", 25)
    cfg = TrainConfig(trials_max=6, seed=1, **SMALL)
    tr = Trainer.create(spec, cfg)
    seen = []
    tr.on_experience = seen.append
    totals = []
    for _ in range(cfg.trials_max):
        start = len(seen)
        totals.append(tr.episode())
        tr.trial += 1
        ep = seen[start:]
        assert sum(e.reward for e in ep) == pytest.approx(totals[-1], abs=1e-9)
        by_vehicle = {}
        for e in ep:
            by_vehicle.setdefault(e.vehicle, []).append(e)
        for v, exps in by_vehicle.items():
            for cur, nxt in zip(exps, exps[1:]):
                assert cur.reward >= 0
                if cur.action == DEPOT:
                    assert cur.reward == 0
                else:
                    assert cur.reward == pytest.approx(cur.state.q[v] - nxt.state.q[v], abs=1e-9)
    assert sum(totals) > 0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(0, 40), cap=st.integers(1, 15))
def test_replay_never_exceeds_capacity(seed, n, cap):
    mem = _filled(n, cap=cap)
    assert len(mem) == min(n, cap)
    assert [mem.reward[i] for i in mem.order()] == [float(i) for i in range(max(0, n - cap), n)]

"""Decentralized Q-learning: one shared Q-network trained from every vehicle's experience.

Each vehicle keeps at most one pending experience in its buffer.  The reward of
an action (the demand served on arrival) is only known when that vehicle is
selected again, at which point the pending experience is completed and pushed
to the replay memory.
"""
from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import neuralnet as nn
from .env import (DEPOT, GlobalState, apply_action, initial_state, is_terminal, make_problem,
                  reveal_and_advance, select_active_vehicle)
from .errors import SchemaError, StorageError, UsageError
from .instance import (TAG_PROBE, TAG_TRAIN, InstanceSpec, ScenarioSet, make_grid, realization_for,
                       sample_demands, stream)
from .observation import ObservationConfig, action_mask, observe
from .policies import GreedyQPolicy, masked_argmax, run_episode

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class TrainConfig:
    trials_max: int = 50_000
    batch_size: int = 32
    memory_size: int = 50_000
    beta_t: float = 0.05
    beta_d: int = 1000
    gamma: float = 0.999
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_trials: int = 10_000
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    lr_trials: int = 25_000
    huber_delta: float = 5.0
    double_q: bool = False
    seed: int = 0
    obs: ObservationConfig = field(default_factory=ObservationConfig)
    checkpoint_every: int = 0          # trials between stats/checkpoints; 0 = only at the end
    probe_customers: int = 10
    probe_demands: int = 10

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise UsageError("gamma must be in (0, 1]")
        if self.batch_size < 1 or self.batch_size > self.memory_size:
            raise UsageError("batch size must be in [1, memory size]")
        if not (0 <= self.eps_end <= 1 and 0 <= self.eps_start <= 1):
            raise UsageError("exploration rates must lie in [0, 1]")
        if self.trials_max < 0 or self.beta_d < 1:
            raise UsageError("trials_max >= 0 and beta_d >= 1 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obs"] = asdict(self.obs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        o = dict(d.pop("obs", {}))
        for k in ("partitions", "extras", "shift", "scale"):
            if o.get(k) is not None:
                o[k] = tuple(o[k])
        return cls(obs=ObservationConfig(**o), **d)


def linear_schedule(start: float, end: float, span: int, trial: int) -> float:
    if span <= 0 or trial >= span:
        return end
    frac = min(max(trial / span, 0.0), 1.0)
    return start + (end - start) * frac


# ---------------------------------------------------------------------------
# experiences and replay

@dataclass
class Experience:
    state: GlobalState
    vehicle: int
    action: int                  # environment action (customer index or DEPOT)
    action_index: int            # network output slot
    reward: float
    next_state: Optional[GlobalState]
    next_vehicle: Optional[int]
    obs: np.ndarray
    next_obs: np.ndarray
    next_mask: np.ndarray
    terminal: bool


class ReplayMemory:
    """Bounded FIFO of experiences kept as preallocated arrays."""

    def __init__(self, capacity: int, obs_dim: int, n_actions: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.next_mask = np.zeros((capacity, n_actions), dtype=bool)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.pos = 0          # next write slot
        self.pushed = 0       # total insertions

    def __len__(self):
        return self.size

    def push(self, obs, action_index, reward, next_obs, next_mask, terminal) -> None:
        i = self.pos
        self.obs[i] = obs
        self.action[i] = action_index
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.next_mask[i] = next_mask
        self.terminal[i] = terminal
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushed += 1

    def order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.pos) % self.capacity

    def arrays(self) -> dict:
        return {"mem_obs": self.obs[:self.size], "mem_next_obs": self.next_obs[:self.size],
                "mem_next_mask": self.next_mask[:self.size], "mem_action": self.action[:self.size],
                "mem_reward": self.reward[:self.size], "mem_terminal": self.terminal[:self.size],
                "mem_meta": np.array([self.capacity, self.size, self.pos, self.pushed])}

    @classmethod
    def from_arrays(cls, d: dict) -> "ReplayMemory":
        cap, size, pos, pushed = (int(x) for x in d["mem_meta"])
        mem = cls(cap, d["mem_obs"].shape[1], d["mem_next_mask"].shape[1])
        mem.obs[:size] = d["mem_obs"]
        mem.next_obs[:size] = d["mem_next_obs"]
        mem.next_mask[:size] = d["mem_next_mask"]
        mem.action[:size] = d["mem_action"]
        mem.reward[:size] = d["mem_reward"]
        mem.terminal[:size] = d["mem_terminal"]
        mem.size, mem.pos, mem.pushed = size, pos, pushed
        return mem


def sample_batch(memory: ReplayMemory, batch_size: int, rng: np.random.Generator) -> Optional[np.ndarray]:
    """Distinct uniformly drawn slots, or None while the memory is smaller than the batch."""
    if memory.size < batch_size:
        return None
    return rng.choice(memory.size, size=batch_size, replace=False)


def is_terminal_for(state: Optional[GlobalState], v: Optional[int], mask: Optional[np.ndarray]) -> bool:
    """No continuation value: the day is over, or v sits at the depot with only the depot open."""
    if state is None or v is None or is_terminal(state):
        return True
    return bool(state.node[v] == 0 and mask[-1] and not mask[:-1].any())


def td_target(exp: Experience, target_params: nn.MlpParams, gamma: float, obs_cfg: ObservationConfig,
              online_params: Optional[nn.MlpParams] = None) -> float:
    """r, or r + gamma * max over feasible next actions of the target network."""
    if exp.next_state is None or exp.next_vehicle is None or is_terminal(exp.next_state):
        return float(exp.reward)
    o, tg = observe(exp.next_state, exp.next_vehicle, obs_cfg)
    mask = action_mask(exp.next_state, exp.next_vehicle, tg, obs_cfg)
    if is_terminal_for(exp.next_state, exp.next_vehicle, mask):
        return float(exp.reward)
    q = nn.forward(target_params, o)
    if online_params is not None:
        return float(exp.reward + gamma * q[masked_argmax(nn.forward(online_params, o), mask)])
    return float(exp.reward + gamma * q[mask].max())


def td_targets(reward, next_obs, next_mask, terminal, target_params, gamma,
               online_params: Optional[nn.MlpParams] = None) -> np.ndarray:
    q = nn.forward(target_params, next_obs)
    if online_params is None:
        best = np.where(next_mask, q, -np.inf).max(1)
    else:
        qa = np.where(next_mask, nn.forward(online_params, next_obs), -np.inf)
        best = q[np.arange(len(q)), qa.argmax(1)]
    best = np.where(terminal, 0.0, best)
    return reward + gamma * best


def epsilon_greedy(obs: np.ndarray, targets, params: nn.MlpParams, state: GlobalState, v: int,
                   eps: float, rng: np.random.Generator, cfg: ObservationConfig) -> int:
    """Uniform feasible action with probability eps, otherwise the masked argmax of Q."""
    return index_to_env_action(epsilon_greedy_index(obs, action_mask(state, v, targets, cfg), params, eps, rng),
                               targets, cfg)


def epsilon_greedy_index(obs, mask, params, eps, rng) -> int:
    if rng.random() < eps:
        idx = np.flatnonzero(mask)
        return int(idx[rng.integers(idx.size)])
    return masked_argmax(nn.forward(params, obs), mask)


def index_to_env_action(i: int, targets, cfg: ObservationConfig) -> int:
    return DEPOT if i == cfg.n_tilde else int(targets[i])


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainStats:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row):
        if self.rows and row["trial"] < self.rows[-1]["trial"]:
            raise ValueError("stats trial indices must be monotone")
        self.rows.append(row)

    def to_csv(self, path) -> None:
        cols = ["trial", "probe_mean", "loss", "epsilon", "lr"]
        lines = [",".join(cols)] + [",".join(repr(r[c]) for c in cols) for r in self.rows]
        try:
            Path(path).write_text("\n".join(lines) + "\n")
        except OSError as e:
            raise StorageError(f"cannot write {path}: {e}") from e


@dataclass
class Trainer:
    """Mutable training state; ``run`` advances it trial by trial."""
    spec: InstanceSpec
    cfg: TrainConfig
    params: nn.MlpParams
    target: nn.MlpParams
    adam: nn.AdamState
    memory: ReplayMemory
    rng: np.random.Generator
    trial: int = 0
    loss_avg: float = float("nan")
    updates: int = 0
    stats: TrainStats = field(default_factory=TrainStats)
    probe: Optional[ScenarioSet] = None
    on_experience: Optional[Callable[[Experience], None]] = None

    @classmethod
    def create(cls, spec: InstanceSpec, cfg: TrainConfig) -> "Trainer":
        rng = stream(cfg.seed, TAG_TRAIN)
        h_in = cfg.obs.size(spec.m)
        params = nn.init(h_in, cfg.obs.n_actions, rng)
        return cls(spec, cfg, params, nn.copy_to_target(params), nn.AdamState.zeros_like(params),
                   ReplayMemory(cfg.memory_size, h_in, cfg.obs.n_actions), rng)

    # -- schedules
    def epsilon(self) -> float:
        c = self.cfg
        return linear_schedule(c.eps_start, c.eps_end, c.eps_trials, self.trial)

    def lr(self) -> float:
        c = self.cfg
        return linear_schedule(c.lr_start, c.lr_end, c.lr_trials, self.trial)

    # -- one gradient step
    def update(self) -> None:
        c = self.cfg
        idx = sample_batch(self.memory, c.batch_size, self.rng)
        if idx is None:
            return
        m = self.memory
        y = td_targets(m.reward[idx], m.next_obs[idx], m.next_mask[idx], m.terminal[idx], self.target,
                       c.gamma, self.params if c.double_q else None)
        loss, grad = nn.backward(self.params, m.obs[idx], m.action[idx], y, nn.LossConfig(c.huber_delta))
        self.params, self.adam = nn.adam_step(self.params, self.adam, grad, self.lr())
        self.loss_avg = loss if math.isnan(self.loss_avg) else 0.99 * self.loss_avg + 0.01 * loss
        self.updates += 1

    # -- one episode
    def episode(self) -> float:
        c, ocfg = self.cfg, self.cfg.obs
        eps = self.epsilon()
        ep_rng = stream(c.seed, TAG_TRAIN, self.trial + 1)
        real = realization_for(self.spec, ep_rng)
        scen = sample_demands(real, self.spec, ep_rng)
        s = initial_state(make_problem(real, self.spec))
        m = self.spec.m
        buff: list[Optional[tuple]] = [None] * m
        eta_last = np.zeros(m)
        prev = None            # (state, vehicle, action, action_index, obs) of the last decision
        total = 0.0
        rng = self.rng
        while True:
            terminal = is_terminal(s)
            if terminal:
                v, o, tg, mask = None, None, None, None
            else:
                v = select_active_vehicle(s, rng)
                o, tg = observe(s, v, ocfg, check=False)
                mask = action_mask(s, v, tg, ocfg)
            if prev is not None:
                ps, pv, pa, pi, po = prev
                if terminal:
                    nobs, nmask, tflag = np.zeros_like(po), np.zeros(ocfg.n_actions, dtype=bool), True
                else:
                    nobs, nmask, tflag = o, mask, is_terminal_for(s, v, mask)
                buff[pv] = (ps, pv, pa, pi, po, s, v, nobs, nmask, tflag)
            if terminal:
                for u in range(m):
                    if buff[u] is not None:
                        self._complete(buff[u], eta_last[u])
                        buff[u] = None
                break
            if buff[v] is not None:
                self._complete(buff[v], eta_last[v])
                buff[v] = None
            i = epsilon_greedy_index(o, mask, self.params, eps, rng)
            a = index_to_env_action(i, tg, ocfg)
            eta_last[v] = 0.0
            prev = (s, v, a, i, o)
            s2 = apply_action(s, v, a, check=False)
            if rng.random() < c.beta_t:
                self.update()
            s, served = reveal_and_advance(s2, scen)
            for u, eta in served:
                eta_last[u] = eta
                total += eta
        return total

    def _complete(self, entry, reward) -> None:
        ps, pv, pa, pi, po, ns, nv, nobs, nmask, tflag = entry
        self.memory.push(po, pi, reward, nobs, nmask, tflag)
        if self.on_experience is not None:
            self.on_experience(Experience(ps, pv, pa, pi, float(reward), ns, nv, po, nobs, nmask, tflag))

    def probe_mean(self) -> float:
        if self.probe is None:
            c = self.cfg
            self.probe = make_grid(self.spec, c.probe_customers, c.probe_demands,
                                   int(stream(c.seed, TAG_PROBE).integers(2**62)))
        pol = GreedyQPolicy(self.params, self.cfg.obs)
        tot = 0.0
        for k in range(len(self.probe)):
            real, scen = self.probe[k]
            tot += run_episode(pol, real, scen, self.spec, stream(self.cfg.seed, TAG_PROBE, k)).total_served
        return tot / max(len(self.probe), 1)

    def run(self, until: Optional[int] = None, checkpoint_path=None, progress: bool = False) -> None:
        c = self.cfg
        until = c.trials_max if until is None else min(until, c.trials_max)
        t0 = time.time()
        while self.trial < until:
            self.episode()
            self.trial += 1
            if self.trial % c.beta_d == 0:
                self.target = nn.copy_to_target(self.params)
            if c.checkpoint_every and self.trial % c.checkpoint_every == 0:
                self.record_stats()
                if checkpoint_path is not None:
                    save_checkpoint(self, checkpoint_path)
                if progress:
                    r = self.stats.rows[-1]
                    print(f"trial {self.trial}: probe {r['probe_mean']:.2f} loss {r['loss']:.3f} "
                          f"eps {r['epsilon']:.3f} lr {r['lr']:.2e} ({time.time() - t0:.0f}s)",
                          file=sys.stderr, flush=True)

    def record_stats(self) -> None:
        self.stats.add(trial=self.trial, probe_mean=self.probe_mean(), loss=self.loss_avg,
                       epsilon=self.epsilon(), lr=self.lr())


def train(spec: InstanceSpec, cfg: TrainConfig, rng=None, checkpoint_path=None, resume_from=None,
          progress: bool = False, on_experience=None) -> tuple[nn.MlpParams, TrainStats]:
    """Run DecQN training; ``rng`` is unused beyond the seed in cfg (kept for API symmetry)."""
    tr = load_checkpoint(resume_from, spec) if resume_from is not None else Trainer.create(spec, cfg)
    tr.on_experience = on_experience
    tr.run(checkpoint_path=checkpoint_path, progress=progress)
    if not tr.stats.rows or tr.stats.rows[-1]["trial"] != tr.trial:
        if cfg.checkpoint_every:
            tr.record_stats()
    if checkpoint_path is not None:
        save_checkpoint(tr, checkpoint_path)
    return tr.params, tr.stats


# ---------------------------------------------------------------------------
# checkpoints

def _rng_state_json(rng: np.random.Generator) -> str:
    def conv(x):
        if isinstance(x, np.ndarray):
            return {"__nd__": x.tolist(), "dtype": str(x.dtype)}
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, (np.integer,)):
            return int(x)
        return x
    return json.dumps(conv(rng.bit_generator.state))


def _rng_from_json(text: str) -> np.random.Generator:
    def conv(x):
        if isinstance(x, dict) and "__nd__" in x:
            return np.array(x["__nd__"], dtype=x["dtype"])
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        return x
    st = conv(json.loads(text))
    bg = getattr(np.random, st["bit_generator"])()
    bg.state = st
    return np.random.Generator(bg)


def save_checkpoint(tr: Trainer, path) -> None:
    from .instance import spec_to_dict
    arrays = {}
    arrays.update(nn.params_to_arrays(tr.params, "p_"))
    arrays.update(nn.params_to_arrays(tr.target, "t_"))
    for k, (mm, vv) in enumerate(zip(tr.adam.m, tr.adam.v)):
        arrays[f"adam_m{k}"] = mm
        arrays[f"adam_v{k}"] = vv
    arrays.update(tr.memory.arrays())
    meta = {"trial": tr.trial, "adam_t": tr.adam.t, "loss_avg": tr.loss_avg, "updates": tr.updates,
            "config": tr.cfg.to_dict(), "spec": spec_to_dict(tr.spec), "stats": tr.stats.rows,
            "rng": _rng_state_json(tr.rng), "sizes": list(tr.params.sizes)}
    arrays["meta"] = np.array(json.dumps(meta))
    arrays["schema_version"] = np.array(CHECKPOINT_SCHEMA)
    nn.write_npz(path, arrays)


def load_checkpoint(path, spec: Optional[InstanceSpec] = None) -> Trainer:
    from .instance import spec_from_dict
    d = nn.read_npz(path)
    nn.check_npz_schema(d, CHECKPOINT_SCHEMA)
    try:
        meta = json.loads(str(d["meta"]))
    except (KeyError, json.JSONDecodeError) as e:
        raise SchemaError(f"{path}: corrupt checkpoint header") from e
    cfg = TrainConfig.from_dict(meta["config"])
    spec = spec if spec is not None else spec_from_dict(meta["spec"])
    params = nn.params_from_arrays(d, "p_")
    target = nn.params_from_arrays(d, "t_")
    n = len(params.arrays())
    adam = nn.AdamState([d[f"adam_m{k}"] for k in range(n)], [d[f"adam_v{k}"] for k in range(n)],
                        int(meta["adam_t"]))
    tr = Trainer(spec, cfg, params, target, adam, ReplayMemory.from_arrays(d), _rng_from_json(meta["rng"]),
                 trial=int(meta["trial"]), loss_avg=float(meta["loss_avg"]), updates=int(meta["updates"]))
    tr.stats.rows = list(meta["stats"])
    return tr


def load_policy_params(path) -> tuple[nn.MlpParams, ObservationConfig]:
    """Greedy-policy parameters from either a training checkpoint or a bare parameter file."""
    d = nn.read_npz(path)
    if "meta" in d:
        nn.check_npz_schema(d, CHECKPOINT_SCHEMA)
        meta = json.loads(str(d["meta"]))
        return nn.params_from_arrays(d, "p_"), TrainConfig.from_dict(meta["config"]).obs
    return nn.load_params(path), ObservationConfig()

"""Two-hidden-layer ReLU network with Huber loss and Adam, in plain numpy (float64)."""
from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, SchemaError, StorageError, UsageError

PARAMS_SCHEMA = 1


def hidden_sizes(h_in: int, h_out: int) -> tuple[int, int]:
    d = h_in - h_out
    return int(np.floor(2 * d / 3)) + h_out, int(np.floor(d / 3)) + h_out


@dataclass
class MlpParams:
    W: list[np.ndarray]      # [(h_in, h1), (h1, h2), (h2, h_out)]
    b: list[np.ndarray]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.W[0].shape[0],) + tuple(w.shape[1] for w in self.W)

    def arrays(self) -> list[np.ndarray]:
        return [*self.W, *self.b]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.W], [b.copy() for b in self.b])

    def equal(self, other: "MlpParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()])

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.t,
                         self.beta1, self.beta2, self.eps)


@dataclass(frozen=True)
class LossConfig:
    delta: float = 5.0

    def __post_init__(self):
        if self.delta <= 0:
            raise UsageError("Huber delta must be positive")


def init(h_in: int, h_out: int, rng: np.random.Generator, h1: Optional[int] = None,
         h2: Optional[int] = None) -> MlpParams:
    """He-uniform weights, zero biases."""
    if h_in < 1 or h_out < 1:
        raise UsageError("layer sizes must be positive")
    d1, d2 = hidden_sizes(h_in, h_out)
    sizes = [h_in, h1 or d1, h2 or d2, h_out]
    W, b = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / fan_in)
        W.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        b.append(np.zeros(fan_out))
    return MlpParams(W, b)


def zeros(h_in: int, h_out: int, h1: Optional[int] = None, h2: Optional[int] = None) -> MlpParams:
    d1, d2 = hidden_sizes(h_in, h_out)
    sizes = [h_in, h1 or d1, h2 or d2, h_out]
    return MlpParams([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                     [np.zeros(b) for b in sizes[1:]])


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Q values for one input vector (h_in,) or a batch (B, h_in)."""
    if x.shape[-1] != params.W[0].shape[0]:
        raise UsageError(f"input size {x.shape[-1]} != {params.W[0].shape[0]}")
    W, b = params.W, params.b
    z = np.maximum(x @ W[0] + b[0], 0.0)
    z = np.maximum(z @ W[1] + b[1], 0.0)
    return z @ W[2] + b[2]


def huber(err, cfg: LossConfig = LossConfig()):
    a = np.abs(err)
    d = cfg.delta
    return np.where(a <= d, 0.5 * a * a, d * (a - 0.5 * d))


def loss(params: MlpParams, X: np.ndarray, actions: np.ndarray, targets: np.ndarray,
         cfg: LossConfig = LossConfig()) -> float:
    q = forward(params, X)[np.arange(len(actions)), actions]
    return float(np.mean(huber(q - targets, cfg)))


def backward(params: MlpParams, X: np.ndarray, actions: np.ndarray, targets: np.ndarray,
             cfg: LossConfig = LossConfig()) -> tuple[float, MlpParams]:
    """Mean Huber loss over the batch and its gradient.

    Only the output of the chosen action carries loss; the other outputs get
    zero gradient.
    """
    X = np.atleast_2d(X)
    B = X.shape[0]
    if B == 0:
        raise UsageError("empty batch")
    W, b = params.W, params.b
    a1 = X @ W[0] + b[0]
    z1 = np.maximum(a1, 0.0)
    a2 = z1 @ W[1] + b[1]
    z2 = np.maximum(a2, 0.0)
    out = z2 @ W[2] + b[2]
    rows = np.arange(B)
    err = out[rows, actions] - targets
    L = float(np.mean(huber(err, cfg)))
    g_out = np.zeros_like(out)
    g_out[rows, actions] = np.clip(err, -cfg.delta, cfg.delta) / B
    gW3 = z2.T @ g_out
    gb3 = g_out.sum(0)
    g2 = (g_out @ W[2].T) * (a2 > 0)
    gW2 = z1.T @ g2
    gb2 = g2.sum(0)
    g1 = (g2 @ W[1].T) * (a1 > 0)
    gW1 = X.T @ g1
    gb1 = g1.sum(0)
    return L, MlpParams([gW1, gW2, gW3], [gb1, gb2, gb3])


def adam_step(params: MlpParams, state: AdamState, grad: MlpParams, lr: float) -> tuple[MlpParams, AdamState]:
    t = state.t + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grad.arrays(), state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    k = len(params.W)
    return (MlpParams(new_p[:k], new_p[k:]),
            AdamState(new_m, new_v, t, b1, b2, eps))


def copy_to_target(params: MlpParams) -> MlpParams:
    return params.copy()


# ---------------------------------------------------------------------------
# persistence

def params_to_arrays(params: MlpParams, prefix: str = "") -> dict[str, np.ndarray]:
    d = {}
    for i, (w, b) in enumerate(zip(params.W, params.b)):
        d[f"{prefix}W{i}"] = w
        d[f"{prefix}b{i}"] = b
    return d


def params_from_arrays(d, prefix: str = "", n_layers: int = 3) -> MlpParams:
    return MlpParams([np.array(d[f"{prefix}W{i}"], dtype=np.float64) for i in range(n_layers)],
                     [np.array(d[f"{prefix}b{i}"], dtype=np.float64) for i in range(n_layers)])


def save_params(params: MlpParams, path) -> None:
    arrays = params_to_arrays(params)
    arrays["schema_version"] = np.array(PARAMS_SCHEMA)
    arrays["sizes"] = np.array(params.sizes)
    arrays["dtype"] = np.array("float64")
    write_npz(path, arrays)


def load_params(path) -> MlpParams:
    d = read_npz(path)
    check_npz_schema(d, PARAMS_SCHEMA)
    p = params_from_arrays(d)
    if tuple(p.sizes) != tuple(int(s) for s in d["sizes"]):
        raise SchemaError(f"{path}: layer sizes do not match the stored header")
    return p


def write_npz(path, arrays: dict) -> None:
    # deterministic bytes: fixed member order, no timestamps beyond zip's fixed defaults
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            a = io.BytesIO()
            np.lib.format.write_array(a, np.asanyarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, a.getvalue())
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


def read_npz(path) -> dict:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    try:
        with np.load(io.BytesIO(raw), allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, EOFError, OSError, KeyError) as e:
        raise DataError(f"{path}: unreadable checkpoint ({e})") from e


def check_npz_schema(d: dict, version: int) -> None:
    if "schema_version" not in d or int(d["schema_version"]) != version:
        raise SchemaError(f"unsupported checkpoint schema {d.get('schema_version')!r} (expected {version})")

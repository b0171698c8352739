"""Named parameters, the Adam optimizer, seeded RNG streams, gradient checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from ..errors import NumericError

# Independent random streams per consumer, so e.g. changing the batch order
# never perturbs weight initialization.
STREAMS = {"init": 0, "dropout": 1, "shuffle": 2, "generator": 3, "folds": 4, "probe": 5}


def make_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """PCG64 generator for ``(seed, stream, *extra)``; identical keys give identical draws."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(STREAMS[stream],) + tuple(extra))
    return np.random.Generator(np.random.PCG64(ss))


class ParameterStore:
    """Insertion-ordered ``name -> array`` map with gradient buffers and trainable flags."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True, dtype=np.float64) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=dtype)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        self._trainable[name] = trainable
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        cur = self._values[name]
        value = np.asarray(value, dtype=cur.dtype)
        if value.shape != cur.shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {cur.shape}")
        cur[...] = value

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        if name not in self._trainable:
            raise KeyError(name)
        self._trainable[name] = bool(flag)

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(
            v.size for n, v in self._values.items() if self._trainable[n] or not trainable_only
        )

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self._values.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, v in snap.items():
            self[n] = v

    def copy(self, dtype=np.float64) -> "ParameterStore":
        out = ParameterStore()
        for n, v in self._values.items():
            out.add(n, v, self._trainable[n], dtype=dtype)
        return out


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    weight_decay: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decoupled: bool = False
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "decoupled": self.decoupled,
        }


def adam_step(params: ParameterStore, state: AdamState) -> None:
    """One Adam update in place over every trainable parameter.

    Weight decay is L2 added to the gradient before the moment updates
    unless ``state.decoupled``, in which case it shrinks the weights
    directly. Frozen parameters and their moments are left untouched.
    """
    for name in params:
        if params.is_trainable(name) and not np.all(np.isfinite(params.grad(name))):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2, lr, wd = state.beta1, state.beta2, state.learning_rate, state.weight_decay
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in params:
        if not params.is_trainable(name):
            continue
        theta = params[name]
        g = params.grad(name)
        if wd and not state.decoupled:
            g = g + wd * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd and state.decoupled:
            theta -= lr * wd * theta
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def finite_difference_check(
    loss_fn: Callable[[ParameterStore], float],
    params: ParameterStore,
    probes: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    *,
    fd_loss_fn: Callable[[ParameterStore], float] | None = None,
    precision=None,
    return_details: bool = False,
):
    """Compare analytic gradients with central differences at random scalar probes.

    ``loss_fn(params)`` must return the scalar loss and leave the analytic
    gradient in ``params.grad``; it is called once at the current point.
    The two evaluations per probe use ``fd_loss_fn`` (default ``loss_fn``),
    which only needs to return the loss. With ``precision`` (e.g.
    ``np.longdouble``) the probes run on a copy of the parameters in that
    dtype, which pushes the cancellation floor of ``L(θ+h) - L(θ-h)`` far
    below float64's.

    Returns the max relative error ``|g - fd| / max(|g|, |fd|)``, falling
    back to the absolute error when ``|g| < 1e-8``.
    """
    params.zero_grad()
    loss_fn(params)
    probe_fn = fd_loss_fn or loss_fn
    work = params if precision is None else params.copy(dtype=precision)
    names = [n for n in params if params.is_trainable(n)]
    analytic = {n: params.grad(n).copy() for n in names}
    sizes = np.array([params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = make_rng(seed, "probe")
    flat = rng.choice(int(offsets[-1]), size=min(probes, int(offsets[-1])), replace=False)

    worst = 0.0
    details = []
    for k in np.sort(flat):
        p = int(np.searchsorted(offsets, k, side="right") - 1)
        name = names[p]
        idx = np.unravel_index(int(k - offsets[p]), params[name].shape)
        theta = work[name]
        orig = theta[idx]
        theta[idx] = orig + h
        plus = theta[idx]
        up = probe_fn(work)
        theta[idx] = orig - h
        minus = theta[idx]
        down = probe_fn(work)
        theta[idx] = orig
        fd = float((up - down) / (plus - minus))
        g = float(analytic[name][idx])
        if abs(g) < 1e-8:
            err = abs(g - fd)
        else:
            err = abs(g - fd) / max(abs(g), abs(fd))
        worst = max(worst, err)
        details.append((name, idx, g, fd, err))
    for n in names:
        params.grad(n)[...] = analytic[n]
    if return_details:
        return worst, details
    return worst

"""Named trainable parameters, Adam, and finite-difference gradient checking."""

from __future__ import annotations

import hashlib
import struct
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from .tensor import Tensor


class Parameter:
    """A named leaf tensor with Adam moment buffers."""

    __slots__ = ("name", "tensor", "m", "v", "step")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.tensor = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


class ParamStore:
    """Insertion-ordered registry of parameters, addressed by dotted path."""

    def __init__(self) -> None:
        self._params: Dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def tensor(self, name: str) -> Tensor:
        return self._params[name].tensor

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[Tuple[str, Parameter]]:
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def num_values(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        """Replace parameter values in place; names and shapes must match."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in self._params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {value.shape} vs {p.data.shape}"
                )
            p.tensor.data = value.copy()


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Substream keyed by (seed, parameter name); creation order never matters."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = struct.unpack("<4I", digest[:16])
    return np.random.default_rng(np.random.SeedSequence([seed, *words]))


def init_matrix(store: ParamStore, name: str, fan_in: int, fan_out: int, seed: int) -> Parameter:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    value = param_rng(seed, name).uniform(-a, a, size=(fan_in, fan_out))
    return store.add(name, value)


def init_bias(store: ParamStore, name: str, dim: int) -> Parameter:
    return store.add(name, np.zeros(dim))


def init_embedding(store: ParamStore, name: str, count: int, dim: int, seed: int) -> Parameter:
    value = param_rng(seed, name).normal(0.0, 1.0 / np.sqrt(dim), size=(count, dim))
    return store.add(name, value)


def init_gain(store: ParamStore, name: str, dim: int) -> Parameter:
    return store.add(name, np.ones(dim))


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def adam_step(
    store: ParamStore,
    lr: float,
    betas: Tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> None:
    """One Adam update over every parameter in the store.

    All gradients must be populated (a zero gradient array is fine; an absent
    one is an error). Gradients are cleared and the step count advances even
    when every gradient is zero.
    """
    beta1, beta2 = betas
    for name, p in store.items():
        if p.tensor.grad is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
    for name, p in store.items():
        g = p.tensor.grad
        p.step += 1
        np.multiply(p.m, beta1, out=p.m)
        p.m += (1.0 - beta1) * g
        np.multiply(p.v, beta2, out=p.v)
        g *= g  # grad is consumed here and cleared below
        g *= 1.0 - beta2
        p.v += g
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        np.sqrt(vhat, out=vhat)
        vhat += eps
        np.multiply(mhat, lr, out=mhat)
        mhat /= vhat
        p.tensor.data = p.data - mhat
        p.tensor.grad = None


GRAD_SAMPLE_THRESHOLD = 10_000
GRAD_SAMPLE_SIZE = 1_000


def grad_check(
    f: Callable[[], Tensor],
    store: ParamStore,
    epsilon: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
    sample_threshold: int = GRAD_SAMPLE_THRESHOLD,
    sample_size: int = GRAD_SAMPLE_SIZE,
) -> float:
    """Compare analytic gradients of a scalar function against central
    differences; returns the worst relative error over checked coordinates.

    When the store holds more than sample_threshold values, a seeded random
    sample of coordinates is checked instead of all of them.
    """
    store.zero_grads()
    out = f()
    if out.data.shape != ():
        raise ValueError(f"grad_check needs a scalar function, got shape {out.data.shape}")
    if not np.isfinite(out.data):
        raise FloatingPointError("grad_check: non-finite function value")
    out.backward()
    analytic = {}
    for name, p in store.items():
        if p.tensor.grad is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if not np.all(np.isfinite(p.tensor.grad)):
            raise FloatingPointError(f"grad_check: non-finite gradient for {name!r}")
        analytic[name] = p.tensor.grad.copy()

    total = store.num_values()
    coords: list[tuple[str, tuple]] = []
    if total > sample_threshold:
        if rng is None:
            rng = np.random.default_rng(0)
        names, sizes = zip(*[(name, p.data.size) for name, p in store.items()])
        bounds = np.cumsum(sizes)
        for flat in sorted(rng.choice(total, size=min(sample_size, total), replace=False)):
            which = int(np.searchsorted(bounds, flat, side="right"))
            local = int(flat - (bounds[which - 1] if which else 0))
            p = store[names[which]]
            coords.append((names[which], np.unravel_index(local, p.data.shape)))
    else:
        for name, p in store.items():
            for local in range(p.data.size):
                coords.append((name, np.unravel_index(local, p.data.shape)))

    worst = 0.0
    for name, idx in coords:
        p = store[name]
        saved = p.data[idx]
        p.data[idx] = saved + epsilon
        f_plus = f().item()
        p.data[idx] = saved - epsilon
        f_minus = f().item()
        p.data[idx] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"grad_check: non-finite perturbed value at {name}{idx}")
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = analytic[name][idx]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
        if rel > worst:
            worst = rel
    store.zero_grads()
    return worst

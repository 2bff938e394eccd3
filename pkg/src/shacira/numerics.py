"""Parameter storage, Adam, seeded random streams and a finite-difference checker."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "AdamState",
    "NonFiniteGradientError",
    "ParamTensor",
    "SeededRng",
    "adam_step",
    "finite_diff_check",
]


class NonFiniteGradientError(FloatingPointError):
    """Raised when a parameter group receives a NaN or infinite gradient."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter group {name!r}")
        self.name = name


@dataclass
class ParamTensor:
    """A learnable array with a same-shape gradient accumulator."""

    name: str
    values: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.grad.shape != self.values.shape:
            raise ValueError(f"{self.name}: grad shape {self.grad.shape} != {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> "ParamTensor":
        return ParamTensor(self.name, self.values.astype(dtype), self.grad.astype(dtype))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: ParamTensor, **kw) -> "AdamState":
        return cls(np.zeros_like(param.values), np.zeros_like(param.values), **kw)


def adam_step(param: ParamTensor, state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update in place and zero the gradient.

    ``lr == 0`` is accepted and leaves the values untouched (the moments and
    step counter still advance), which is how a parameter group is frozen.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(param.name)
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise ValueError(f"{param.name}: optimizer state shape mismatch")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    # a finite gradient can still overflow g*g; the resulting non-finite
    # values surface as a non-finite loss on the next step
    with np.errstate(over="ignore", invalid="ignore"):
        state.m *= b1
        state.m += (1.0 - b1) * g
        state.v *= b2
        state.v += (1.0 - b2) * (g * g)
        if lr > 0:
            m_hat = state.m / (1.0 - b1**state.t)
            v_hat = state.v / (1.0 - b2**state.t)
            param.values -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.values.dtype)
    param.zero_grad()


class SeededRng:
    """Deterministic random streams keyed by ``(seed, group)``.

    Every named group gets its own Philox-4x64 generator whose key comes from
    ``numpy.random.SeedSequence([seed, crc32(group)])``. Philox is counter
    based and SeedSequence hashing is platform independent, so draws are
    reproducible everywhere, and asking for a new group never shifts the
    stream of an existing one.
    """

    algorithm = "philox4x64-seedsequence"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, group: str) -> np.random.Generator:
        gen = self._streams.get(group)
        if gen is None:
            ss = np.random.SeedSequence([self.seed, zlib.crc32(group.encode())])
            gen = np.random.Generator(np.random.Philox(ss))
            self._streams[group] = gen
        return gen

    def uniform(self, group: str, low: float, high: float, size) -> np.ndarray:
        return self.stream(group).uniform(low, high, size)

    def gumbel(self, group: str, size) -> np.ndarray:
        # Gumbel(0, 1) by inversion; the open interval keeps log finite.
        u = self.stream(group).random(size)
        u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
        return -np.log(-np.log(u))


def finite_diff_check(
    f: Callable[[], float],
    x: ParamTensor,
    analytic_grad: np.ndarray,
    h: float = 1e-4,
    indices=None,
) -> float:
    """Max relative error between central differences of ``f`` and ``analytic_grad``.

    ``f`` is evaluated with ``x.values`` perturbed in place, one coordinate at
    a time; the original value is restored afterwards. ``indices`` restricts
    the probe to a subset of flat coordinates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    flat = x.values.reshape(-1)
    grad = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    if grad.size != flat.size:
        raise ValueError("analytic gradient shape does not match parameter")
    probe = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"{x.name}: non-finite objective at coordinate {i}")
        cd = (fp - fm) / (2.0 * h)
        a = grad[i]
        err = abs(cd - a) / max(1e-12, abs(a), abs(cd))
        worst = max(worst, err)
    return worst

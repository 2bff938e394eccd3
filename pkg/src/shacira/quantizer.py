"""Integer quantization of latent proxies.

During training each proxy is rounded down or up at random. The choice is a
two-class gate whose logits sharpen as the temperature anneals; it is sampled
with Gumbel noise and differentiated through the Gumbel-softmax relaxation.
Once the anneal window closes, rounding is deterministic (nearest integer,
half to even) with a straight-through identity gradient.

Gate index 0 is "round down" and index 1 is "round up".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import SeededRng

__all__ = [
    "LATENT_MAX",
    "LATENT_MIN",
    "AnnealSchedule",
    "GateSample",
    "Quantized",
    "gate_probs",
    "round_deterministic",
    "sample_quantized",
    "straight_through",
    "tau_at",
]

FRAC_EPS = 1e-6
LATENT_MIN = -(2**15)
LATENT_MAX = 2**15 - 1


@dataclass(frozen=True)
class AnnealSchedule:
    tau0: float = 1.0
    tau_min: float = 1e-3
    anneal_fraction: float = 0.95
    total_steps: int = 20000

    def __post_init__(self):
        if not 0.0 <= self.anneal_fraction <= 1.0:
            raise ValueError("anneal_fraction must lie in [0, 1]")
        if self.tau0 <= 0 or self.tau_min <= 0:
            raise ValueError("temperatures must be positive")

    @property
    def anneal_steps(self) -> int:
        return int(round(self.anneal_fraction * self.total_steps))


def tau_at(schedule: AnnealSchedule, step: int) -> float | None:
    """Temperature at ``step``, or ``None`` once rounding is deterministic."""
    n = schedule.anneal_steps
    if step >= n:
        return None
    return schedule.tau0 * (schedule.tau_min / schedule.tau0) ** (step / n)


def _frac(q: np.ndarray) -> np.ndarray:
    return np.clip(q - np.floor(q), FRAC_EPS, 1.0 - FRAC_EPS)


def _gate_logits(q: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    r = _frac(q)
    return -np.arctanh(r) / tau, -np.arctanh(1.0 - r) / tau


def gate_probs(q, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities ``(p_down, p_up)`` of the rounding gate."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    q = np.asarray(q, dtype=np.float64)
    l0, l1 = _gate_logits(q, tau)
    p_up = 0.5 * (1.0 + np.tanh(0.5 * (l1 - l0)))
    return 1.0 - p_up, p_up


@dataclass
class Quantized:
    """Forward values and the elementwise surrogate derivative dQ/dq."""

    values: np.ndarray
    dvalues: np.ndarray


@dataclass
class GateSample(Quantized):
    down: np.ndarray = None  # type: ignore[assignment]
    floor: np.ndarray = None  # type: ignore[assignment]
    integral: np.ndarray = None  # type: ignore[assignment]
    p_down: np.ndarray = None  # type: ignore[assignment]
    soft_up: np.ndarray = None  # type: ignore[assignment]
    gumbel: np.ndarray = None  # type: ignore[assignment]

    def relaxed(self) -> Quantized:
        """Soft Gumbel-softmax value in the forward pass as well.

        The surrogate derivative is then the exact derivative of the forward
        value, which is what gradient checks compare against.
        """
        soft = np.where(self.integral, self.floor, self.floor + self.soft_up)
        return Quantized(soft.astype(self.values.dtype), self.dvalues)


def sample_quantized(
    q: np.ndarray,
    tau: float,
    rng: SeededRng | None = None,
    gumbel: np.ndarray | None = None,
    group: str = "gumbel",
) -> GateSample:
    """Stochastic rounding with straight-through Gumbel-softmax gradients.

    ``gumbel`` (shape ``q.shape + (2,)``) may be supplied to fix the noise.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    q = np.asarray(q)
    if not np.all(np.isfinite(q)):
        raise FloatingPointError("non-finite latent proxy")
    if gumbel is None:
        if rng is None:
            raise ValueError("either rng or gumbel noise is required")
        gumbel = rng.gumbel(group, q.shape + (2,))
    q64 = q.astype(np.float64)
    fl = np.floor(q64)
    integral = fl == q64
    r = _frac(q64)
    at0 = np.arctanh(r)
    at1 = np.arctanh(1.0 - r)
    # log-probabilities up to a shared constant; the softmax ignores it
    l0 = -at0 / tau
    l1 = -at1 / tau
    down = (l0 + gumbel[..., 0]) >= (l1 + gumbel[..., 1])
    down |= integral
    values = np.where(down, fl, fl + 1.0)

    s = ((l1 + gumbel[..., 1]) - (l0 + gumbel[..., 0])) / tau
    soft_up = 0.5 * (1.0 + np.tanh(0.5 * s))
    raw = q64 - fl
    inside = (raw > FRAC_EPS) & (raw < 1.0 - FRAC_EPS)
    dlogit = (1.0 / (1.0 - r * r) + 1.0 / (1.0 - (1.0 - r) ** 2)) / (tau * tau)
    dvalues = np.where(inside & ~integral, soft_up * (1.0 - soft_up) * dlogit, 0.0)

    p_up = 0.5 * (1.0 + np.tanh(0.5 * (l1 - l0)))
    p_down = np.where(integral, 1.0, 1.0 - p_up)
    dt = q.dtype
    return GateSample(
        values.astype(dt),
        dvalues.astype(dt),
        down=down,
        floor=fl,
        integral=integral,
        p_down=p_down,
        soft_up=soft_up,
        gumbel=gumbel,
    )


def round_deterministic(q) -> np.ndarray:
    """Nearest integer with ties to even (values stay in the input dtype)."""
    return np.rint(np.asarray(q))


def straight_through(q: np.ndarray) -> Quantized:
    q = np.asarray(q)
    return Quantized(np.rint(q), np.ones_like(q))


def clamp_latents(q: np.ndarray) -> None:
    np.clip(q, LATENT_MIN, LATENT_MAX, out=q)


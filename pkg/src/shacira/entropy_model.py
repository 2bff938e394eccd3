"""Learned univariate density models over the latent dimensions.

Each latent dimension owns a small monotone network mapping a scalar to the
logit of its CDF: softplus-positive weight matrices, additive biases and a
``tanh(a) * tanh(z)`` residual gate after every hidden stage, then a sigmoid.
Softplus keeps every weight positive and ``|tanh(a)| < 1`` keeps every gate
increasing, so the CDF is non-decreasing by construction.

The probability of an integer symbol ``q`` is ``c(q + 1/2) - c(q - 1/2)``; the
rate loss charges ``-log2`` of that mass at noise-perturbed latents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ParamTensor, SeededRng

__all__ = [
    "PMF_FLOOR",
    "DensityModel",
    "PmfTable",
    "RateContext",
    "build_pmf_table",
    "cdf",
    "pmf",
    "self_information_backward",
    "self_information_loss",
]

PMF_FLOOR = 1e-9
_LN2 = np.log(2.0)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _dsigmoid(x):
    e = np.exp(-np.abs(x))
    return e / (1.0 + e) ** 2


class DensityModel:
    """One independent monotone CDF network per latent dimension."""

    def __init__(self, channels: int, filters=(3, 3, 3, 3), init_scale: float = 10.0,
                 rng: SeededRng | None = None, dtype=np.float64):
        self.channels = int(channels)
        self.filters = tuple(int(f) for f in filters)
        self.init_scale = float(init_scale)
        dims = (1,) + self.filters + (1,)
        scale = self.init_scale ** (1.0 / (len(self.filters) + 1))
        self.matrices: list[ParamTensor] = []
        self.biases: list[ParamTensor] = []
        self.factors: list[ParamTensor] = []
        for i in range(len(self.filters) + 1):
            init = np.log(np.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(ParamTensor(f"density.matrix{i}",
                                             np.full((channels, dims[i + 1], dims[i]), init, dtype=dtype)))
            if rng is None:
                b = np.zeros((channels, dims[i + 1]))
            else:
                b = rng.uniform("init.density", -0.5, 0.5, (channels, dims[i + 1]))
            self.biases.append(ParamTensor(f"density.bias{i}", b.astype(dtype)))
            if i < len(self.filters):
                self.factors.append(ParamTensor(f"density.factor{i}",
                                                np.zeros((channels, dims[i + 1]), dtype=dtype)))

    def params(self) -> list[ParamTensor]:
        return [*self.matrices, *self.biases, *self.factors]

    @property
    def param_count(self) -> int:
        return sum(p.values.size for p in self.params())

    def flat_values(self) -> np.ndarray:
        return np.concatenate([p.values.reshape(-1) for p in self.params()])

    def load_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for p in self.params():
            n = p.values.size
            p.values = np.asarray(flat[pos:pos + n], dtype=p.values.dtype).reshape(p.shape).copy()
            p.grad = np.zeros_like(p.values)
            pos += n
        if pos != len(flat):
            raise ValueError(f"density parameter count mismatch: {len(flat)} != {pos}")

    def astype(self, dtype) -> None:
        for group in (self.matrices, self.biases, self.factors):
            for i, p in enumerate(group):
                group[i] = p.astype(dtype)

    # -- logits of the CDF -------------------------------------------------

    def logits(self, x: np.ndarray, dims=None) -> tuple[np.ndarray, list]:
        """CDF logits of ``x`` with shape ``(C, N)``; returns ``(logits, cache)``."""
        sel = slice(None) if dims is None else dims
        u = np.asarray(x, dtype=np.float64)[:, None, :]
        cache = []
        n_hidden = len(self.filters)
        for i in range(n_hidden + 1):
            h = self.matrices[i].values[sel].astype(np.float64)
            w = _softplus(h)
            z = np.einsum("cij,cjn->cin", w, u) + self.biases[i].values[sel].astype(np.float64)[:, :, None]
            if i < n_hidden:
                a = np.tanh(self.factors[i].values[sel].astype(np.float64))[:, :, None]
                tz = np.tanh(z)
                cache.append((u, w, h, z, a, tz))
                u = z + a * tz
            else:
                cache.append((u, w, h, z, None, None))
                u = z
        return u[:, 0, :], cache

    def logits_backward(self, cache: list, dlogits: np.ndarray, dims=None) -> np.ndarray:
        """Accumulate parameter gradients and return d/dx for upstream ``dlogits``."""
        if dims is not None:
            raise NotImplementedError("parameter gradients need all channels")
        du = dlogits[:, None, :]
        for i in range(len(cache) - 1, -1, -1):
            u, w, h, z, a, tz = cache[i]
            if a is None:
                dz = du
            else:
                dz = du * (1.0 + a * (1.0 - tz * tz))
                factor = self.factors[i].values.astype(np.float64)
                self.factors[i].grad += (np.sum(du * tz, axis=2) * (1.0 - np.tanh(factor) ** 2)).astype(
                    self.factors[i].grad.dtype)
            self.biases[i].grad += np.sum(dz, axis=2).astype(self.biases[i].grad.dtype)
            dw = np.einsum("cin,cjn->cij", dz, u)
            self.matrices[i].grad += (dw * _sigmoid(h)).astype(self.matrices[i].grad.dtype)
            du = np.einsum("cij,cin->cjn", w, dz)
        return du[:, 0, :]


def cdf(x, dim: int, model: DensityModel) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    lg, _ = model.logits(x[None, :], dims=slice(dim, dim + 1))
    return _sigmoid(lg[0])


def _mass(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    # evaluate the difference on the side where the sigmoids are not saturated
    sign = np.where(lower + upper > 0, -1.0, 1.0)
    return np.abs(_sigmoid(sign * upper) - _sigmoid(sign * lower))


def pmf(q, dim: int, model) -> np.ndarray:
    """Unfloored probability mass ``c(q + 1/2) - c(q - 1/2)`` for one dimension.

    ``model`` is a :class:`DensityModel` or any CDF callable ``c(x)``.
    """
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    if not isinstance(model, DensityModel):
        return np.asarray(model(q + 0.5), dtype=np.float64) - np.asarray(model(q - 0.5), dtype=np.float64)
    both = np.concatenate([q - 0.5, q + 0.5])[None, :]
    lg, _ = model.logits(both, dims=slice(dim, dim + 1))
    n = q.size
    return _mass(lg[0, :n], lg[0, n:])


@dataclass
class RateContext:
    model: DensityModel
    rows: int
    cache: list = field(repr=False)
    lower: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)
    mass: np.ndarray = field(repr=False)


def self_information_loss(q: np.ndarray, noise: np.ndarray, model) -> tuple[float, RateContext | None]:
    """Bits per latent row of the noise-perturbed proxies ``q`` (shape ``(T, D)``).

    ``model`` may also be a plain callable ``p(x, dim)`` returning masses; the
    loss is then forward-only and the returned context is ``None``.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError(f"expected latents of shape (T, D), got {q.shape}")
    rows = q.shape[0]
    x = (q + np.asarray(noise, dtype=np.float64)).T  # (D, T)
    if not isinstance(model, DensityModel):
        mass = np.stack([np.asarray(model(x[d], d), dtype=np.float64) for d in range(x.shape[0])])
        return float(np.sum(-np.log2(np.maximum(mass, PMF_FLOOR))) / rows), None
    if q.shape[1] != model.channels:
        raise ValueError(f"expected latents of shape (T, {model.channels}), got {q.shape}")
    both = np.concatenate([x - 0.5, x + 0.5], axis=1)
    lg, cache = model.logits(both)
    lower, upper = lg[:, :rows], lg[:, rows:]
    mass = _mass(lower, upper)
    bits = -np.log2(np.maximum(mass, PMF_FLOOR))
    return float(np.sum(bits) / rows), RateContext(model, rows, cache, lower, upper, mass)


def self_information_backward(ctx: RateContext, scale: float = 1.0) -> np.ndarray:
    """Gradient of ``scale * loss`` w.r.t. the proxies; density grads accumulate in place."""
    live = ctx.mass > PMF_FLOOR
    dmass = np.where(live, -scale / (np.maximum(ctx.mass, PMF_FLOOR) * _LN2 * ctx.rows), 0.0)
    dlower = -dmass * _dsigmoid(ctx.lower)
    dupper = dmass * _dsigmoid(ctx.upper)
    dx = ctx.model.logits_backward(ctx.cache, np.concatenate([dlower, dupper], axis=1))
    return (dx[:, :ctx.rows] + dx[:, ctx.rows:]).T


# -- frozen coder tables ---------------------------------------------------


@dataclass
class PmfTable:
    """Integer frequencies over symbols ``q_min..q_max`` summing to ``2**precision``."""

    q_min: int
    q_max: int
    freqs: np.ndarray
    precision: int = 16

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=np.int64)
        if self.freqs.size != self.q_max - self.q_min + 1:
            raise ValueError("frequency count does not match symbol range")
        if np.any(self.freqs < 1) or int(self.freqs.sum()) != 1 << self.precision:
            raise ValueError("frequencies must be >= 1 and sum to 2**precision")

    @property
    def size(self) -> int:
        return int(self.freqs.size)

    @property
    def cumulative(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.freqs)]).astype(np.int64)

    def probabilities(self) -> np.ndarray:
        return self.freqs / float(1 << self.precision)

    def ideal_bits(self, symbols: np.ndarray) -> float:
        p = self.probabilities()[np.asarray(symbols, dtype=np.int64) - self.q_min]
        return float(-np.sum(np.log2(p)))


def build_pmf_table(source, q_min: int, q_max: int, precision: int = 16, dim: int = 0) -> PmfTable:
    """Quantize a PMF over ``q_min..q_max`` into coder frequencies.

    ``source`` is a :class:`DensityModel` (read at dimension ``dim``) or a
    callable mapping an integer array to probabilities. Every symbol gets one
    count; the remaining ``2**precision - n`` counts are apportioned by
    largest remainder (ties to the lower symbol).
    """
    q_min, q_max = int(q_min), int(q_max)
    if q_max < q_min:
        raise ValueError(f"empty symbol range [{q_min}, {q_max}]")
    n = q_max - q_min + 1
    total = 1 << precision
    if n > total:
        raise ValueError(f"{n} symbols do not fit a {precision}-bit table")
    symbols = np.arange(q_min, q_max + 1, dtype=np.float64)
    if isinstance(source, DensityModel):
        p = pmf(symbols, dim, source)
    else:
        p = np.asarray(source(symbols), dtype=np.float64)
    p = np.where(np.isfinite(p) & (p > 0), p, 0.0)
    spare = total - n
    if p.sum() <= 0:
        p = np.ones(n)
    share = p / p.sum() * spare
    base = np.floor(share).astype(np.int64)
    short = spare - int(base.sum())
    if short > 0:
        order = np.lexsort((np.arange(n), -(share - base)))
        base[order[:short]] += 1
    return PmfTable(q_min, q_max, base + 1, precision)


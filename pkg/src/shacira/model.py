"""Quantized-latent feature grid with a shared linear decoder and a small MLP.

Forward path::

    Q = quantize(Qhat)            # integer latents, one table of rows per level
    Z = Q @ W_dec + b_dec         # decoded feature rows
    f = concat_l interp(Z_l, x)   # coarsest level first
    y = MLP(f)                    # two ReLU hidden layers, linear output

The loss is ``MSE(y, target) + lambda_i * rate`` where the rate is the
self-information of the noisy proxies under the density models. All
gradients are written by hand into each :class:`ParamTensor`'s ``grad``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hashgrid
from .entropy_model import DensityModel, PmfTable, build_pmf_table, self_information_backward, self_information_loss
from .hashgrid import GridConfig, LevelLayout
from .numerics import ParamTensor, SeededRng
from .quantizer import AnnealSchedule, Quantized, sample_quantized, straight_through, tau_at

__all__ = [
    "DecoderParams",
    "ForwardContext",
    "GridLookup",
    "LossResult",
    "MlpParams",
    "ModelError",
    "ShaciraModel",
    "backward",
    "forward",
    "loss",
]


class ModelError(RuntimeError):
    pass


@dataclass
class DecoderParams:
    weight: ParamTensor  # (D, F)
    bias: ParamTensor  # (F,)

    def params(self) -> list[ParamTensor]:
        return [self.weight, self.bias]


@dataclass
class MlpParams:
    w1: ParamTensor
    b1: ParamTensor
    w2: ParamTensor
    b2: ParamTensor
    w3: ParamTensor
    b3: ParamTensor

    @classmethod
    def zeros(cls, n_in: int, width: int, n_out: int, dtype) -> "MlpParams":
        shapes = [(n_in, width), (width,), (width, width), (width,), (width, n_out), (n_out,)]
        names = ["w1", "b1", "w2", "b2", "w3", "b3"]
        return cls(*(ParamTensor(f"mlp.{n}", np.zeros(s, dtype=dtype)) for n, s in zip(names, shapes)))

    def params(self) -> list[ParamTensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def layers(self) -> list[tuple[ParamTensor, ParamTensor]]:
        return [(self.w1, self.b1), (self.w2, self.b2), (self.w3, self.b3)]


class ShaciraModel:
    """All learnable state plus the static grid description."""

    def __init__(
        self,
        grid: GridConfig,
        mlp_width: int = 16,
        out_channels: int = 3,
        schedule: AnnealSchedule | None = None,
        dtype=np.float32,
        with_density: bool = True,
        decoder_bias: bool = True,
    ):
        self.grid = grid
        self.layouts: list[LevelLayout] = hashgrid.level_layout(grid)
        rows = [lay.rows for lay in self.layouts]
        self.offsets = np.concatenate([[0], np.cumsum(rows)]).astype(np.int64)
        self.mlp_width = int(mlp_width)
        self.out_channels = int(out_channels)
        self.dtype = np.dtype(dtype)
        self.decoder_bias = bool(decoder_bias)
        D, F = grid.latent_dim, grid.feature_dim
        self.latents = ParamTensor("latents", np.zeros((self.total_rows, D), dtype=dtype))
        self.decoder = DecoderParams(ParamTensor("decoder.weight", np.zeros((D, F), dtype=dtype)),
                                     ParamTensor("decoder.bias", np.zeros(F, dtype=dtype)))
        self.mlp = MlpParams.zeros(F * grid.levels, mlp_width, out_channels, dtype)
        self.density: DensityModel | None = DensityModel(D, dtype=dtype) if with_density else None
        self.schedule = schedule or AnnealSchedule()
        self.mode = "train"
        self.active_levels = grid.levels
        self.pmf_tables: list[PmfTable] | None = None
        self.image_shape: tuple[int, int] | None = None

    @property
    def total_rows(self) -> int:
        return int(self.offsets[-1])

    @property
    def levels(self) -> int:
        return self.grid.levels

    def level_slice(self, level: int) -> slice:
        return slice(int(self.offsets[level]), int(self.offsets[level + 1]))

    def param_groups(self) -> dict[str, list[ParamTensor]]:
        groups = {
            "latents": [self.latents],
            "decoder": self.decoder.params(),
            "mlp": self.mlp.params(),
        }
        if self.density is not None:
            groups["density"] = self.density.params()
        return groups

    def all_params(self) -> list[ParamTensor]:
        return [p for group in self.param_groups().values() for p in group]

    def zero_grad(self) -> None:
        for p in self.all_params():
            p.zero_grad()

    def integer_latents(self) -> np.ndarray:
        return np.rint(self.latents.values.astype(np.float64)).astype(np.int64)

    def raw_float_count(self) -> int:
        """Floats stored uncompressed in a bitstream (decoder + MLP)."""
        return sum(p.values.size for p in self.decoder.params() + self.mlp.params())

    def freeze(self, precision: int = 16) -> None:
        """Snap proxies to integers, build coder tables and switch to 32-bit eval mode."""
        q = self.integer_latents()
        self.latents.values = q.astype(np.float32)
        self.latents.grad = np.zeros_like(self.latents.values)
        for p in self.decoder.params() + self.mlp.params():
            p.values = p.values.astype(np.float32)
            p.grad = np.zeros_like(p.values)
        if self.density is not None:
            self.density.astype(np.float32)
            self.pmf_tables = [
                build_pmf_table(self.density, int(q[:, d].min()), int(q[:, d].max()), precision, dim=d)
                for d in range(self.grid.latent_dim)
            ]
        self.dtype = np.dtype(np.float32)
        self.mode = "eval"


# -- coordinate lookups ----------------------------------------------------


@dataclass
class GridLookup:
    """Corner rows (global, all levels) and blend weights for a coordinate batch."""

    rows: np.ndarray  # (N, L, K) int64
    weights: np.ndarray  # (N, L, K)

    @classmethod
    def build(cls, model: ShaciraModel, x: np.ndarray) -> "GridLookup":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != model.grid.d:
            raise ValueError(f"coordinates must have shape (N, {model.grid.d})")
        if np.any(x < 0) or np.any(x > 1):
            raise ValueError("coordinates must lie in [0, 1]")
        n, L, K = x.shape[0], model.levels, 2**model.grid.d
        rows = np.empty((n, L, K), dtype=np.int64)
        weights = np.empty((n, L, K), dtype=model.dtype)
        for lvl, lay in enumerate(model.layouts):
            r, w = hashgrid.corner_lookup(x, lay)
            rows[:, lvl] = r + model.offsets[lvl]
            weights[:, lvl] = w
        return cls(rows, weights)

    @property
    def size(self) -> int:
        return self.rows.shape[0]


# -- forward / loss / backward ---------------------------------------------


@dataclass
class ForwardContext:
    lookup: GridLookup
    quantized: Quantized
    z: np.ndarray
    features: np.ndarray  # (N, L*F)
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray
    active_levels: int


def _dense(x: np.ndarray, w: np.ndarray, b: np.ndarray, ordered: bool) -> np.ndarray:
    if not ordered:
        return x @ w + b
    # fixed left-to-right accumulation: identical bits on every platform
    out = np.broadcast_to(b, (x.shape[0], w.shape[1])).copy()
    for k in range(w.shape[0]):
        out += x[:, k:k + 1] * w[k]
    return out


def _check_finite(stage: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values after {stage}")


def quantize(model: ShaciraModel, step: int = 0, rng: SeededRng | None = None) -> Quantized:
    """Quantize the proxies for the current mode and anneal step."""
    q = model.latents.values
    if model.mode == "eval":
        return straight_through(q)
    tau = tau_at(model.schedule, step)
    if tau is None:
        return straight_through(q)
    if rng is None:
        raise ValueError("stochastic quantization needs an rng")
    return sample_quantized(q, tau, rng)


def forward(
    model: ShaciraModel,
    x,
    *,
    quantized: Quantized | None = None,
    step: int = 0,
    rng: SeededRng | None = None,
) -> tuple[np.ndarray, ForwardContext]:
    """Predict signal values at coordinates ``x`` (array ``(N, d)`` or :class:`GridLookup`)."""
    lookup = x if isinstance(x, GridLookup) else GridLookup.build(model, x)
    ordered = model.mode == "eval"
    if quantized is None:
        quantized = quantize(model, step, rng)
    dt = model.dtype
    qv = quantized.values.astype(dt, copy=False)
    z = _dense(qv, model.decoder.weight.values, model.decoder.bias.values, ordered)
    _check_finite("latent decoder", z)

    n, L, _ = lookup.rows.shape
    active = min(model.active_levels, L)
    feats = hashgrid.gather_levels(lookup.rows, lookup.weights.astype(dt, copy=False), z, active)
    features = feats.reshape(n, L * model.grid.feature_dim)

    pre1 = _dense(features, model.mlp.w1.values, model.mlp.b1.values, ordered)
    h1 = np.maximum(pre1, 0)
    pre2 = _dense(h1, model.mlp.w2.values, model.mlp.b2.values, ordered)
    h2 = np.maximum(pre2, 0)
    y = _dense(h2, model.mlp.w3.values, model.mlp.b3.values, ordered)
    if not np.all(np.isfinite(y)):
        for stage, arr in (("grid interpolation", features), ("mlp layer 1", pre1), ("mlp layer 2", pre2)):
            _check_finite(stage, arr)
        _check_finite("mlp output", y)
    ctx = ForwardContext(lookup, quantized, z, features, pre1, h1, pre2, h2, active)
    return y, ctx


@dataclass
class LossResult:
    total: float
    mse: float
    rate: float
    lambda_i: float
    dy: np.ndarray = field(repr=False)
    context: ForwardContext | None = field(default=None, repr=False)
    rate_context: object = field(default=None, repr=False)

    def __iter__(self):
        return iter((self.total, self.mse, self.rate))


def loss(
    y_hat: np.ndarray,
    y: np.ndarray,
    model: ShaciraModel,
    noise: np.ndarray | None,
    lambda_i: float,
    context: ForwardContext | None = None,
) -> LossResult:
    """Rate-distortion objective ``MSE + lambda_i * bits_per_row``.

    ``noise`` (uniform on [-1/2, 1/2], same shape as the latents) perturbs the
    proxies for the rate term; pass ``None`` to skip the rate entirely.
    """
    diff = y_hat.astype(np.float64) - np.asarray(y, dtype=np.float64)
    mse = float(np.mean(diff * diff))
    dy = (2.0 / diff.size) * diff
    rate, rctx = 0.0, None
    if noise is not None:
        if model.density is None:
            raise ModelError("model has no density models for the rate term")
        rate, rctx = self_information_loss(model.latents.values, noise, model.density)
    total = mse + lambda_i * rate
    return LossResult(total, mse, rate, lambda_i, dy, context, rctx)


def backward(model: ShaciraModel, result: LossResult, *, density_from_rate: bool = False) -> None:
    """Accumulate gradients of ``result.total`` into every parameter group.

    With ``density_from_rate`` the density models receive the gradient of the
    rate term alone (not scaled by ``lambda_i``), so they keep fitting the
    latent distribution even when the rate is not being penalized.
    """
    ctx = result.context
    if ctx is None:
        raise ModelError("loss result carries no forward context; run forward() first")
    dt = model.dtype
    mlp = model.mlp
    dy = result.dy.astype(dt)

    mlp.w3.grad += ctx.h2.T @ dy
    mlp.b3.grad += dy.sum(axis=0)
    dpre2 = (dy @ mlp.w3.values.T) * (ctx.pre2 > 0)
    mlp.w2.grad += ctx.h1.T @ dpre2
    mlp.b2.grad += dpre2.sum(axis=0)
    dpre1 = (dpre2 @ mlp.w2.values.T) * (ctx.pre1 > 0)
    mlp.w1.grad += ctx.features.T @ dpre1
    mlp.b1.grad += dpre1.sum(axis=0)
    dfeat = dpre1 @ mlp.w1.values.T

    lookup = ctx.lookup
    n, L, _ = lookup.rows.shape
    dfeat = np.ascontiguousarray(dfeat.reshape(n, L, model.grid.feature_dim))
    dz = hashgrid.scatter_levels(lookup.rows, lookup.weights, dfeat, ctx.active_levels, model.total_rows)
    dz = dz.astype(dt)

    q = ctx.quantized.values.astype(dt, copy=False)
    model.decoder.weight.grad += q.T @ dz
    if model.decoder_bias:
        model.decoder.bias.grad += dz.sum(axis=0)
    dq = dz @ model.decoder.weight.values.T
    dlatent = dq * ctx.quantized.dvalues.astype(dt, copy=False)

    if result.rate_context is not None:
        lam = result.lambda_i
        if density_from_rate:
            drate = self_information_backward(result.rate_context, 1.0) * lam
        else:
            drate = self_information_backward(result.rate_context, lam)
        dlatent = dlatent + drate.astype(dt)
    model.latents.grad += dlatent

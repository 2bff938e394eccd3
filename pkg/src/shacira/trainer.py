"""Joint rate-distortion training, metrics and final freezing."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .codec.bitstream import decode_lod_prefix, serialize_model
from .codec.rangecoder import overhead_bound
from .entropy_model import DensityModel
from .hashgrid import GridConfig, pixel_coordinates
from .model import GridLookup, ShaciraModel, backward, forward, loss, quantize
from .numerics import AdamState, NonFiniteGradientError, SeededRng, adam_step
from .quantizer import AnnealSchedule, clamp_latents, tau_at

__all__ = [
    "EvalResult",
    "MetricsTrace",
    "TraceRecord",
    "TrainConfig",
    "TrainingDivergedError",
    "estimated_bytes",
    "estimated_payload_bytes",
    "evaluate",
    "init_params",
    "psnr",
    "reconstruct",
    "sample_batch",
    "train",
]

PSNR_CAP = 100.0


@dataclass
class TrainConfig:
    steps: int = 20000
    lambda_i: float = 1e-4
    lr_mlp: float = 1e-3
    lr_latents: float = 1e-2
    lr_decoder: float = 1e-2
    lr_density: float = 1e-4
    batch: int | None = None  # None trains on the full coordinate grid
    anneal_fraction: float = 0.95
    seed: int = 0
    mlp_width: int = 16
    tau0: float = 1.0
    tau_min: float = 1e-3
    decoder_bias: bool = True
    # density models follow the rate term on its own, independent of lambda_i
    density_from_rate: bool = True
    log_every: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        for name in ("lr_mlp", "lr_latents", "lr_decoder", "lr_density"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lambda_i < 0:
            raise ValueError("lambda_i must be >= 0")
        if self.batch is not None and self.batch < 1:
            raise ValueError("batch must be >= 1 (or None for the full grid)")
        if self.mlp_width < 1:
            raise ValueError("mlp_width must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        np.dtype(self.dtype)

    def learning_rates(self) -> dict[str, float]:
        return {"latents": self.lr_latents, "decoder": self.lr_decoder,
                "mlp": self.lr_mlp, "density": self.lr_density}

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.tau0, self.tau_min, self.anneal_fraction, self.steps)


@dataclass
class TraceRecord:
    step: int
    mse: float
    rate: float
    bpp_estimate: float
    tau: float | None
    seconds: float


@dataclass
class MetricsTrace:
    records: list[TraceRecord] = field(default_factory=list)
    final_rate: float | None = None
    final_mse: float | None = None
    seconds: float = 0.0

    def append(self, record: TraceRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("trace steps must increase")
        self.records.append(record)

    def as_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.records]


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, message: str, trace: MetricsTrace):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step
        self.trace = trace


# -- setup -----------------------------------------------------------------


def init_params(config: TrainConfig, grid: GridConfig, rng: SeededRng, out_channels: int = 3) -> ShaciraModel:
    """Fresh model: small uniform latents, Gaussian decoder, Xavier MLP."""
    dtype = np.dtype(config.dtype)
    model = ShaciraModel(grid, config.mlp_width, out_channels, config.schedule(), dtype=dtype,
                         with_density=False, decoder_bias=config.decoder_bias)
    model.latents.values[...] = rng.uniform("init.latents", -0.01, 0.01, model.latents.shape)
    model.decoder.weight.values[...] = rng.stream("init.decoder").normal(0.0, 0.1, model.decoder.weight.shape)
    for w, _ in model.mlp.layers():
        fan_in, fan_out = w.shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w.values[...] = rng.uniform("init.mlp", -limit, limit, w.shape)
    model.density = DensityModel(grid.latent_dim, rng=rng, dtype=dtype)
    return model


def sample_batch(image: np.ndarray, batch: int | None, rng: SeededRng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coordinates, targets and flat pixel indices for one step.

    Pixels are drawn uniformly without replacement; ``None`` or a batch at
    least as large as the image yields the full grid in row-major order.
    """
    h, w, c = image.shape
    coords = pixel_coordinates(h, w)
    targets = image.reshape(-1, c)
    n = h * w
    if batch is None or batch >= n:
        idx = np.arange(n)
    else:
        idx = np.sort(rng.stream("batch").choice(n, size=batch, replace=False))
    return coords[idx], targets[idx], idx


def estimated_payload_bytes(model: ShaciraModel, rate: float) -> float:
    """Level payload bytes predicted from a bits-per-row rate plus the coder's per-stream slack."""
    slack = sum(overhead_bound(lay.rows * model.grid.latent_dim) for lay in model.layouts)
    return rate * model.total_rows / 8.0 + slack


def estimated_bytes(model: ShaciraModel, rate: float) -> float:
    """Container size predicted from a bits-per-row rate.

    Header, raw float blocks and level headers are counted exactly; the PMF
    tables, whose size is only known after freezing, are not.
    """
    head = 4 + 4 + 19 + 3 + 8
    n_blocks = len(model.decoder.params()) + len(model.mlp.params())
    raw = 4 * model.raw_float_count() + 4 * n_blocks
    return head + raw + 16 * model.levels + estimated_payload_bytes(model, rate)


# -- training --------------------------------------------------------------


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] < 1:
        raise ValueError("image must have shape (H, W, C)")
    if np.any(image < 0) or np.any(image > 1):
        raise ValueError("image values must lie in [0, 1]")
    return image


def train(image: np.ndarray, config: TrainConfig, grid: GridConfig, *,
          progress=None) -> tuple[ShaciraModel, MetricsTrace]:
    """Optimize a model on ``image`` (``H x W x C`` in [0, 1]) and freeze it to integers.

    ``progress`` is called with each logged :class:`TraceRecord`.
    """
    image = _check_image(image)
    h, w, c = image.shape
    rng = SeededRng(config.seed)
    model = init_params(config, grid, rng, out_channels=c)
    model.image_shape = (h, w)
    dtype = model.dtype
    n_pix = h * w
    full = config.batch is None or config.batch >= n_pix

    all_coords = pixel_coordinates(h, w)
    all_targets = image.reshape(-1, c).astype(dtype)
    full_lookup = GridLookup.build(model, all_coords)

    groups = model.param_groups()
    lrs = config.learning_rates()
    states = {p.name: AdamState.for_param(p) for p in model.all_params()}
    trace = MetricsTrace()
    start = time.perf_counter()
    result = None
    for step in range(config.steps):
        if full:
            lookup, targets = full_lookup, all_targets
        else:
            _, _, idx = sample_batch(image, config.batch, rng)
            lookup = GridLookup(full_lookup.rows[idx], full_lookup.weights[idx])
            targets = all_targets[idx]
        try:
            q = quantize(model, step, rng)
            y_hat, ctx = forward(model, lookup, quantized=q)
            noise = rng.uniform("entropy_noise", -0.5, 0.5, model.latents.shape)
            result = loss(y_hat, targets, model, noise, config.lambda_i, ctx)
            if not math.isfinite(result.total):
                raise FloatingPointError("non-finite loss")
            model.zero_grad()
            backward(model, result, density_from_rate=config.density_from_rate)
            for name, params in groups.items():
                for p in params:
                    adam_step(p, states[p.name], lrs[name])
        except (FloatingPointError, NonFiniteGradientError) as err:
            trace.seconds = time.perf_counter() - start
            raise TrainingDivergedError(step, str(err), trace) from err
        clamp_latents(model.latents.values)
        if step % config.log_every == 0 or step == config.steps - 1:
            rec = TraceRecord(step, result.mse, result.rate,
                              8.0 * estimated_bytes(model, result.rate) / n_pix,
                              tau_at(model.schedule, step), time.perf_counter() - start)
            trace.append(rec)
            if progress is not None:
                progress(rec)
    if result is not None:
        trace.final_rate = result.rate
        trace.final_mse = result.mse
    model.freeze()
    trace.seconds = time.perf_counter() - start
    return model, trace


# -- evaluation ------------------------------------------------------------


def psnr(reconstruction: np.ndarray, target: np.ndarray) -> float:
    """PSNR in dB of the [0, 1]-clamped reconstruction, capped at 100 dB."""
    rec = np.clip(np.asarray(reconstruction, dtype=np.float64), 0.0, 1.0)
    mse = float(np.mean((rec - np.asarray(target, dtype=np.float64)) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def reconstruct(model: ShaciraModel, height: int, width: int, lookup: GridLookup | None = None) -> np.ndarray:
    """Eval-mode prediction over the pixel grid, clamped to [0, 1], shape ``(H, W, C)``."""
    if model.mode != "eval":
        raise ValueError("reconstruct needs an eval-mode model")
    if lookup is None:
        lookup = GridLookup.build(model, pixel_coordinates(height, width))
    y, _ = forward(model, lookup)
    return np.clip(y, 0.0, 1.0).reshape(height, width, model.out_channels)


@dataclass
class EvalResult:
    psnr: float
    bpp: float
    nbytes: int
    lod_psnr: list[float]


def evaluate(model: ShaciraModel, image: np.ndarray, with_lod: bool = True) -> EvalResult:
    """PSNR and BPP of the serialized model, plus PSNR of every LOD prefix."""
    image = _check_image(image)
    h, w, _ = image.shape
    data = serialize_model(model)
    lookup = GridLookup.build(model, pixel_coordinates(h, w))
    full = psnr(reconstruct(model, h, w, lookup), image)
    lod = []
    if with_lod:
        for lvl in range(1, model.levels + 1):
            lod.append(psnr(reconstruct(decode_lod_prefix(data, lvl), h, w, lookup), image))
    return EvalResult(full, 8.0 * len(data) / (h * w), len(data), lod)

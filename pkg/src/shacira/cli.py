"""Command line interface: ``shacira {encode,decode,eval,lod,sweep}``.

Reports are printed as ``key=value`` lines. Exit status: 0 success, 1 usage
or configuration error, 2 file I/O error, 3 malformed image or bitstream,
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .codec.bitstream import BitstreamError, decode_lod_prefix, deserialize_model, prefix_length, serialize_model
from .hashgrid import GridConfig, GridConfigError
from .imageio import ImageFormatError, read_image, write_image
from .trainer import TrainConfig, TrainingDivergedError, evaluate, psnr, reconstruct, train

__all__ = ["main", "load_config", "SWEEP_COLUMNS"]

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_DIVERGED = 0, 1, 2, 3, 4
SWEEP_COLUMNS = ("variant", "overrides", "table_size", "psnr_db", "bpp", "seconds", "status")

GRID_KEYS = {f.name for f in dataclasses.fields(GridConfig)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration ---------------------------------------------------------


def _coerce(key: str, raw: str):
    text = raw.strip()
    if key == "batch":
        if text.lower() in ("full", "full-grid", "none"):
            return None
        return int(text)
    if key == "dtype":
        return text
    if key in ("decoder_bias", "density_from_rate"):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if key in ("lambda_i", "anneal_fraction", "tau0", "tau_min") or key.startswith("lr_"):
        return float(text)
    value = int(text, 0)
    return value


def parse_assignments(lines, source: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments, blank lines ignored)."""
    out = {}
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{num}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in GRID_KEYS | TRAIN_KEYS:
            raise UsageError(f"{source}:{num}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as err:
            raise UsageError(f"{source}:{num}: bad value for {key}: {err}") from None
    return out


def load_config(path) -> dict:
    text = Path(path).read_text()
    return parse_assignments(text.splitlines(), str(path))


def build_configs(settings: dict) -> tuple[TrainConfig, GridConfig]:
    grid_kw = {k: v for k, v in settings.items() if k in GRID_KEYS}
    train_kw = {k: v for k, v in settings.items() if k in TRAIN_KEYS}
    try:
        return TrainConfig(**train_kw), GridConfig(**grid_kw)
    except (ValueError, TypeError, GridConfigError) as err:
        raise UsageError(f"invalid configuration: {err}") from None


_FLAG_KEYS = {
    "steps": "steps",
    "lambda_i": "lambda_i",
    "levels": "levels",
    "table_size": "table_size",
    "feature_dim": "feature_dim",
    "latent_dim": "latent_dim",
    "mlp_width": "mlp_width",
    "anneal_fraction": "anneal_fraction",
    "seed": "seed",
}


def _settings_from_args(args) -> dict:
    settings = load_config(args.config) if args.config else {}
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            settings[key] = value
    if "seed" not in settings and os.environ.get("SHACIRA_SEED"):
        try:
            settings["seed"] = int(os.environ["SHACIRA_SEED"], 0)
        except ValueError:
            raise UsageError(f"SHACIRA_SEED is not an integer: {os.environ['SHACIRA_SEED']!r}") from None
    return settings


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.6f}"
    if value is None:
        return "full"
    return str(value)


def _report(out, **pairs) -> None:
    for key, value in pairs.items():
        out.write(f"{key}={_fmt(value)}\n")


def _report_config(out, cfg: TrainConfig, grid: GridConfig) -> None:
    _report(out, **{f"grid.{k}": v for k, v in dataclasses.asdict(grid).items()})
    _report(out, **{f"train.{k}": v for k, v in dataclasses.asdict(cfg).items()})


# -- commands --------------------------------------------------------------


def cmd_encode(args, out) -> int:
    settings = _settings_from_args(args)
    cfg, grid = build_configs(settings)
    image = read_image(args.input)
    _report_config(out, cfg, grid)
    start = time.perf_counter()
    model, trace = train(image, cfg, grid)
    data = serialize_model(model)
    seconds = time.perf_counter() - start
    Path(args.out).write_bytes(data)
    result = evaluate(model, image, with_lod=False)
    _report(out, psnr_db=result.psnr, bpp=result.bpp, bytes=len(data),
            final_rate=trace.final_rate if trace.final_rate is not None else 0.0, seconds=seconds)
    return EXIT_OK


def _load_stream(path, lod):
    data = Path(path).read_bytes()
    if lod is None:
        return deserialize_model(data), data
    return decode_lod_prefix(data, lod), data


def _shape(model):
    if model.image_shape is None:
        raise BitstreamError("bitstream does not record the image size")
    return model.image_shape


def cmd_decode(args, out) -> int:
    model, _ = _load_stream(args.bitstream, args.lod)
    h, w = _shape(model)
    write_image(args.out, reconstruct(model, h, w))
    _report(out, height=h, width=w, levels=model.active_levels)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    model, data = _load_stream(args.bitstream, None)
    image = read_image(args.reference)
    if image.shape[:2] != _shape(model):
        raise UsageError(f"reference is {image.shape[1]}x{image.shape[0]}, stream encodes "
                         f"{model.image_shape[1]}x{model.image_shape[0]}")
    result = evaluate(model, image)
    _report(out, psnr_db=result.psnr, bpp=result.bpp, bytes=len(data))
    for lvl, value in enumerate(result.lod_psnr, 1):
        _report(out, **{f"lod_psnr_{lvl}": value})
    return EXIT_OK


def cmd_lod(args, out) -> int:
    data = Path(args.bitstream).read_bytes()
    full = deserialize_model(data)
    h, w = _shape(full)
    image = read_image(args.reference) if args.reference else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for lvl in range(1, full.levels + 1):
        recon = reconstruct(decode_lod_prefix(data, lvl), h, w)
        write_image(out_dir / f"lod_{lvl:02d}.ppm", recon)
        _report(out, **{f"lod_bytes_{lvl}": prefix_length(data, lvl)})
        if image is not None:
            _report(out, **{f"lod_psnr_{lvl}": psnr(recon, image)})
    return EXIT_OK


def _parse_variant(text: str) -> dict:
    return parse_assignments(text.split(","), "variant")


def _run_variant(image, settings: dict, no_timing: bool) -> tuple:
    """One sweep row without the leading variant columns; failures become a status."""
    start = time.perf_counter()
    try:
        cfg, grid = build_configs(settings)
        model, _ = train(image, cfg, grid)
        result = evaluate(model, image, with_lod=False)
        seconds = 0.0 if no_timing else time.perf_counter() - start
        return (grid.table_size, f"{result.psnr:.6f}", f"{result.bpp:.6f}", f"{seconds:.3f}", "ok")
    except (UsageError, TrainingDivergedError, FloatingPointError, ValueError) as err:
        seconds = 0.0 if no_timing else time.perf_counter() - start
        reason = str(err).replace("\n", " ")
        return (settings.get("table_size", ""), "", "", f"{seconds:.3f}", f"error: {reason}")


def cmd_sweep(args, out) -> int:
    base = _settings_from_args(args)
    specs = list(args.variant or [])
    specs += [f"table_size={t.strip()}" for t in (args.table_sizes.split(",") if args.table_sizes else [])]
    if not specs:
        raise UsageError("sweep needs at least one --variant or --table-sizes entry")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    variants = [_parse_variant(v) for v in specs]
    image = read_image(args.input)
    settings = [{**base, **override} for override in variants]
    if args.jobs == 1:
        rows = [_run_variant(image, s, args.no_timing) for s in settings]
    else:
        # variants are independent jobs; each worker process trains one model at a time
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_variant, [image] * len(settings), settings,
                                 [args.no_timing] * len(settings)))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for i, (text, row) in enumerate(zip(specs, rows)):
        writer.writerow((i, text) + row)
        _report(out, **{f"variant_{i}": row[-1]})
    Path(args.out).write_text(buf.getvalue())
    return EXIT_OK


# -- argument parsing ------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda-i", dest="lambda_i", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--table-size", dest="table_size", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--mlp-width", dest="mlp_width", type=int)
    p.add_argument("--anneal-fraction", dest="anneal_fraction", type=float)
    p.add_argument("--seed", type=int, help="RNG seed (default: $SHACIRA_SEED, then 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shacira", description="Compressed hash-grid image codec.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="train on an image and write a bitstream")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    _add_train_flags(p)

    p = sub.add_parser("decode", help="reconstruct an image from a bitstream")
    p.add_argument("bitstream")
    p.add_argument("--out", required=True)
    p.add_argument("--lod", type=int, help="decode only levels 1..LOD")

    p = sub.add_parser("eval", help="PSNR/BPP of a bitstream against a reference image")
    p.add_argument("bitstream")
    p.add_argument("--reference", required=True)

    p = sub.add_parser("lod", help="write the reconstruction of every level prefix")
    p.add_argument("bitstream")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--reference")

    p = sub.add_parser("sweep", help="rate-distortion sweep over grid variants (CSV)")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", action="append", help="comma-separated key=value overrides; repeatable")
    p.add_argument("--table-sizes", dest="table_sizes", help="comma-separated table sizes, one variant each")
    p.add_argument("--no-timing", action="store_true", help="write 0 seconds so reruns are byte-identical")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (variants run sequentially by default)")
    _add_train_flags(p)
    return parser


COMMANDS = {"encode": cmd_encode, "decode": cmd_decode, "eval": cmd_eval, "lod": cmd_lod, "sweep": cmd_sweep}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as err:
        print(f"shacira: {err}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as err:
        print(f"shacira: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (BitstreamError, ImageFormatError) as err:
        print(f"shacira: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as err:
        print(f"shacira: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        # e.g. --lod outside [1, L]
        print(f"shacira: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

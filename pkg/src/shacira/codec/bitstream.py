"""Versioned container for a frozen model.

Layout (all integers little-endian, floats IEEE-754 binary32)::

    magic        4s   b"SHCR"
    version      u16  1
    flags        u16  bit 0: density-model parameters present
    grid         u8 d, u16 levels, u32 r_min, u32 r_max, u32 table_size,
                 u16 feature_dim, u16 latent_dim
    network      u16 mlp_width, u8 out_channels
    image        u32 height, u32 width          (0, 0 when unknown)
    raw blocks   u32 count + count * f32, in the order
                 decoder.weight, decoder.bias, w1, b1, w2, b2, w3, b3
                 [, density parameters when flag bit 0 is set]
    pmf tables   per latent dim: i32 q_min, i32 q_max, u8 precision,
                 (q_max - q_min + 1) * u16 (frequency - 1)
    levels       per level, coarsest first: u32 byte_len, i32 q_min,
                 i32 q_max, u32 rows, byte_len bytes of range-coded payload

Each level payload is an independent range-coder stream holding the level's
integer latents dim-major (all rows of dim 0, then dim 1, ...), so any prefix
ending at a level boundary decodes on its own. ``docs/bitstream.md`` has the
full description.
"""

from __future__ import annotations

import struct

import numpy as np

from ..entropy_model import PmfTable
from ..hashgrid import GridConfig, GridConfigError
from ..model import ShaciraModel
from .rangecoder import RangeCoderError, RangeDecoder, RangeEncoder

__all__ = [
    "MAGIC",
    "VERSION",
    "BitstreamError",
    "CorruptPayloadError",
    "FormatError",
    "MagicError",
    "TrailingDataError",
    "TruncatedError",
    "UnsupportedVersionError",
    "decode_lod_prefix",
    "deserialize_model",
    "level_offsets",
    "level_payload_sizes",
    "prefix_length",
    "serialize_model",
]

MAGIC = b"SHCR"
VERSION = 1
FLAG_DENSITY = 1

_GRID = struct.Struct("<BHIIIHH")
_NET = struct.Struct("<HB")
_IMAGE = struct.Struct("<II")
_TABLE = struct.Struct("<iiB")
_LEVEL = struct.Struct("<IiiI")


class BitstreamError(ValueError):
    pass


class MagicError(BitstreamError):
    pass


class UnsupportedVersionError(BitstreamError):
    def __init__(self, version: int):
        super().__init__(f"unsupported bitstream version {version} (this decoder reads {VERSION})")
        self.version = version


class TruncatedError(BitstreamError):
    pass


class TrailingDataError(BitstreamError):
    pass


class FormatError(BitstreamError):
    pass


class CorruptPayloadError(BitstreamError):
    def __init__(self, level: int, cause: Exception):
        super().__init__(f"level {level} payload is corrupt: {cause}")
        self.level = level


# -- writing ---------------------------------------------------------------


def _raw_blocks(model: ShaciraModel, with_density: bool) -> list[np.ndarray]:
    blocks = [p.values for p in model.decoder.params() + model.mlp.params()]
    if with_density:
        blocks.append(model.density.flat_values())
    return blocks


def serialize_model(model: ShaciraModel, include_density: bool = False) -> bytes:
    """Encode a frozen model; identical models give identical bytes.

    Density-model parameters are only needed to resume training, not to
    decode, and are left out unless ``include_density`` is set.
    """
    if model.pmf_tables is None:
        raise ValueError("model has no coder tables; call freeze() first")
    q = model.latents.values
    if not np.array_equal(q, np.rint(q)):
        raise ValueError("latents must be integers before serialization")
    with_density = include_density and model.density is not None
    g = model.grid
    h, w = model.image_shape or (0, 0)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HH", VERSION, FLAG_DENSITY if with_density else 0)
    out += _GRID.pack(g.d, g.levels, g.r_min, g.r_max, g.table_size, g.feature_dim, g.latent_dim)
    out += _NET.pack(model.mlp_width, model.out_channels)
    out += _IMAGE.pack(h, w)
    for block in _raw_blocks(model, with_density):
        flat = np.asarray(block, dtype="<f4").reshape(-1)
        out += struct.pack("<I", flat.size)
        out += flat.tobytes()
    for t in model.pmf_tables:
        out += _TABLE.pack(t.q_min, t.q_max, t.precision)
        out += (t.freqs - 1).astype("<u2").tobytes()
    qi = q.astype(np.int64)
    for lvl in range(g.levels):
        rows = qi[model.level_slice(lvl)]
        enc = RangeEncoder()
        for dim, table in enumerate(model.pmf_tables):
            enc.encode(rows[:, dim], table)
        payload = enc.finish()
        out += _LEVEL.pack(len(payload), int(rows.min()), int(rows.max()), rows.shape[0])
        out += payload
    return bytes(out)


# -- reading ---------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(bytes(data))
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"stream ends inside {what} (need {n} bytes at offset {self.pos}, "
                                 f"have {len(self.data) - self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct, what: str) -> tuple:
        return st.unpack(self.take(st.size, what))

    def floats(self, expected: int, what: str) -> np.ndarray:
        (count,) = self.unpack(struct.Struct("<I"), f"{what} count")
        if count != expected:
            raise FormatError(f"{what}: declared {count} floats, expected {expected}")
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)


def _read_head(r: _Reader) -> ShaciraModel:
    magic = bytes(r.take(4, "magic"))
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, flags = r.unpack(struct.Struct("<HH"), "version")
    if version != VERSION:
        raise UnsupportedVersionError(version)
    if flags & ~FLAG_DENSITY:
        raise FormatError(f"unknown flag bits 0x{flags:04x}")
    d, levels, r_min, r_max, table_size, f_dim, l_dim = r.unpack(_GRID, "grid block")
    width, out_ch = r.unpack(_NET, "network block")
    h, w = r.unpack(_IMAGE, "image block")
    try:
        grid = GridConfig(d, levels, r_min, r_max, table_size, f_dim, l_dim)
    except GridConfigError as err:
        raise FormatError(f"invalid grid block: {err}") from None
    if width < 1 or out_ch < 1:
        raise FormatError("network block declares an empty layer")
    model = ShaciraModel(grid, width, out_ch, dtype=np.float32, with_density=bool(flags & FLAG_DENSITY))
    for p in model.decoder.params() + model.mlp.params():
        p.values = r.floats(p.values.size, p.name).reshape(p.shape)
        p.grad = np.zeros_like(p.values)
    if model.density is not None:
        model.density.load_flat(r.floats(model.density.param_count, "density parameters"))
    tables = []
    for dim in range(l_dim):
        q_min, q_max, precision = r.unpack(_TABLE, f"pmf table {dim}")
        if q_max < q_min or not 1 <= precision <= 16 or q_max - q_min + 1 > 1 << precision:
            raise FormatError(f"pmf table {dim}: bad range [{q_min}, {q_max}] or precision {precision}")
        n = q_max - q_min + 1
        freqs = np.frombuffer(r.take(2 * n, f"pmf table {dim}"), dtype="<u2").astype(np.int64) + 1
        try:
            tables.append(PmfTable(q_min, q_max, freqs, precision))
        except ValueError as err:
            raise FormatError(f"pmf table {dim}: {err}") from None
    model.pmf_tables = tables
    model.image_shape = (h, w) if h and w else None
    model.mode = "eval"
    return model


def _read_level(r: _Reader, model: ShaciraModel, lvl: int) -> None:
    byte_len, q_min, q_max, rows = r.unpack(_LEVEL, f"level {lvl} header")
    expected_rows = model.layouts[lvl].rows
    if rows != expected_rows:
        raise FormatError(f"level {lvl}: declares {rows} rows, grid has {expected_rows}")
    payload = bytes(r.take(byte_len, f"level {lvl} payload"))
    dec = RangeDecoder(payload)
    block = np.empty((rows, model.grid.latent_dim), dtype=np.int64)
    try:
        for dim, table in enumerate(model.pmf_tables):
            block[:, dim] = dec.decode(rows, table)
        dec.finish()
    except RangeCoderError as err:
        raise CorruptPayloadError(lvl, err) from None
    if int(block.min()) != q_min or int(block.max()) != q_max:
        raise CorruptPayloadError(lvl, ValueError("decoded symbol range disagrees with level header"))
    model.latents.values[model.level_slice(lvl)] = block.astype(np.float32)


def deserialize_model(data: bytes) -> ShaciraModel:
    """Rebuild an eval-mode model; the stream must be complete with no trailing bytes."""
    r = _Reader(data)
    model = _read_head(r)
    for lvl in range(model.levels):
        _read_level(r, model, lvl)
    if r.pos != len(r.data):
        raise TrailingDataError(f"{len(r.data) - r.pos} bytes after the last level")
    return model


def decode_lod_prefix(data: bytes, level: int) -> ShaciraModel:
    """Decode levels ``1..level`` (1-based) only; finer levels are masked to zero.

    Bytes past the end of level ``level`` are ignored, so a physically
    truncated file decodes as long as it holds that prefix.
    """
    r = _Reader(data)
    model = _read_head(r)
    if not 1 <= level <= model.levels:
        raise ValueError(f"level must lie in [1, {model.levels}], got {level}")
    for lvl in range(level):
        _read_level(r, model, lvl)
    model.active_levels = level
    return model


def _walk_levels(data: bytes) -> list[tuple[int, int]]:
    r = _Reader(data)
    model = _read_head(r)
    out = []
    for lvl in range(model.levels):
        byte_len = r.unpack(_LEVEL, f"level {lvl} header")[0]
        r.take(byte_len, f"level {lvl} payload")
        out.append((byte_len, r.pos))
    return out


def level_offsets(data: bytes) -> list[int]:
    """Byte offset of the end of each level payload (without decoding it)."""
    return [end for _, end in _walk_levels(data)]


def level_payload_sizes(data: bytes) -> list[int]:
    """Range-coded payload length of each level, headers excluded."""
    return [size for size, _ in _walk_levels(data)]


def prefix_length(data: bytes, level: int) -> int:
    """Number of leading bytes needed to decode levels ``1..level``."""
    ends = level_offsets(data)
    if not 1 <= level <= len(ends):
        raise ValueError(f"level must lie in [1, {len(ends)}], got {level}")
    return ends[level - 1]

"""Dense fields, paired datasets and their on-disk formats.

A :class:`Field` stores its values channel-major, ``data[c, row, col]``, as
float64. A :class:`Dataset` keeps the paired inputs/outputs stacked as
``(N, C, H, W)`` arrays.

FRDS v1 layout (little-endian)::

    b"FRDS" | u32 version=1 | u32 N | u32 H | u32 W | u32 C_in
           | u32 H_out | u32 W_out | u32 C_out | u64 seed
    N input blocks (C_in*H*W f64 each), then N output blocks
    optional trailer: b"NAME" | u32 len | UTF-8 JSON {"in": [...], "out": [...]}
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, FormatError, InvalidArgument, ShapeMismatch, TruncatedPayload

FRDS_MAGIC = b"FRDS"
FRDS_VERSION = 1
_HEADER = struct.Struct("<4s8IQ")
_TRAILER_MAGIC = b"NAME"


@dataclass
class Field:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgument(f"field data must be (C, H, W) with positive dims, got {data.shape}")
        self.data = data

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def rows(self):
        return self.data.shape[1]

    @property
    def cols(self):
        return self.data.shape[2]

    @property
    def shape(self):
        """(rows, cols, channels)."""
        return self.rows, self.cols, self.channels

    def channel(self, c):
        return Field(self.data[c : c + 1].copy())

    def split_channels(self):
        return [self.channel(c) for c in range(self.channels)]

    @classmethod
    def stack_channels(cls, fields):
        return cls(np.concatenate([f.data for f in fields], axis=0))

    def is_finite(self):
        return bool(np.all(np.isfinite(self.data)))

    def __eq__(self, other):
        if not isinstance(other, Field):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)


def field_new(rows, cols, channels, fill=0.0):
    if min(rows, cols, channels) < 1:
        raise InvalidArgument(f"field dims must be >= 1, got {(rows, cols, channels)}")
    return Field(np.full((channels, rows, cols), float(fill)))


@dataclass
class Dataset:
    """Paired fields. ``x`` is ``(N, C_in, H, W)``, ``y`` is ``(N, C_out, H_out, W_out)``."""

    x: np.ndarray
    y: np.ndarray
    names_in: list = field(default_factory=list)
    names_out: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if self.x.ndim != 4 or self.y.ndim != 4:
            raise ShapeMismatch("dataset arrays must be 4-D (N, C, H, W)")
        if self.x.shape[0] != self.y.shape[0] or self.x.shape[0] < 1:
            raise ShapeMismatch(f"input/output counts differ or are empty: {self.x.shape[0]} vs {self.y.shape[0]}")
        if min(self.x.shape[1:]) < 1 or min(self.y.shape[1:]) < 1:
            raise ShapeMismatch("dataset field dims must be positive")
        if not self.names_in:
            self.names_in = [f"in{c}" for c in range(self.x.shape[1])]
        if not self.names_out:
            self.names_out = [f"out{c}" for c in range(self.y.shape[1])]
        self.names_in = [str(n) for n in self.names_in]
        self.names_out = [str(n) for n in self.names_out]
        if len(self.names_in) != self.x.shape[1] or len(self.names_out) != self.y.shape[1]:
            raise ShapeMismatch("channel names do not match channel counts")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidArgument("seed must fit in u64")
        self.seed = int(self.seed)

    def __len__(self):
        return self.x.shape[0]

    @property
    def inputs(self):
        return [Field(a) for a in self.x]

    @property
    def outputs(self):
        return [Field(a) for a in self.y]

    @classmethod
    def from_fields(cls, inputs, outputs, names_in=(), names_out=(), seed=0):
        shapes_in = {f.data.shape for f in inputs}
        shapes_out = {f.data.shape for f in outputs}
        if len(shapes_in) > 1 or len(shapes_out) > 1:
            raise ShapeMismatch("all inputs (and all outputs) must share one shape")
        return cls(
            np.stack([f.data for f in inputs]),
            np.stack([f.data for f in outputs]),
            list(names_in),
            list(names_out),
            seed,
        )

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx], self.names_in, self.names_out, self.seed)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.x.shape == other.x.shape
            and self.y.shape == other.y.shape
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and self.names_in == other.names_in
            and self.names_out == other.names_out
            and self.seed == other.seed
        )


def dataset_to_bytes(ds):
    n, cin, h, w = ds.x.shape
    _, cout, ho, wo = ds.y.shape
    header = _HEADER.pack(FRDS_MAGIC, FRDS_VERSION, n, h, w, cin, ho, wo, cout, ds.seed)
    names = json.dumps({"in": ds.names_in, "out": ds.names_out}).encode("utf-8")
    return b"".join(
        [
            header,
            ds.x.astype("<f8").tobytes(),
            ds.y.astype("<f8").tobytes(),
            _TRAILER_MAGIC,
            struct.pack("<I", len(names)),
            names,
        ]
    )


def dataset_from_bytes(buf):
    if len(buf) < 4 or buf[:4] != FRDS_MAGIC:
        raise BadMagic(f"not an FRDS file (magic {bytes(buf[:4])!r})")
    if len(buf) < _HEADER.size:
        raise TruncatedPayload("FRDS header truncated")
    _, version, n, h, w, cin, ho, wo, cout, seed = _HEADER.unpack_from(buf, 0)
    if version != FRDS_VERSION:
        raise BadMagic(f"unsupported FRDS version {version}")
    if min(n, h, w, cin, ho, wo, cout) < 1:
        raise ShapeMismatch(f"FRDS header has a zero dimension: N={n} in={h}x{w}x{cin} out={ho}x{wo}x{cout}")
    nx = n * cin * h * w
    ny = n * cout * ho * wo
    end = _HEADER.size + 8 * (nx + ny)
    if len(buf) < end:
        raise TruncatedPayload(f"FRDS payload truncated: need {end} bytes, have {len(buf)}")
    x = np.frombuffer(buf, "<f8", nx, _HEADER.size).astype(np.float64).reshape(n, cin, h, w)
    y = np.frombuffer(buf, "<f8", ny, _HEADER.size + 8 * nx).astype(np.float64).reshape(n, cout, ho, wo)
    names_in, names_out = [], []
    rest = buf[end:]
    if rest:
        if rest[:4] != _TRAILER_MAGIC or len(rest) < 8:
            raise ShapeMismatch("unrecognised bytes after FRDS payload")
        (ln,) = struct.unpack_from("<I", rest, 4)
        if len(rest) != 8 + ln:
            raise TruncatedPayload("FRDS name trailer truncated")
        names = json.loads(bytes(rest[8:]).decode("utf-8"))
        names_in, names_out = names["in"], names["out"]
    return Dataset(x, y, names_in, names_out, seed)


def dataset_write(ds, path):
    Path(path).write_bytes(dataset_to_bytes(ds))


def dataset_read(path):
    return dataset_from_bytes(Path(path).read_bytes())


def _channel_grid(f, channel):
    data = f.data if isinstance(f, Field) else np.asarray(f, dtype=np.float64)
    if data.ndim == 3:
        data = data[channel]
    if data.ndim != 2:
        raise InvalidArgument("expected a Field or a 2-D grid")
    return data


def write_csv(f, path, channel=0):
    """One channel as H lines of W comma-separated values (round-trip exact repr)."""
    grid = _channel_grid(f, channel)
    lines = [",".join(repr(float(v)) for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path):
    rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    try:
        grid = np.array([[float(v) for v in line.split(",")] for line in rows])
    except ValueError as exc:
        raise FormatError(f"{path}: not a numeric CSV grid ({exc})") from exc
    if grid.ndim != 2 or grid.size == 0:
        raise FormatError(f"{path}: rows have unequal lengths or the file is empty")
    return Field(grid[None])


def write_ppm(f, path, channel=0):
    """Grayscale P5 heatmap, min-max scaled to 0..255."""
    grid = _channel_grid(f, channel)
    lo, hi = float(grid.min()), float(grid.max())
    scaled = np.zeros_like(grid) if hi <= lo else (grid - lo) / (hi - lo)
    pixels = np.rint(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())

"""FRM1 checkpoint container.

Layout, little-endian::

    b"FRM1" | u32 version | u32 spec_len | spec JSON
    u64 n_params | f64 * n_params
    u64 n_stats  | f64 * n_stats
    u32 meta_len | meta JSON
    u64 n_extra  | f64 * n_extra

``meta`` is free-form JSON; its ``"arrays"`` entry lists ``[name, shape]``
pairs that slice the extra payload back into named arrays.
"""

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagic, CheckpointMismatch, TruncatedPayload
from .network import ParameterSet, _layout, build_network
from .spec import NetworkSpec

FRM1_MAGIC = b"FRM1"
FRM1_VERSION = 1


def first_divergence(stored, expected):
    """Human-readable location of the first difference between two specs, or None."""
    if tuple(stored.in_shape) != tuple(expected.in_shape):
        return f"input schema {stored.in_shape} != {expected.in_shape}"
    for i, (a, b) in enumerate(zip(stored.layers, expected.layers)):
        if a != b:
            return f"layer {i} ({a.kind}): stored {a} != expected {b}"
    if len(stored.layers) != len(expected.layers):
        i = min(len(stored.layers), len(expected.layers))
        return f"layer {i}: stored has {len(stored.layers)} layers, expected {len(expected.layers)}"
    return None


def checkpoint_to_bytes(spec, params, meta=None, arrays=None):
    meta = dict(meta or {})
    arrays = arrays or {}
    meta["arrays"] = [[name, list(np.shape(a))] for name, a in arrays.items()]
    extra = (
        np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays.values()])
        if arrays
        else np.zeros(0)
    )
    spec_b = spec.to_json().encode("utf-8")
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    return b"".join(
        [
            FRM1_MAGIC,
            struct.pack("<II", FRM1_VERSION, len(spec_b)),
            spec_b,
            struct.pack("<Q", params.values.size),
            params.values.astype("<f8").tobytes(),
            struct.pack("<Q", params.stats.size),
            params.stats.astype("<f8").tobytes(),
            struct.pack("<I", len(meta_b)),
            meta_b,
            struct.pack("<Q", extra.size),
            extra.astype("<f8").tobytes(),
        ]
    )


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(f"FRM1 truncated in {what}: need {self.pos + n} bytes, have {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def floats(self, what):
        (n,) = self.unpack("<Q", what)
        return np.frombuffer(self.take(8 * n, what), "<f8").astype(np.float64)


def checkpoint_from_bytes(buf, expected_spec=None):
    """Returns ``(spec, params, meta, arrays)``.

    With ``expected_spec`` the stored spec must match it exactly; otherwise
    CheckpointMismatch names the first divergent layer.
    """
    if len(buf) < 4 or buf[:4] != FRM1_MAGIC:
        raise BadMagic(f"not an FRM1 checkpoint (magic {bytes(buf[:4])!r})")
    r = _Reader(buf)
    r.take(4, "magic")
    version, spec_len = r.unpack("<II", "header")
    if version != FRM1_VERSION:
        raise BadMagic(f"unsupported FRM1 version {version}")
    spec = NetworkSpec.from_json(bytes(r.take(spec_len, "spec")).decode("utf-8"))
    values = r.floats("parameters")
    stats = r.floats("running statistics")
    (meta_len,) = r.unpack("<I", "metadata")
    meta = json.loads(bytes(r.take(meta_len, "metadata")).decode("utf-8"))
    extra = r.floats("extra arrays")
    if r.pos != len(buf):
        raise CheckpointMismatch(f"{len(buf) - r.pos} unexpected bytes after FRM1 payload")
    if expected_spec is not None:
        where = first_divergence(spec, expected_spec)
        if where is not None:
            raise CheckpointMismatch(f"checkpoint does not match network: {where}")
    net = build_network(spec)
    blocks, n = _layout(net.param_shapes)
    stat_blocks, ns = _layout(net.stat_shapes)
    if values.size != n or stats.size != ns:
        raise CheckpointMismatch(
            f"payload sizes ({values.size} params, {stats.size} stats) do not match spec ({n}, {ns})"
        )
    arrays, off = {}, 0
    for name, shape in meta.get("arrays", []):
        size = int(np.prod(shape))
        if off + size > extra.size:
            raise CheckpointMismatch(f"extra array {name!r} overruns the payload")
        arrays[name] = extra[off : off + size].reshape(shape).copy()
        off += size
    if off != extra.size:
        raise CheckpointMismatch("extra payload size disagrees with its array table")
    return spec, ParameterSet(values, blocks, stats, stat_blocks), meta, arrays


def checkpoint_write(spec, params, path, meta=None, arrays=None):
    Path(path).write_bytes(checkpoint_to_bytes(spec, params, meta, arrays))


def checkpoint_read(path, expected_spec=None):
    return checkpoint_from_bytes(Path(path).read_bytes(), expected_spec)

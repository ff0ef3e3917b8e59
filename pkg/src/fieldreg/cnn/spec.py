"""Declarative network description and shape bookkeeping.

A :class:`NetworkSpec` is an input schema ``(H, W, C)`` plus an ordered list
of layers. Shapes are checked once, at build time; a spec that validates can
never fail a shape check while running.
"""

import json
from dataclasses import asdict, dataclass

from ..errors import InvalidArgument


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    relu_eps: float = 0.0

    def out_hw(self, h, w):
        """Output resolution, floor division."""
        return (
            (h - self.kernel_h + 2 * self.padding) // self.stride + 1,
            (w - self.kernel_w + 2 * self.padding) // self.stride + 1,
        )

    def check(self):
        if min(self.kernel_h, self.kernel_w, self.in_channels, self.out_channels, self.stride) < 1:
            raise InvalidArgument(f"conv sizes must be positive: {self}")
        if self.padding < 0:
            raise InvalidArgument(f"padding must be >= 0: {self}")


@dataclass(frozen=True)
class Conv:
    """Conv -> ReLU -> BN, or a bare convolution when ``linear``."""

    conv: ConvSpec
    linear: bool = False

    kind = "conv"


@dataclass(frozen=True)
class Stem:
    """First feature extractor; ``separate`` gives each input channel its own kernels."""

    conv: ConvSpec
    mode: str = "joint"

    kind = "stem"


@dataclass(frozen=True)
class DenseBlock:
    depth: int
    growth: int
    kernel: int = 3
    relu_eps: float = 0.0

    kind = "dense"

    def layer_in_channels(self, k0, layer):
        """Input channels seen by the 1-based ``layer`` inside the block."""
        return k0 + self.growth * (layer - 1)

    def out_channels(self, k0):
        return k0 + self.growth * self.depth

    def inner(self, k0, layer):
        return ConvSpec(
            self.kernel, self.kernel, self.layer_in_channels(k0, layer), self.growth, 1, self.kernel // 2, self.relu_eps
        )


@dataclass(frozen=True)
class BicubicResize:
    target_h: int
    target_w: int

    kind = "resize"


LAYER_TYPES = {cls.kind: cls for cls in (Conv, Stem, DenseBlock, BicubicResize)}


@dataclass(frozen=True)
class NetworkSpec:
    in_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(v) for v in self.in_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def shapes(self):
        return layer_shapes(self)

    @property
    def out_shape(self):
        return self.shapes()[-1]

    def n_convs(self):
        n = 0
        for layer in self.layers:
            if isinstance(layer, DenseBlock):
                n += layer.depth
            elif isinstance(layer, (Conv, Stem)):
                n += 1
        return n

    def to_dict(self):
        layers = []
        for layer in self.layers:
            d = asdict(layer)
            d["type"] = layer.kind
            layers.append(d)
        return {"in_shape": list(self.in_shape), "layers": layers}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        layers = []
        for raw in d["layers"]:
            raw = dict(raw)
            kind = raw.pop("type")
            if kind not in LAYER_TYPES:
                raise InvalidArgument(f"unknown layer type {kind!r}")
            if "conv" in raw:
                raw["conv"] = ConvSpec(**raw["conv"])
            layers.append(LAYER_TYPES[kind](**raw))
        return cls(tuple(d["in_shape"]), tuple(layers))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def layer_shapes(spec):
    """(H, W, C) before the first layer and after every layer.

    Raises InvalidArgument on any channel or resolution inconsistency.
    """
    h, w, c = spec.in_shape
    if min(h, w, c) < 1:
        raise InvalidArgument(f"input shape must be positive, got {spec.in_shape}")
    shapes = [(h, w, c)]
    for idx, layer in enumerate(spec.layers):
        where = f"layer {idx} ({layer.kind})"
        if isinstance(layer, (Conv, Stem)):
            cs = layer.conv
            cs.check()
            if cs.in_channels != c:
                raise InvalidArgument(f"{where}: expects {cs.in_channels} channels, gets {c}")
            if isinstance(layer, Stem):
                if layer.mode not in ("joint", "separate"):
                    raise InvalidArgument(f"{where}: stem mode must be joint or separate")
                if layer.mode == "separate" and cs.out_channels % c:
                    raise InvalidArgument(f"{where}: {cs.out_channels} outputs do not split over {c} stems")
            h, w = cs.out_hw(h, w)
            c = cs.out_channels
        elif isinstance(layer, DenseBlock):
            if layer.depth < 0 or layer.growth < 1 or layer.kernel < 1:
                raise InvalidArgument(f"{where}: invalid dense block {layer}")
            if layer.kernel % 2 == 0:
                raise InvalidArgument(f"{where}: dense block kernels must be odd to preserve resolution")
            c = layer.out_channels(c)
        elif isinstance(layer, BicubicResize):
            if min(layer.target_h, layer.target_w) < 1:
                raise InvalidArgument(f"{where}: resize targets must be >= 1")
            h, w = layer.target_h, layer.target_w
        else:
            raise InvalidArgument(f"{where}: unsupported layer {layer!r}")
        if h < 1 or w < 1:
            raise InvalidArgument(f"{where}: output resolution {h}x{w} is not positive")
        shapes.append((h, w, c))
    return shapes

"""Encoder-decoder presets.

FR21/FR25 follow the 64 -> 31 -> 17 encoder chain (strided 3x3 convs with
padding 0 then 2) and decode with bicubic resize + conv. FR9 is a small
variant for 16x16 desk-scale runs.

Layer counts:
  FR21: stem 1 + blocks 4/6/4 + downsampler 1 + 1x1 compressions 2
        + two resize-conv pairs 2 + output 1 = 21
  FR25: FR21 plus a depth-4 block (72 -> 144 feature maps) before the output conv.
"""

from ..errors import InvalidArgument
from .spec import BicubicResize, Conv, ConvSpec, DenseBlock, NetworkSpec, Stem


def _stem_channels(c_in):
    return 48 if c_in == 1 else 32 * c_in


def _encoder_decoder(in_shape, out_channels, stem_mode, growth, final_block):
    h, w, c = in_shape
    s = _stem_channels(c) if stem_mode == "joint" else 32 * c
    stem = ConvSpec(3, 3, c, s, 2, 0)
    h1, w1 = stem.out_hw(h, w)
    layers = [Stem(stem, stem_mode)]
    b1 = DenseBlock(4, growth)
    c1 = b1.out_channels(s)
    layers.append(b1)
    down = ConvSpec(3, 3, c1, c1 // 2, 2, 2)
    layers.append(Conv(down))
    b2 = DenseBlock(6, growth)
    c2 = b2.out_channels(c1 // 2)
    layers += [b2, Conv(ConvSpec(1, 1, c2, c2 // 2))]
    layers += [BicubicResize(h1, w1), Conv(ConvSpec(3, 3, c2 // 2, c2 // 2, 1, 1))]
    b3 = DenseBlock(4, growth)
    c3 = b3.out_channels(c2 // 2)
    layers += [b3, Conv(ConvSpec(1, 1, c3, c3 // 2))]
    layers.append(BicubicResize(h, w))
    if final_block is None:
        c_up = c3 // 4
        layers.append(Conv(ConvSpec(3, 3, c3 // 2, c_up, 1, 1)))
        c_last = c_up
    else:
        c_pre, depth, g = final_block
        layers += [Conv(ConvSpec(3, 3, c3 // 2, c_pre, 1, 1)), DenseBlock(depth, g)]
        c_last = c_pre + depth * g
    layers.append(Conv(ConvSpec(3, 3, c_last, out_channels, 1, 1), linear=True))
    return NetworkSpec((h, w, c), tuple(layers))


def fr21(in_shape, out_channels, stem_mode="joint", growth=16):
    return _encoder_decoder(in_shape, out_channels, stem_mode, growth, None)


def fr25(in_shape, out_channels, stem_mode="joint", growth=16):
    # final block widens 72 -> 144 feature maps over four layers
    return _encoder_decoder(in_shape, out_channels, stem_mode, growth, (72, 4, 18))


def fr9(in_shape, out_channels, stem_mode="joint", growth=12):
    """Nine-conv encoder-decoder for small grids (one 2x downsampling)."""
    h, w, c = in_shape
    s = 16 if stem_mode == "joint" else 8 * c
    layers = [Stem(ConvSpec(3, 3, c, s, 1, 1), stem_mode)]
    down = ConvSpec(3, 3, s, 2 * s, 2, 1)
    h1, w1 = down.out_hw(h, w)
    b1 = DenseBlock(3, growth)
    c1 = b1.out_channels(2 * s)
    layers += [Conv(down), b1, Conv(ConvSpec(1, 1, c1, c1 // 2))]
    layers += [BicubicResize(h, w), Conv(ConvSpec(3, 3, c1 // 2, 24, 1, 1))]
    b2 = DenseBlock(1, growth)
    layers += [b2, Conv(ConvSpec(3, 3, b2.out_channels(24), out_channels, 1, 1), linear=True)]
    return NetworkSpec((h, w, c), tuple(layers))


PRESETS = {"FR21": fr21, "FR25": fr25, "FR9": fr9}


def preset(name, in_shape, out_channels, stem_mode="joint"):
    if name not in PRESETS:
        raise InvalidArgument(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return PRESETS[name](tuple(in_shape), out_channels, stem_mode)

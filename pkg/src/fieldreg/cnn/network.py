"""Network assembly, parameter storage, and reverse-mode gradients.

Batches enter and leave as ``(N, C, H, W)`` arrays; internally activations are
NHWC so that channel concatenation and per-channel statistics are cheap.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument, InvalidState
from . import layers as L
from .spec import BicubicResize, Conv, DenseBlock, Stem, layer_shapes

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class ParameterSet:
    """Learnable values in one flat vector plus BN running statistics.

    ``blocks`` maps a name to ``(offset, shape)`` inside ``values``;
    ``stat_blocks`` does the same for ``stats``. ``version`` increments on
    every in-place update so stale tapes can be detected.
    """

    values: np.ndarray
    blocks: dict
    stats: np.ndarray
    stat_blocks: dict
    version: int = 0

    def view(self, name):
        off, shape = self.blocks[name]
        return self.values[off : off + int(np.prod(shape))].reshape(shape)

    def stat(self, name):
        off, shape = self.stat_blocks[name]
        return self.stats[off : off + int(np.prod(shape))].reshape(shape)

    def grad_view(self, grads, name):
        off, shape = self.blocks[name]
        return grads[off : off + int(np.prod(shape))].reshape(shape)

    def block_of(self, index):
        for name, (off, shape) in self.blocks.items():
            if off <= index < off + int(np.prod(shape)):
                return name
        raise IndexError(index)

    def zeros_like(self):
        return np.zeros_like(self.values)

    def copy(self):
        return ParameterSet(self.values.copy(), dict(self.blocks), self.stats.copy(), dict(self.stat_blocks), self.version)

    def bump(self):
        self.version += 1

    def __len__(self):
        return self.values.size


@dataclass
class Tape:
    caches: list
    version: int
    in_shape: tuple
    used: bool = False


class _ConvUnit:
    """Conv (optionally grouped) followed by ReLU and BN unless linear."""

    def __init__(self, name, spec, linear=False, groups=1):
        self.name = name
        self.spec = spec
        self.linear = linear
        self.groups = groups
        self.kname = f"{name}.kernel"

    def param_shapes(self):
        s = self.spec
        shapes = {self.kname: (s.out_channels, s.in_channels // self.groups, s.kernel_h, s.kernel_w)}
        if not self.linear:
            shapes[f"{self.name}.alpha"] = (s.out_channels,)
            shapes[f"{self.name}.beta"] = (s.out_channels,)
        return shapes

    def stat_shapes(self):
        if self.linear:
            return {}
        return {f"{self.name}.mean": (self.spec.out_channels,), f"{self.name}.var": (self.spec.out_channels,)}

    def _conv(self, x, kernel):
        s = self.spec
        if self.groups == 1:
            return L.conv2d(x, kernel, s.stride, s.padding)
        ci = s.in_channels // self.groups
        co = s.out_channels // self.groups
        return np.concatenate(
            [
                L.conv2d(x[..., g * ci : (g + 1) * ci], kernel[g * co : (g + 1) * co], s.stride, s.padding)
                for g in range(self.groups)
            ],
            axis=-1,
        )

    def _conv_backward(self, dout, x, kernel):
        s = self.spec
        if self.groups == 1:
            return L.conv2d_backward(dout, x, kernel, s.stride, s.padding)
        ci = s.in_channels // self.groups
        co = s.out_channels // self.groups
        dx = np.empty_like(x)
        dk = np.empty_like(kernel)
        for g in range(self.groups):
            dx[..., g * ci : (g + 1) * ci], dk[g * co : (g + 1) * co] = L.conv2d_backward(
                dout[..., g * co : (g + 1) * co], x[..., g * ci : (g + 1) * ci], kernel[g * co : (g + 1) * co],
                s.stride, s.padding,
            )
        return dx, dk

    def forward(self, params, x, train, update_stats):
        kernel = params.view(self.kname)
        gamma = self._conv(x, kernel)
        if self.linear:
            return gamma, (x,)
        h, mask = L.relu(gamma, self.spec.relu_eps)
        alpha = params.view(f"{self.name}.alpha")
        beta = params.view(f"{self.name}.beta")
        rmean = params.stat(f"{self.name}.mean")
        rvar = params.stat(f"{self.name}.var")
        if not train:
            return L.batchnorm_infer(h, alpha, beta, rmean, rvar, BN_EPS), None
        out, bn_cache = L.batchnorm_train(h, alpha, beta, BN_EPS)
        if update_stats:
            m = h.shape[0] * h.shape[1] * h.shape[2]
            _, _, mu, var = bn_cache
            unbiased = var * (m / (m - 1)) if m > 1 else var
            rmean *= BN_MOMENTUM
            rmean += (1.0 - BN_MOMENTUM) * mu
            rvar *= BN_MOMENTUM
            rvar += (1.0 - BN_MOMENTUM) * unbiased
        return out, (x, mask, bn_cache)

    def backward(self, params, grads, dout, cache):
        kernel = params.view(self.kname)
        if self.linear:
            (x,) = cache
            dgamma = dout
        else:
            x, mask, bn_cache = cache
            dh, dalpha, dbeta = L.batchnorm_backward(dout, params.view(f"{self.name}.alpha"), bn_cache)
            params.grad_view(grads, f"{self.name}.alpha")[...] += dalpha
            params.grad_view(grads, f"{self.name}.beta")[...] += dbeta
            dgamma = dh * mask
        dx, dk = self._conv_backward(dgamma, x, kernel)
        params.grad_view(grads, self.kname)[...] += dk
        return dx


class _DenseOp:
    def __init__(self, name, block, k0):
        self.units = [_ConvUnit(f"{name}.l{i}", block.inner(k0, i)) for i in range(1, block.depth + 1)]
        self.k0 = k0
        self.growth = block.growth

    def forward(self, params, x, train, update_stats):
        feats = [x]
        caches = []
        for unit in self.units:
            inp = feats[0] if len(feats) == 1 else np.concatenate(feats, axis=-1)
            out, cache = unit.forward(params, inp, train, update_stats)
            feats.append(out)
            caches.append(cache)
        y = feats[0] if len(feats) == 1 else np.concatenate(feats, axis=-1)
        return y, caches

    def backward(self, params, grads, dout, caches):
        bounds = [0, self.k0] + [self.k0 + self.growth * i for i in range(1, len(self.units) + 1)]
        dfeats = [dout[..., bounds[i] : bounds[i + 1]].copy() for i in range(len(bounds) - 1)]
        for l in range(len(self.units) - 1, -1, -1):
            dinp = self.units[l].backward(params, grads, dfeats[l + 1], caches[l])
            for i in range(l + 1):
                dfeats[i] += dinp[..., bounds[i] : bounds[i + 1]]
        return dfeats[0]


class _ResizeOp:
    def __init__(self, src_h, src_w, layer):
        self.rh = L.resize_matrix(src_h, layer.target_h)
        self.rw = L.resize_matrix(src_w, layer.target_w)

    def forward(self, params, x, train, update_stats):
        return L.resize_nhwc(x, self.rh, self.rw), None

    def backward(self, params, grads, dout, cache):
        return L.resize_nhwc_adjoint(dout, self.rh, self.rw)


class _UnitOp:
    def __init__(self, unit):
        self.unit = unit

    def forward(self, params, x, train, update_stats):
        return self.unit.forward(params, x, train, update_stats)

    def backward(self, params, grads, dout, cache):
        return self.unit.backward(params, grads, dout, cache)


@dataclass
class Network:
    spec: object
    ops: list = field(default_factory=list)
    param_shapes: dict = field(default_factory=dict)
    stat_shapes: dict = field(default_factory=dict)
    shapes: list = field(default_factory=list)

    @property
    def n_params(self):
        return int(sum(np.prod(s) for s in self.param_shapes.values()))

    def forward(self, params, x, train=False, update_stats=True):
        """Apply the layers in order to an ``(N, C, H, W)`` batch.

        Returns ``(y, tape)``; the tape is None in inference mode.
        """
        x = np.asarray(x, dtype=np.float64)
        h, w, c = self.spec.in_shape
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise InvalidArgument(f"batch must be (N, {c}, {h}, {w}), got {x.shape}")
        if x.shape[0] < 1:
            raise InvalidArgument("batch must not be empty")
        if params.values.size != self.n_params:
            raise InvalidArgument("parameter set does not belong to this network")
        a = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        caches = []
        for op in self.ops:
            a, cache = op.forward(params, a, train, update_stats)
            caches.append(cache)
        y = np.ascontiguousarray(a.transpose(0, 3, 1, 2))
        if not train:
            return y, None
        return y, Tape(caches, params.version, x.shape)

    def backward(self, params, tape, dy):
        """Reverse pass. Returns ``(grads, dx)`` with grads congruent to ``params.values``."""
        if tape is None:
            raise InvalidState("no tape: backward needs a train-mode forward")
        if tape.used:
            raise InvalidState("tape already consumed by a backward pass")
        if tape.version != params.version:
            raise InvalidState("parameters changed since this tape was recorded")
        tape.used = True
        grads = params.zeros_like()
        d = np.ascontiguousarray(np.asarray(dy, dtype=np.float64).transpose(0, 2, 3, 1))
        for op, cache in zip(reversed(self.ops), reversed(tape.caches)):
            d = op.backward(params, grads, d, cache)
        return grads, np.ascontiguousarray(d.transpose(0, 3, 1, 2))

    def predict(self, params, x, batch_size=64):
        """Inference-mode forward in fixed-size chunks (chunking is part of the bit-exact contract)."""
        x = np.asarray(x, dtype=np.float64)
        outs = [self.forward(params, x[i : i + batch_size], train=False)[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)


def build_network(spec):
    shapes = layer_shapes(spec)
    net = Network(spec, shapes=shapes)
    for idx, layer in enumerate(spec.layers):
        h, w, c = shapes[idx]
        name = f"L{idx}"
        if isinstance(layer, Conv):
            unit = _ConvUnit(name, layer.conv, layer.linear)
            op = _UnitOp(unit)
            units = [unit]
        elif isinstance(layer, Stem):
            groups = c if layer.mode == "separate" else 1
            unit = _ConvUnit(name, layer.conv, False, groups)
            op = _UnitOp(unit)
            units = [unit]
        elif isinstance(layer, DenseBlock):
            op = _DenseOp(name, layer, c)
            units = op.units
        elif isinstance(layer, BicubicResize):
            op = _ResizeOp(h, w, layer)
            units = []
        else:
            raise InvalidArgument(f"unsupported layer {layer!r}")
        for unit in units:
            net.param_shapes.update(unit.param_shapes())
            net.stat_shapes.update(unit.stat_shapes())
        net.ops.append(op)
    return net


def _layout(shapes):
    blocks, off = {}, 0
    for name, shape in shapes.items():
        blocks[name] = (off, tuple(shape))
        off += int(np.prod(shape))
    return blocks, off


def init_parameters(net, seed):
    """He-normal kernels, alpha = 1, beta = 0, running stats (0, 1)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    blocks, n = _layout(net.param_shapes)
    stat_blocks, ns = _layout(net.stat_shapes)
    params = ParameterSet(np.zeros(n), blocks, np.zeros(ns), stat_blocks)
    for name, (_, shape) in blocks.items():
        if name.endswith(".kernel"):
            fan_in = shape[1] * shape[2] * shape[3]
            params.view(name)[...] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith(".alpha"):
            params.view(name)[...] = 1.0
    for name in stat_blocks:
        if name.endswith(".var"):
            params.stat(name)[...] = 1.0
    return params

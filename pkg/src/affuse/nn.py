"""Network building blocks: linear, dropout, layer norm, causal conv, TCN."""
import numpy as np

from affuse import tensor as T
from affuse.tensor import ShapeError, Tensor


class Module:
    """Minimal parameter container. Subclasses list children in ``_children``."""

    _children = ()
    _own = ()

    def named_parameters(self, prefix=""):
        for name in self._own:
            yield prefix + name, getattr(self, name)
        for child in self._children:
            mod = getattr(self, child)
            if mod is not None:
                yield from mod.named_parameters(f"{prefix}{child}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _param(arr, name):
    return Tensor(arr, requires_grad=True, name=name)


def _as_batch(x):
    """Promote (C, T) to (1, C, T); return the tensor and whether to squeeze."""
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected (C, T) or (B, C, T), got {x.shape}")
    return x, False


def _unbatch(y, squeeze):
    return T.reshape(y, y.shape[1:]) if squeeze else y


class LinearLayer(Module):
    """Per-time-step affine map over the channel axis of (B, in, T)."""

    _own = ("weight", "bias")

    def __init__(self, in_features, out_features, rng):
        limit = np.sqrt(6.0 / (in_features + out_features))
        self.in_features = in_features
        self.out_features = out_features
        self.weight = _param(rng.uniform(-limit, limit, (out_features, in_features)), "weight")
        self.bias = _param(np.zeros(out_features), "bias")

    def __call__(self, x):
        x, squeeze = _as_batch(x)
        if x.shape[1] != self.in_features:
            raise ShapeError(f"linear layer expects {self.in_features} channels, got {x.shape[1]}")
        y = T.matmul(self.weight, x) + T.reshape(self.bias, (self.out_features, 1))
        return _unbatch(y, squeeze)


def dropout(x, rate, train, rng):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return T.mul(x, keep)


class LayerNorm(Module):
    _own = ("gain", "shift")

    def __init__(self, dim, eps=1e-5, axis=-1):
        self.dim = dim
        self.eps = eps
        self.axis = axis
        self.gain = _param(np.ones(dim), "gain")
        self.shift = _param(np.zeros(dim), "shift")

    def __call__(self, x):
        if x.shape[self.axis] != self.dim:
            raise ShapeError(f"layer norm over {self.dim} features, got {x.shape}")
        mu = T.mean(x, self.axis, keepdims=True)
        var = T.variance(x, self.axis, keepdims=True)
        xhat = (x - mu) / T.sqrt(var + self.eps)
        bshape = [1] * x.ndim
        bshape[self.axis] = self.dim
        return xhat * T.reshape(self.gain, tuple(bshape)) + T.reshape(self.shift, tuple(bshape))


class DilatedCausalConv(Module):
    _own = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel_size=5, dilation=1, rng=None, init_std=0.01):
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.weight = _param(rng.normal(0.0, init_std, (out_channels, in_channels, kernel_size)), "weight")
        self.bias = _param(np.zeros(out_channels), "bias")

    @property
    def left_padding(self):
        return (self.kernel_size - 1) * self.dilation

    def __call__(self, x):
        x, squeeze = _as_batch(x)
        return _unbatch(T.causal_conv1d(x, self.weight, self.bias, self.dilation), squeeze)


def causal_conv_forward(x, layer):
    return layer(x)


class TemporalBlock(Module):
    """Two causal convolutions with ReLU and dropout, plus a residual path.

    A 1x1 projection is added on the residual when channel counts differ.
    """

    _children = ("conv1", "conv2", "downsample")

    def __init__(self, in_channels, out_channels, kernel_size, dilation, dropout=0.1, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        self.dropout = dropout
        self.conv1 = DilatedCausalConv(in_channels, out_channels, kernel_size, dilation, rng)
        self.conv2 = DilatedCausalConv(out_channels, out_channels, kernel_size, dilation, rng)
        self.downsample = (DilatedCausalConv(in_channels, out_channels, 1, 1, rng)
                           if in_channels != out_channels else None)

    def __call__(self, x, train=False, rng=None):
        x, squeeze = _as_batch(x)
        h = dropout(T.relu(self.conv1(x)), self.dropout, train, rng)
        h = dropout(T.relu(self.conv2(h)), self.dropout, train, rng)
        res = x if self.downsample is None else self.downsample(x)
        return _unbatch(T.relu(h + res), squeeze)


class TCNStack(Module):
    def __init__(self, in_channels, channels=128, num_levels=4, kernel_size=5, dropout=0.1, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels = in_channels
        self.channels = channels
        self.num_levels = num_levels
        self.kernel_size = kernel_size
        self.blocks = []
        for level in range(num_levels):
            c_in = in_channels if level == 0 else channels
            self.blocks.append(TemporalBlock(c_in, channels, kernel_size, 2 ** level, dropout, rng))

    @property
    def receptive_field(self):
        return 1 + 2 * (self.kernel_size - 1) * (2 ** self.num_levels - 1)

    def named_parameters(self, prefix=""):
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}blocks.{i}.")

    def __call__(self, x, train=False, rng=None):
        x, squeeze = _as_batch(x)
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"TCN expects {self.in_channels} input channels, got {x.shape[1]}")
        for block in self.blocks:
            x = block(x, train, rng)
        return _unbatch(x, squeeze)


def tcn_forward(x, stack, train=False, rng=None):
    return stack(x, train, rng)

"""Layers with explicit forward and backward passes.

Every layer works on numpy arrays in NCHW layout (or N x features for
dense layers).  ``forward`` returns the output together with a cache that
``backward`` consumes; no general computation graph is built.
"""

import numpy as np

from ..errors import ShapeError


def conv_out_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_out_size(size, kernel, stride, padding, output_padding=0):
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class.  Subclasses fill ``params`` (trainable) and ``buffers``."""

    kind = "layer"

    def __init__(self):
        self.params = {}
        self.buffers = {}

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x, train=True, update_stats=True):
        raise NotImplementedError

    def backward(self, cache, gy):
        """Return ``(grad_input, {param_name: grad})``."""
        raise NotImplementedError

    def hyper(self):
        return {}

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        return self

    def __repr__(self):
        hp = ", ".join(f"{k}={v}" for k, v in self.hyper().items())
        return f"{type(self).__name__}({hp})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, rng=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.params["weight"] = he_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.params["bias"] = np.zeros(out_channels, dtype=np.float32)

    def hyper(self):
        return dict(in_channels=self.in_channels, out_channels=self.out_channels,
                    kernel_size=self.kernel_size, stride=self.stride, padding=self.padding)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        ho = conv_out_size(h, self.kernel_size, self.stride, self.padding)
        wo = conv_out_size(w, self.kernel_size, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for kernel {self.kernel_size}")
        return (self.out_channels, ho, wo)

    def _columns(self, x):
        """Column matrix of shape (C*k*k, N*Ho*Wo), built one kernel tap at a time."""
        p, k, s = self.padding, self.kernel_size, self.stride
        n, c, h, w = x.shape
        xt = x.transpose(1, 0, 2, 3)
        if p:
            xt = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p)))
        ho = conv_out_size(h, k, s, p)
        wo = conv_out_size(w, k, s, p)
        cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xt[:, :, i:i + s * ho:s, j:j + s * wo:s]
        return cols.reshape(c * k * k, n * ho * wo), ho, wo

    def forward(self, x, train=True, update_stats=True):
        n = x.shape[0]
        w = self.params["weight"]
        cols, ho, wo = self._columns(x)
        y = w.reshape(self.out_channels, -1) @ cols
        y += self.params["bias"][:, None]
        y = y.reshape(self.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(y), (x.shape, cols, ho, wo)

    def backward(self, cache, gy):
        x_shape, cols, ho, wo = cache
        n, c, h, w_ = x_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        w = self.params["weight"]
        g2 = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(self.out_channels, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gb = g2.sum(axis=1)
        gxp = np.zeros((c, n, h + 2 * p, w_ + 2 * p), dtype=gy.dtype)
        for i in range(k):
            for j in range(k):
                tap = np.ascontiguousarray(w[:, :, i, j].T) @ g2
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += tap.reshape(c, n, ho, wo)
        gx = gxp[:, :, p:p + h, p:p + w_].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), {"weight": gw, "bias": gb}


class ConvTranspose2d(Layer):
    """Transposed convolution; weight layout is (in, out, k, k)."""

    kind = "transposed-conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 output_padding=0, rng=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        rng = rng if rng is not None else np.random.default_rng(0)
        # each output pixel sees roughly in_channels * k^2 / stride^2 taps
        fan_in = max(1, in_channels * kernel_size * kernel_size // (stride * stride))
        self.params["weight"] = he_uniform(
            rng, (in_channels, out_channels, kernel_size, kernel_size), fan_in)
        self.params["bias"] = np.zeros(out_channels, dtype=np.float32)

    def hyper(self):
        return dict(in_channels=self.in_channels, out_channels=self.out_channels,
                    kernel_size=self.kernel_size, stride=self.stride, padding=self.padding,
                    output_padding=self.output_padding)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        args = (self.kernel_size, self.stride, self.padding, self.output_padding)
        return (self.out_channels, conv_transpose_out_size(h, *args), conv_transpose_out_size(w, *args))

    def forward(self, x, train=True, update_stats=True):
        n, c, h, w_ = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        co = self.out_channels
        _, ho, wo = self.output_shape(x.shape[1:])
        w = self.params["weight"]
        xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, -1)
        cols = (w.reshape(c, -1).T @ xt).reshape(co, k, k, n, h, w_)
        full_h = (h - 1) * s + k + self.output_padding
        full_w = (w_ - 1) * s + k + self.output_padding
        full = np.zeros((co, n, full_h, full_w), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                full[:, :, i:i + s * h:s, j:j + s * w_:s] += cols[:, i, j]
        y = full[:, :, p:p + ho, p:p + wo].transpose(1, 0, 2, 3) + self.params["bias"][None, :, None, None]
        return np.ascontiguousarray(y), (xt, x.shape, full_h, full_w)

    def backward(self, cache, gy):
        xt, x_shape, full_h, full_w = cache
        n, c, h, w_ = x_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        co = self.out_channels
        w = self.params["weight"]
        ho, wo = gy.shape[2:]
        gfull = np.zeros((co, n, full_h, full_w), dtype=gy.dtype)
        gfull[:, :, p:p + ho, p:p + wo] = gy.transpose(1, 0, 2, 3)
        gcols = np.empty((co, k, k, n, h, w_), dtype=gy.dtype)
        for i in range(k):
            for j in range(k):
                gcols[:, i, j] = gfull[:, :, i:i + s * h:s, j:j + s * w_:s]
        gcols = gcols.reshape(co * k * k, -1)
        gx = (w.reshape(c, -1) @ gcols).reshape(c, n, h, w_).transpose(1, 0, 2, 3)
        gw = (xt @ gcols.T).reshape(w.shape)
        gb = gy.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gx), {"weight": gw, "bias": gb}


class Dense(Layer):
    """``y = x W^T + b`` with ``W`` of shape (out, in)."""

    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = he_uniform(rng, (out_features, in_features), in_features)
        if bias:
            self.params["bias"] = np.zeros(out_features, dtype=np.float32)

    def hyper(self):
        return dict(in_features=self.in_features, out_features=self.out_features)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"expected ({self.in_features},) features, got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x, train=True, update_stats=True):
        y = x @ self.params["weight"].T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y, x

    def backward(self, cache, gy):
        x = cache
        grads = {"weight": gy.T @ x}
        if "bias" in self.params:
            grads["bias"] = gy.sum(axis=0)
        return gy @ self.params["weight"], grads


class BatchNorm(Layer):
    """Batch normalization over every axis except the channel axis (axis 1)."""

    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5, momentum=0.9):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, dtype=np.float32)
        self.params["beta"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_var"] = np.ones(channels, dtype=np.float32)

    def hyper(self):
        return dict(channels=self.channels, eps=self.eps, momentum=self.momentum)

    def output_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {in_shape[0]}")
        return in_shape

    def _bshape(self, x):
        return (1, self.channels) + (1,) * (x.ndim - 2)

    def forward(self, x, train=True, update_stats=True):
        axes = (0,) + tuple(range(2, x.ndim))
        bs = self._bshape(x)
        gamma = self.params["gamma"].reshape(bs)
        beta = self.params["beta"].reshape(bs)
        if not train:
            mean = self.buffers["running_mean"].reshape(bs)
            var = self.buffers["running_var"].reshape(bs)
            return (x - mean) / np.sqrt(var + self.eps) * gamma + beta, None
        mean = x.mean(axis=axes, keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv_std
        if update_stats:
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = (m * rm + (1 - m) * mean.reshape(-1)).astype(rm.dtype)
            self.buffers["running_var"] = (m * rv + (1 - m) * var.reshape(-1)).astype(rv.dtype)
        return xhat * gamma + beta, (xhat, inv_std, axes)

    def backward(self, cache, gy):
        xhat, inv_std, axes = cache
        gamma = self.params["gamma"].reshape(self._bshape(gy))
        count = gy.size // self.channels
        ggamma = (gy * xhat).sum(axis=axes)
        gbeta = gy.sum(axis=axes)
        gxhat = gy * gamma
        gx = inv_std / count * (count * gxhat
                                - gxhat.sum(axis=axes, keepdims=True)
                                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx.astype(gy.dtype), {"gamma": ggamma, "beta": gbeta}


class LeakyReLU(Layer):
    kind = "leaky-relu"

    def __init__(self, negative_slope=0.2):
        super().__init__()
        self.negative_slope = negative_slope

    def hyper(self):
        return dict(negative_slope=self.negative_slope)

    def forward(self, x, train=True, update_stats=True):
        slope = x.dtype.type(self.negative_slope)
        scale = np.where(x > 0, x.dtype.type(1), slope)
        return x * scale, scale

    def backward(self, cache, gy):
        return gy * cache, {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=True, update_stats=True):
        pos = x > 0
        return np.where(pos, x, x.dtype.type(0)), pos

    def backward(self, cache, gy):
        return np.where(cache, gy, gy.dtype.type(0)), {}


class Clip(Layer):
    """Hard clamp; the gradient is zero outside the bounds."""

    kind = "clip"

    def __init__(self, low=-1.0, high=1.0):
        super().__init__()
        self.low = low
        self.high = high

    def hyper(self):
        return dict(low=self.low, high=self.high)

    def forward(self, x, train=True, update_stats=True):
        inside = (x >= self.low) & (x <= self.high)
        return np.clip(x, self.low, self.high).astype(x.dtype, copy=False), inside

    def backward(self, cache, gy):
        return np.where(cache, gy, gy.dtype.type(0)), {}


class Reshape(Layer):
    """Reshape the per-sample feature layout; the batch axis is untouched."""

    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def hyper(self):
        return dict(shape=self.shape)

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {tuple(in_shape)} to {self.shape}")
        return self.shape

    def forward(self, x, train=True, update_stats=True):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, cache, gy):
        return gy.reshape(cache), {}


LAYER_KINDS = {cls.kind: cls for cls in
               (Conv2d, ConvTranspose2d, Dense, BatchNorm, LeakyReLU, ReLU, Clip, Reshape)}

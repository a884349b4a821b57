"""Mask module: an activation-map generator followed by a top-k threshold unit.

The generator is a small convolutional autoencoder with a spatial
bottleneck and a ReLU output.  The threshold unit zeroes the pixels holding
the largest ``1 - t`` fraction of activations, so every image loses exactly
the same number of pixels.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import BatchNorm, Conv2d, ConvTranspose2d, LayerStack, LeakyReLU, ReLU

GRAD_MODES = ("straight-through", "paper-literal")


@dataclass
class MaskGeneratorConfig:
    input_shape: tuple = (1, 32, 32)
    channels: tuple = (16, 32)
    negative_slope: float = 0.2

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.channels = tuple(self.channels)
        _, h, w = self.input_shape
        scale = 2 ** len(self.channels)
        if h % scale or w % scale:
            raise ConfigError(f"spatial size {h}x{w} must be divisible by {scale}")


@dataclass
class ThresholdConfig:
    t: float = 0.875
    eps: float = 1e-6
    grad_mode: str = "straight-through"

    def __post_init__(self):
        if not 0.0 < self.t <= 1.0:
            raise ConfigError(f"keep fraction t must lie in (0, 1], got {self.t}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f"grad_mode must be one of {GRAD_MODES}, got {self.grad_mode!r}")


def masked_count(t, n_pixels):
    """Number of masked pixels, ``ceil((1 - t) * n_pixels)``."""
    # round first so that e.g. (1 - 0.9) * 100 does not ceil to 11
    return int(math.ceil(round((1.0 - t) * n_pixels, 9)))


def build_mask_generator(cfg=None, rng=None):
    cfg = cfg or MaskGeneratorConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    c_in = cfg.input_shape[0]
    layers = []
    prev = c_in
    for i, ch in enumerate(cfg.channels):
        layers += [
            (f"enc{i}.conv", Conv2d(prev, ch, 3, stride=2, padding=1, rng=rng)),
            (f"enc{i}.bn", BatchNorm(ch)),
            (f"enc{i}.act", LeakyReLU(cfg.negative_slope)),
        ]
        prev = ch
    dec = list(reversed(cfg.channels[:-1])) + [1]
    for i, ch in enumerate(dec):
        layers.append((f"dec{i}.tconv", ConvTranspose2d(prev, ch, 3, stride=2, padding=1,
                                                        output_padding=1, rng=rng)))
        if i < len(dec) - 1:
            layers += [(f"dec{i}.bn", BatchNorm(ch)), (f"dec{i}.act", LeakyReLU(cfg.negative_slope))]
        prev = ch
    layers.append(("out.relu", ReLU()))
    return LayerStack(cfg.input_shape, layers)


def threshold(A, cfg):
    """Hard threshold unit.

    Args:
      A: activation maps, shape (N, 1, H, W).
      cfg: ThresholdConfig.

    Returns:
      ``(mask, s)``: the binary masks (same shape as ``A``) and the per-image
      k-th largest activation (``nan`` when nothing is masked).  The k
      largest activations are zeroed; ties go to the smallest row-major index.
    """
    if not isinstance(cfg, ThresholdConfig):
        cfg = ThresholdConfig(t=cfg)
    A = np.asarray(A)
    n = A.shape[0]
    flat = A.reshape(n, -1)
    k = masked_count(cfg.t, flat.shape[1])
    mask = np.ones_like(flat, dtype=np.float32)
    s = np.full(n, np.nan, dtype=np.float64)
    if k:
        order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
        np.put_along_axis(mask, order, 0.0, axis=1)
        s = np.take_along_axis(flat, order[:, -1:], axis=1)[:, 0].astype(np.float64)
    return mask.reshape(A.shape), s


def threshold_soft(A, s, eps=1e-6):
    """Continuous threshold ``(s - relu(A)) / (s - relu(A) + eps)`` clamped to [0, 1].

    ``s`` is one value per image.
    """
    A = np.asarray(A, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64).reshape((-1,) + (1,) * (A.ndim - 1))
    u = s - np.maximum(A, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = u / (u + eps)
    return np.clip(raw, 0.0, 1.0)


def _threshold_soft_grad(A, s, eps):
    A = np.asarray(A, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64).reshape((-1,) + (1,) * (A.ndim - 1))
    u = s - np.maximum(A, 0.0)
    den = u + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = u / den
        d_du = eps / (den * den)
    inside = (raw > 0.0) & (raw < 1.0)
    return np.where(inside & (A > 0), -d_du, 0.0)


def apply_mask(x, mask):
    """Multiply every channel of ``x`` by the single-channel ``mask``."""
    if mask.ndim != 4 or mask.shape[1] != 1:
        raise ShapeError(f"mask must have shape (N, 1, H, W), got {mask.shape}")
    if x.shape[0] != mask.shape[0] or x.shape[2:] != mask.shape[2:]:
        raise ShapeError(f"mask shape {mask.shape} does not match images {x.shape}")
    return x * mask.astype(x.dtype, copy=False)


def mask_backward(grad_xm, x, A, mask, s, cfg):
    """Gradient of the loss with respect to the activation map.

    The gradient reaching the mask is ``sum_c grad_xm * x``.  It crosses the
    threshold unit either through the straight-through surrogate, whose
    slope is -1 because a larger activation can only turn a pixel from 1 to
    0, or through the clamped continuous threshold with ``s`` held fixed.
    When nothing is masked the mask is constant and the gradient is zero.
    """
    if cfg.grad_mode not in GRAD_MODES:
        raise ConfigError(f"unknown grad_mode {cfg.grad_mode!r}")
    g_mask = (grad_xm * x).sum(axis=1, keepdims=True)
    if masked_count(cfg.t, int(np.prod(A.shape[2:]))) == 0:
        return np.zeros_like(A)
    if cfg.grad_mode == "straight-through":
        return (-g_mask).astype(A.dtype, copy=False)
    return (g_mask * _threshold_soft_grad(A, s, cfg.eps)).astype(A.dtype, copy=False)


@dataclass
class MaskModule:
    """Generator plus threshold unit."""

    generator: LayerStack
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)

    @classmethod
    def build(cls, gen_cfg=None, thr_cfg=None, rng=None):
        return cls(build_mask_generator(gen_cfg, rng), thr_cfg or ThresholdConfig())

    def activation_map(self, x, mode="infer", update_stats=True):
        return self.generator.forward(x, mode, update_stats=update_stats)

    def __call__(self, x, mode="infer", update_stats=True):
        """Return ``(mask, A, s, tape)`` for a batch of images."""
        A, tape = self.activation_map(x, mode, update_stats)
        mask, s = threshold(A, self.threshold)
        return mask, A, s, tape

    def backward(self, tape, grad_xm, x, A, mask, s):
        """Backpropagate a gradient on the masked images into generator parameters."""
        gA = mask_backward(grad_xm, x, A, mask, s, self.threshold)
        return self.generator.backward(tape, gA)


def generate_activation_map(M, x):
    """Infer-mode activation maps of generator ``M`` (a LayerStack or MaskModule)."""
    stack = M.generator if isinstance(M, MaskModule) else M
    return stack.forward(x, "infer")[0]

"""Reconstructor: convolutional encoder-decoder with a dense bottleneck.

No pooling anywhere; downsampling is done by stride-2 convolutions and
upsampling by stride-2 transposed convolutions.  The output is hard-clipped
to [-1, 1].
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import BatchNorm, Clip, Conv2d, ConvTranspose2d, Dense, LayerStack, LeakyReLU, Reshape


@dataclass
class ReconstructorConfig:
    input_shape: tuple = (1, 32, 32)
    channels: tuple = (32, 64, 128)
    bottleneck: int = 128
    negative_slope: float = 0.2
    clip: tuple = (-1.0, 1.0)
    # shrinks the last conv at init so few outputs start pinned by the clip
    out_init_scale: float = 0.1

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.channels = tuple(self.channels)
        self.clip = tuple(self.clip)
        _, h, w = self.input_shape
        scale = 2 ** len(self.channels)
        if h % scale or w % scale:
            raise ConfigError(f"spatial size {h}x{w} must be divisible by {scale}")


def build_reconstructor(cfg=None, rng=None):
    cfg = cfg or ReconstructorConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    c_in, h, w = cfg.input_shape
    slope = cfg.negative_slope
    layers = []
    prev = c_in
    for i, ch in enumerate(cfg.channels):
        layers += [
            (f"enc{i}.conv", Conv2d(prev, ch, 3, stride=2, padding=1, rng=rng)),
            (f"enc{i}.bn", BatchNorm(ch)),
            (f"enc{i}.act", LeakyReLU(slope)),
        ]
        prev = ch
    scale = 2 ** len(cfg.channels)
    code_shape = (prev, h // scale, w // scale)
    flat = int(np.prod(code_shape))
    layers += [
        ("flatten", Reshape((flat,))),
        ("bottleneck", Dense(flat, cfg.bottleneck, rng=rng)),
        ("expand", Dense(cfg.bottleneck, flat, rng=rng)),
        ("expand.bn", BatchNorm(flat)),
        ("expand.act", LeakyReLU(slope)),
        ("unflatten", Reshape(code_shape)),
    ]
    dec = list(reversed(cfg.channels[:-1])) + [cfg.channels[0]]
    for i, ch in enumerate(dec):
        layers += [
            (f"dec{i}.tconv", ConvTranspose2d(prev, ch, 3, stride=2, padding=1, output_padding=1, rng=rng)),
            (f"dec{i}.bn", BatchNorm(ch)),
            (f"dec{i}.act", LeakyReLU(slope)),
        ]
        prev = ch
    out = Conv2d(prev, c_in, 3, stride=1, padding=1, rng=rng)
    out.params["weight"] *= cfg.out_init_scale
    layers += [("out.conv", out), ("out.clip", Clip(*cfg.clip))]
    return LayerStack(cfg.input_shape, layers)


def reconstruct(R, x, mode="infer"):
    return R.forward(x, mode)[0]


def extract_region(x, mask):
    """Values of ``x`` at the zeros of ``mask``.

    Returns an array of shape (N, C, k): for each channel the masked pixels
    in row-major order.  Every mask must have the same number of zeros.
    """
    if x.shape[0] != mask.shape[0] or x.shape[2:] != mask.shape[2:]:
        raise ShapeError(f"mask shape {mask.shape} does not match images {x.shape}")
    n, c = x.shape[:2]
    sel = mask.reshape(n, -1) == 0
    counts = sel.sum(axis=1)
    if n and np.any(counts != counts[0]):
        raise ShapeError("masks have different numbers of zeros")
    k = int(counts[0]) if n else 0
    rows, pix = np.nonzero(sel)
    vals = x.reshape(n, c, -1)[rows, :, pix]
    return vals.reshape(n, k, c).transpose(0, 2, 1)


def restrict(x_hat, mask):
    """Reconstruction values at the masked positions; same index set as :func:`extract_region`."""
    return extract_region(x_hat, mask)

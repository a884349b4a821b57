"""How the threshold unit turns an activation map into a mask.

Run: python demos/01_masking.py
"""

import numpy as np

from oled.masking import ThresholdConfig, apply_mask, mask_backward, threshold

# A 2x2 map with keep-fraction 0.75 masks exactly one pixel: the largest.
A = np.array([[[[0.1, 0.9], [0.5, 0.7]]]])
mask, s = threshold(A, ThresholdConfig(t=0.75))
print("activation map\n", A[0, 0])
print("mask (0 = hidden)\n", mask[0, 0], "\nthreshold s =", s[0])

# Every image loses the same number of pixels, whatever its map looks like.
rng = np.random.default_rng(0)
maps = rng.random((4, 1, 32, 32)) ** rng.uniform(0.2, 5, (4, 1, 1, 1))
masks, _ = threshold(maps, ThresholdConfig(t=0.875))
print("hidden pixels per image at t=0.875:", (masks == 0).sum(axis=(1, 2, 3)))

# Masked pixels become 0, the midpoint of [-1, 1]; the rest are untouched.
x = rng.uniform(-1, 1, (4, 3, 32, 32)).astype(np.float32)
x_m = apply_mask(x, masks)
print("unmasked pixels preserved:", np.array_equal(x_m[np.broadcast_to(masks == 1, x.shape)],
                                                    x[np.broadcast_to(masks == 1, x.shape)]))

# The hard mask has no useful derivative.  The straight-through estimator
# treats d(mask)/dA as -1, so raising an activation is pushed in the
# direction that hides its pixel from the reconstructor.
g_xm = np.ones_like(x)
for mode in ("straight-through", "paper-literal"):
    cfg = ThresholdConfig(t=0.875, grad_mode=mode)
    m, s = threshold(maps, cfg)
    gA = mask_backward(g_xm, x, maps, m, s, cfg)
    print(f"{mode:>16}: non-zero map gradients {np.count_nonzero(gA)} of {gA.size}")

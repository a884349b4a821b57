"""Train OLED on one MNIST digit, score the test split, inspect the masks.

Run: python demos/02_train_digit.py [digit] [epochs]

The 5000-digit MNIST sample is exported to data/ on first use (needs the
optional mlxtend package).  A default run takes about two minutes on one core.
"""

import os
import sys

import numpy as np

from oled import build_mnist_protocol, load_mnist, segmentation_eval
from oled.cli import preview_grid
from oled.datasets import write_pgm
from oled.masking import apply_mask
from oled.sample_data import write_mnist_subset
from oled.training import TrainConfig, evaluate, train, train_cae_baseline

digit = int(sys.argv[1]) if len(sys.argv) > 1 else 8
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 20
root = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir)

raw = load_mnist(*write_mnist_subset(os.path.join(root, "data")))
split = build_mnist_protocol(raw, digit)
print(f"digit {digit}: {len(split.fit)} training images, {int((split.test_y == 0).sum())} test inliers, "
      f"{int(split.test_y.sum())} test outliers")

cfg = TrainConfig(epochs=epochs)
result = train(split, cfg)
for r in result.records:
    print(f"epoch {r.epoch:2d}  L_mask {r.L_mask:8.2f}  val s_mask AUC {r.val_auc['mask']:.3f}")
print("best epoch", result.best_epoch)

# Four anomaly scores on the test split.
_, metrics = evaluate(result.models, cfg, split.test_x, split.test_y)
for m in metrics:
    print(f"  s_{m['score_type']:<4} AUC {m['auc']:.4f}  EER {m['eer']:.4f}")

# The same budget spent on a context autoencoder with random square holes.
cae = train_cae_baseline(split, cfg)
_, cae_metrics = evaluate(cae.models, cfg, split.test_x, split.test_y, "cae")
print(f"CAE s_mask AUC {cae_metrics[1]['auc']:.4f}")

# The mask generator has never seen a label, yet its activations tend to
# light up on the strokes of the digit.
seg = segmentation_eval(result.models.MM, split.test_x, split.test_raw, split.test_y)
print(f"mask generator as segmenter: pixel AUC {seg.inlier_auc:.3f} inliers, {seg.outlier_auc:.3f} outliers")

# original | masked | reconstruction for the first inliers and outliers.
pick = np.r_[0:4, np.nonzero(split.test_y)[0][:4]]
x = split.test_x[pick]
mask = result.models.MM(x, "infer")[0]
x_m = apply_mask(x, mask)
xhat = result.models.R.forward(x_m, "infer")[0]
path = os.path.join(root, f"demo_masks_{digit}.pgm")
write_pgm(path, preview_grid(x, x_m, xhat))
print("preview grid written to", os.path.normpath(path))

"""The three reconstruction losses and their gradients.

For an image ``x`` with mask ``m`` and masked image ``x_m = x * m``:

* mask loss: squared L2 error between ``x`` and ``R(x_m)``;
* context loss: unsquared L2 error restricted to the masked pixels
  (``m == 0``) of ``R(x_m)``;
* rec loss: squared L2 error between ``x`` and ``R(x)``.

Batch losses are means of the per-sample values.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class LossTerms:
    L_mask: float
    L_cont: float
    L_rec: float
    gamma: float = 50.0
    lam: float = 1.0

    @property
    def L_tot(self):
        return self.L_mask + self.gamma * self.L_cont + self.lam * self.L_rec

    @property
    def L_adv(self):
        """The part of the objective the mask module can influence."""
        return self.L_mask + self.gamma * self.L_cont


def _per_sample_sq(d):
    return (d.astype(np.float64) ** 2).reshape(d.shape[0], -1).sum(axis=1)


def sample_errors(x, xhat_m, xhat, mask):
    """Per-sample raw errors ``(e_mask, e_cont, e_rec)`` as float64 arrays.

    ``xhat`` may be ``None`` when the unmasked reconstruction is not needed;
    ``e_rec`` is then ``None`` too.
    """
    region = (mask == 0).astype(x.dtype)
    d = x - xhat_m
    e_mask = _per_sample_sq(d)
    e_cont = np.sqrt(_per_sample_sq(d * region))
    e_rec = _per_sample_sq(x - xhat) if xhat is not None else None
    return e_mask, e_cont, e_rec


def adversarial_grad(x, xhat_m, mask, gamma):
    """Gradient of ``L_mask + gamma * L_cont`` (batch means) w.r.t. ``R(x_m)``."""
    n = x.shape[0]
    region = (mask == 0).astype(x.dtype)
    d = x - xhat_m
    norm = np.sqrt(_per_sample_sq(d * region)).astype(x.dtype)
    safe = np.where(norm > 0, norm, 1).reshape((n,) + (1,) * (x.ndim - 1))
    g_cont = np.where(norm.reshape(safe.shape) > 0, -d * region / safe, 0)
    return ((-2.0 * d + gamma * g_cont) / n).astype(x.dtype, copy=False)


def rec_grad(x, xhat, lam):
    """Gradient of ``lam * L_rec`` w.r.t. ``R(x)``."""
    return (lam * -2.0 * (x - xhat) / x.shape[0]).astype(x.dtype, copy=False)


def compute_losses(x, x_m, mask, R, gamma=50.0, lam=1.0, mode="infer"):
    """Loss terms of reconstructor ``R`` on one batch.

    ``R`` is a LayerStack or any callable mapping an image batch to its
    reconstruction.
    """
    if hasattr(R, "forward"):
        recon = lambda z: R.forward(z, mode, update_stats=False)[0]  # noqa: E731
    else:
        recon = R
    e_mask, e_cont, e_rec = sample_errors(x, recon(x_m), recon(x), mask)
    return LossTerms(float(e_mask.mean()), float(e_cont.mean()), float(e_rec.mean()), gamma, lam)

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def failures(self):
        return {k: e for k, e in self.errors.items() if not e < self.tolerance}


def relative_error(analytic, numeric, floor=1e-7):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(stack, x, tolerance=1e-3, h=1e-3, seed=0):
    """Compare ``stack.backward`` against central finite differences.

    Both sides run on a float64 copy of the stack.  The scalar objective is
    ``sum(forward(x) * r)`` for a fixed random ``r``, so ``r`` is the
    upstream gradient.  Returns the max relative error for the input and for
    every parameter.
    """
    # separate stream so r never coincides with an x drawn from the same seed
    rng = np.random.default_rng([seed, 0x67726164])
    net = stack.astype(np.float64)
    x = np.array(x, dtype=np.float64)

    def objective(inp):
        y, _ = net.forward(inp, "train", update_stats=False)
        return float(np.sum(y * r))

    y, tape = net.forward(x, "train", update_stats=False)
    r = rng.standard_normal(y.shape)
    gx, grads = net.backward(tape, r)

    def numeric(arr, evaluate):
        out = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), out.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        return out

    errors = {"input": relative_error(gx, numeric(x, lambda: objective(x)))}
    for key, p in net.parameters().items():
        errors[key] = relative_error(grads[key], numeric(p, lambda: objective(x)))
    return GradCheckReport(errors, tolerance)

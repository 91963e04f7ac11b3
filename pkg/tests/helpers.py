"""Shared test utilities: central finite differences for gradient checks."""

import numpy as np


def central_diff(f, arrays, h=1e-5):
    """Numeric gradient of the scalar function f() w.r.t. arrays (in place).

    f must recompute the loss from the current contents of the arrays.
    """
    grads = [np.zeros_like(a) for a in arrays]
    for a, g in zip(arrays, grads):
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
    return grads


def max_rel_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def logits_for_probs(probs):
    """Logit rows whose softmax equals the given probability rows."""
    return np.log(np.asarray(probs, dtype=np.float64))

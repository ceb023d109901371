"""Central finite-difference gradient checking shared by the model tests."""

import numpy as np

# Relative error uses max(|fd|, |analytic|, FLOOR) as denominator so that a
# tensor whose true gradient is zero (e.g. the attention key bias, which a
# softmax shift cancels) is judged on absolute error instead of noise ratio.
FLOOR = 1e-6


def relative_errors(loss_fn, params, grads, eps=1e-3):
    """Per-tensor relative error between ``grads`` and central differences.

    ``loss_fn()`` returns ``(loss, pattern)``; ``pattern`` captures the
    piecewise-linear regime (ReLU signs, pooling winners). A perturbation
    that changes it would make the difference quotient straddle a kink, so
    it is reported instead of silently compared.
    """
    _, base = loss_fn()
    errors, crossings = {}, []
    for name, arr in params.items():
        fd = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp, pat_p = loss_fn()
            flat[i] = old - eps
            lm, pat_m = loss_fn()
            flat[i] = old
            if pat_p != base or pat_m != base:
                crossings.append((name, i))
            fd.reshape(-1)[i] = (lp - lm) / (2 * eps)
        g = np.asarray(grads[name], dtype=np.float64)
        den = max(np.linalg.norm(fd), np.linalg.norm(g), FLOOR)
        errors[name] = float(np.linalg.norm(fd - g) / den)
    return errors, crossings


def pattern(*arrays):
    return tuple(np.asarray(a).tobytes() for a in arrays)

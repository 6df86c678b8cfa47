import numpy as np
import pytest


def finite_difference(loss_fn, tensors, eps=1e-6):
    """Central-difference gradients of loss_fn() w.r.t. each tensor entry."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t)
        it = np.nditer(t, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = t[i]
            h = eps * max(1.0, abs(float(orig)))
            t[i] = orig + h
            lp = loss_fn()
            t[i] = orig - h
            lm = loss_fn()
            t[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, fd):
    worst = 0.0
    for ga, gf in zip(analytic, fd):
        scale = max(float(np.max(np.abs(gf))), 1e-8)
        worst = max(worst, float(np.max(np.abs(np.asarray(ga, dtype=np.float64) - gf))) / scale)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)

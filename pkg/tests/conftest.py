import numpy as np
import pytest

from kklobs.diffcore import evaluate


def fd_gradient(graph, bindings, name, h=1e-5):
    """Central-difference gradient of a scalar graph w.r.t. one leaf."""
    base = np.asarray(bindings[name], dtype=np.float64)
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    bflat = base.reshape(-1)
    for i in range(bflat.size):
        for sign in (+1, -1):
            pert = base.copy().reshape(-1)
            pert[i] = bflat[i] + sign * h
            b = dict(bindings)
            b[name] = pert.reshape(base.shape)
            val = float(evaluate(graph, b))
            flat[i] += sign * val
    return out / (2.0 * h)


def fd_jvp(graph, bindings, name, direction, h=1e-5):
    """Central-difference directional derivative of a graph output."""
    base = np.asarray(bindings[name], dtype=np.float64)
    bp = dict(bindings)
    bp[name] = base + h * direction
    bm = dict(bindings)
    bm[name] = base - h * direction
    return (evaluate(graph, bp) - evaluate(graph, bm)) / (2.0 * h)


def rel_err(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    denom = max(float(np.abs(b).max()), 1e-12)
    return float(np.abs(a - b).max()) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

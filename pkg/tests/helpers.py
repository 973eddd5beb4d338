"""Shared finite-difference checking for the unit and acceptance suites."""

import numpy as np

from tvrn import tensor as T
from tvrn.tensor import Tensor


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def tape_grads(f, inputs):
    """Gradients of scalar ``f(*inputs)`` with respect to every input."""
    with T.Tape() as tape:
        tape.watch(*inputs)
        out = f(*inputs)
    return tape.gradient(out, inputs)


def fd_grads(f, inputs, eps=1e-6):
    grads = []
    for i, x in enumerate(inputs):
        def g(v, i=i):
            args = list(inputs)
            args[i] = v
            return f(*args)
        grads.append(T.fd_gradient(g, x, eps))
    return grads


def grad_errors(f, arrays, eps=1e-6):
    """Relative errors between tape and central-difference gradients (float64)."""
    with T.default_dtype(np.float64):
        inputs = [Tensor(a) for a in arrays]
        analytic = tape_grads(f, inputs)
        numeric = fd_grads(f, inputs, eps)
    return [T.relative_error(a, n) for a, n in zip(analytic, numeric)]


def directional_error(f, arrays, rng, eps=1e-5, directions=3):
    """Relative error of the tape gradient projected on random directions.

    Used for composites too large for per-element differences.
    """
    with T.default_dtype(np.float64):
        inputs = [Tensor(a) for a in arrays]
        analytic = tape_grads(f, inputs)
        worst = 0.0
        for _ in range(directions):
            us = [rng.standard_normal(x.shape) for x in inputs]
            exact = sum(float(np.sum(g * u)) for g, u in zip(analytic, us))

            def along(t):
                s = t.data.reshape(())
                return f(*[Tensor(x.data + float(s) * u) for x, u in zip(inputs, us)])

            numeric = T.fd_gradient(along, Tensor(np.zeros(())), eps).item()
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-12))
    return worst


def to64(module):
    """Cast a module's parameters to float64 in place for gradient checks."""
    for p in module.parameters():
        p.data = p.data.astype(np.float64)
    return module


def smooth_leaky_relu(a, slope=0.1):
    """C-infinity stand-in for leaky ReLU so deep composites have no kinks under FD."""
    return a * (T.sigmoid(a * 20.0) * (1.0 - slope) + slope)


# op tables shared by the unit and acceptance gradient suites
UNARY = {
    "exp": T.exp,
    "sigmoid": T.sigmoid,
    "leaky_relu": T.leaky_relu,
    "softplus": T.softplus,
    "neg": T.neg,
    "clamp": lambda t: T.clamp(t, -0.5, 0.5),
    "absolute": T.absolute,
    "upsample": T.upsample2x,
    "avg_pool": T.avg_pool2x,
    "gap": T.global_avg_pool,
    "reshape": lambda t: T.reshape(t, (4, 8)),
    "take": lambda t: T.take(t, (slice(None), slice(None), slice(1, 3))),
    "take_repeated": lambda t: T.take(t, (np.array([0, 0, 1]),)),
    "scalar_mul": lambda t: T.mul(t, 1.7),
    "concat": lambda t: T.concat([t, T.mul(t, 2.0)], axis=1),
    "stack": lambda t: T.stack([t, T.exp(t)], axis=0),
    "spatial_linear": lambda t: T.spatial_linear(
        t, [np.arange(16.0).reshape(16, 1) * np.ones((1, 16)) / 100 + np.eye(16)] * 2),
}


BINARY = {
    "add": T.add,
    "sub": T.sub,
    "hadamard": T.mul,
    "l1": lambda a, b: T.l1(a, b),
    "l2": lambda a, b: T.l2(a, b),
}

"""Finite-difference comparison for anything built from ``sdfa.nn`` ops."""
from __future__ import annotations

import numpy as np

from oracles import central_difference, rel_error
from sdfa import nn


def _reset(leaves):
    for t in leaves:
        if isinstance(t, nn.Param):
            t.zero_grad()
        else:
            t.grad = None


def analytic_grads(forward, leaves, upstream):
    _reset(leaves)
    with nn.Tape() as tape:
        out = forward()
        tape.backward(out, upstream)
    return [np.zeros_like(t.data) if t.grad is None else np.array(t.grad, dtype=np.float64) for t in leaves]


def worst_relative_error(forward, leaves, rng, samples_per_leaf=6, step=1e-4, floor=1e-6):
    """Largest relative gap between tape gradients and central differences.

    The scalar being differentiated is ``sum(forward() * R)`` for a fixed
    random ``R``, so every output element contributes.
    """
    with nn.Tape():
        shape = forward().shape
    upstream = rng.standard_normal(shape)
    grads = analytic_grads(forward, leaves, upstream)

    def scalar():
        return float(np.sum(forward().data * upstream))

    worst = 0.0
    for leaf, grad in zip(leaves, grads):
        for _ in range(samples_per_leaf):
            idx = tuple(int(rng.integers(n)) for n in leaf.data.shape)
            numeric = central_difference(scalar, leaf.data, idx, step)
            worst = max(worst, rel_error(grad[idx], numeric, floor))
    return worst

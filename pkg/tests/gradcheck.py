"""Finite-difference gradient checking shared by the unit and acceptance tests.

The analytic gradient runs in the dtype under test (float32 by default).
The numeric side always evaluates a float64 twin of the same computation,
so finite-difference roundoff does not scale with the loss magnitude and
the comparison isolates the backward implementation itself.

Comparison criterion: |analytic - numeric| <= rtol*max(|analytic|,
|numeric|) + atol, i.e. relative error with an absolute floor for entries
whose gradient is near zero.  Pinned tolerances:

    float32 pipeline: h=1e-3, rtol=1e-3, atol=1e-4
    float64 pipeline: h=1e-5, rtol=1e-6, atol=1e-9
"""

import numpy as np

from asff_lab import autograd as ag
from asff_lab.autograd import Tensor

SETTINGS = {
    np.dtype(np.float32): dict(h=1e-3, rtol=1e-3, atol=1e-4),
    np.dtype(np.float64): dict(h=1e-5, rtol=1e-6, atol=1e-9),
}


def numeric_grads(fn, tensors, h):
    """Central finite differences of the scalar ``fn()`` w.r.t. each tensor.

    ``fn`` must rebuild the forward pass from the tensors' current data;
    entries are perturbed in place and restored.
    """
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn()
            flat[i] = orig - h
            f_minus = fn()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g.reshape(t.shape))
    return grads


def max_violation(analytic, numeric, rtol, atol):
    """Largest amount by which |a-n| exceeds rtol*max(|a|,|n|) + atol."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    allowed = rtol * np.maximum(np.abs(a), np.abs(n)) + atol
    return float((np.abs(a - n) - allowed).max())


def check_gradients(make_loss, tensors, dtype=np.float32):
    """Assert analytic gradients match central differences on a f64 twin.

    ``make_loss(tensors)`` must build a scalar loss Tensor from the given
    differentiable tensors; it is called once with ``dtype`` working
    copies (analytic side) and repeatedly with float64 copies (numeric
    side).  Returns the worst violation (negative means pass).
    """
    cfg = SETTINGS[np.dtype(dtype)]
    work = [Tensor(t.data.astype(dtype), requires_grad=True) for t in tensors]
    loss = make_loss(work)
    ag.backward(loss, parameters=tuple(work))
    analytic = [p.grad.copy() for p in work]

    shadow = [Tensor(t.data.astype(np.float64), requires_grad=False) for t in tensors]
    numeric = numeric_grads(lambda: make_loss(shadow).item(), shadow, cfg["h"])

    worst = max(
        max_violation(a, n, cfg["rtol"], cfg["atol"])
        for a, n in zip(analytic, numeric)
    )
    assert worst <= 0.0, f"gradient mismatch: worst violation {worst:.3e}"
    return worst


def jittered(rng, shape, dtype, gap=0.05, spread=1.0):
    """Random data whose values are pairwise separated by at least ``gap``.

    Used for operators with kinks (max pooling, elementwise min/max) so a
    finite-difference step cannot cross a tie.
    """
    n = int(np.prod(shape))
    base = (np.arange(n) - n / 2) * gap
    vals = base + rng.uniform(0.0, gap * 0.4, size=n) + rng.normal(0.0, spread)
    return rng.permutation(vals).reshape(shape).astype(dtype)

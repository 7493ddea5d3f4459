"""Finite-difference helpers shared by the gradient tests."""

import numpy as np

from splatdeblur import autodiff as ad


def rel_error(a, b, floor=1e-6) -> float:
    """Norm-wise relative error. ``floor`` keeps gradients that are zero in
    exact arithmetic (e.g. a bias shared by every softmax input) from turning
    finite-difference roundoff into a large ratio."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def check(build, leaves, eps=1e-5, probe=None, rng=None, max_entries=None):
    """Compare backward() with central differences.

    ``build()`` returns a Tensor (any shape); it is contracted with a fixed
    random probe so non-scalar outputs get a full Jacobian check. Returns the
    worst relative error over ``leaves``.
    """
    rng = rng or np.random.default_rng(0)
    out = build()
    probe = rng.normal(size=out.shape) if probe is None else probe
    for t in leaves:
        t.grad = None
    ad.backward(ad.tsum(out * probe))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

    def f():
        with ad.no_grad():
            return float(np.sum(build().data * probe))

    worst = 0.0
    for t, g in zip(leaves, analytic):
        idx = None
        if max_entries is not None and t.data.size > max_entries:
            flat = rng.choice(t.data.size, max_entries, replace=False)
            idx = [np.unravel_index(i, t.shape) for i in flat]
        num = ad.numerical_grad(f, t.data, eps, idx)
        if idx is not None:
            sel = tuple(np.array(idx).T)
            worst = max(worst, rel_error(g[sel], num[sel]))
        else:
            worst = max(worst, rel_error(g, num))
    return worst

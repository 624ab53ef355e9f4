"""Central finite-difference helpers shared by the gradient tests."""

import numpy as np


def directional_errors(f, x, grad, rng, n_dirs=50, h=1e-4, support=None):
    """Relative error between ``<grad, u>`` and a central difference of ``f`` along random ``u``.

    ``support`` restricts directions to a boolean/index subset of ``x``.
    """
    errs = []
    for _ in range(n_dirs):
        u = rng.standard_normal(np.shape(x))
        if support is not None:
            u = np.where(support, u, 0.0)
        u /= np.linalg.norm(u)
        fd = (f(x + h * u) - f(x - h * u)) / (2 * h)
        an = float(np.sum(grad * u))
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    return np.array(errs)

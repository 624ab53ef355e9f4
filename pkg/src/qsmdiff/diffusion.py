"""Noise schedule, forward noising, DDPM/DDIM reverse steps and patchwise denoising.

Timesteps are 1-based (``t = 1..T``); ``alpha_bar(0)`` is defined as 1 so the
update formulas extend to the last step without special cases.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .exceptions import CapabilityError, ParameterError, ScheduleError
from .patches import extract, scatter_add


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_start: float
    beta_end: float
    kind: str = "linear"

    @property
    def T(self):
        return len(self.beta)

    def abar(self, t):
        """``alpha_bar`` at integer step(s) ``t``, with ``abar(0) == 1``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ParameterError(f"timestep out of range 0..{self.T}: {t}")
        padded = np.concatenate([[1.0], self.alpha_bar])
        out = padded[t]
        return float(out) if out.ndim == 0 else out

    def _check_t(self, t):
        if not 1 <= int(t) <= self.T:
            raise ParameterError(f"timestep must be in 1..{self.T}, got {t}")
        return int(t)


def make_schedule(T=1000, beta_start=1e-4, beta_end=0.02, kind="linear"):
    """Linear beta schedule and the derived alpha, alpha-bar and ancestral sigma tables."""
    if kind != "linear":
        raise ParameterError(f"unknown schedule kind {kind!r}")
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    abar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt(beta * (1.0 - abar_prev) / (1.0 - alpha_bar))
    return NoiseSchedule(beta, alpha, alpha_bar, sigma, float(beta_start), float(beta_end), kind)


def ddim_timesteps(T, n_steps):
    """``n_steps`` uniformly spaced integer timesteps from ``T`` down to 1."""
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    n_steps = min(int(n_steps), int(T))
    ts = np.unique(np.round(np.linspace(T, 1, n_steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def _shape_like(coef, x):
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (np.ndim(x) - coef.ndim))


def q_sample(x0, eps, t, sched):
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``; ``t`` may be an array over the batch axis."""
    ab = _shape_like(sched.abar(t), x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t, eps_hat, t, sched):
    """Posterior-mean estimate of the clean image from a noise prediction."""
    ab = _shape_like(sched.abar(t), x_t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddpm_step(x_t, eps_hat, t, z, sched):
    """Ancestral DDPM update from ``t`` to ``t - 1``; no noise is added at ``t = 1``."""
    t = sched._check_t(t)
    a, ab = sched.alpha[t - 1], sched.alpha_bar[t - 1]
    mean = (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if t == 1 or z is None:
        return mean
    return mean + sched.sigma[t - 1] * z


def _ddim_variance(t, t_prev, eta, sched):
    ab_t, ab_p = sched.abar(t), sched.abar(t_prev)
    return eta**2 * (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)


def ddim_sigma(t, t_prev, eta, sched):
    return float(np.sqrt(max(_ddim_variance(t, t_prev, eta, sched), 0.0)))


def ddim_step(x_t, eps_hat, t, t_prev, eta, sched, z=None):
    """DDIM update from ``t`` to ``t_prev < t``; ``eta = 0`` is deterministic.

    ``z`` is standard normal noise of the same shape, required when the
    step variance is nonzero.
    """
    t = sched._check_t(t)
    if not 0 <= t_prev < t:
        raise ParameterError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ParameterError(f"eta must be in [0, 1], got {eta}")
    ab_p = sched.abar(t_prev)
    var = _ddim_variance(t, t_prev, eta, sched)
    dir_var = 1.0 - ab_p - var
    if var < -1e-12 or dir_var < -1e-12:
        raise ScheduleError(f"DDIM variance outside [0, 1 - abar] at t={t}, t_prev={t_prev}")
    sig = np.sqrt(max(var, 0.0))
    x0 = predict_x0(x_t, eps_hat, t, sched)
    out = np.sqrt(ab_p) * x0 + np.sqrt(max(dir_var, 0.0)) * eps_hat
    if sig > 0:
        if z is None:
            raise ParameterError("ddim_step with eta > 0 needs noise z")
        out = out + sig * z
    return out


# -------------------------------------------------------------- denoisers


class GaussianDenoiser:
    """Exact noise predictor for an i.i.d. ``N(mu, s^2)`` voxel prior.

    Because the prior is voxel-separable, the conditional-expectation
    predictor is an affine function of ``x_t`` applied voxelwise and its
    input Jacobian is a scalar multiple of the identity.
    """

    supports_vjp = True

    def __init__(self, mu, s, sched):
        if not s > 0:
            raise ParameterError(f"prior std must be positive, got {s}")
        self.mu = float(mu)
        self.s = float(s)
        self.sched = sched

    def jacobian_scale(self, t):
        ab = self.sched.abar(t)
        return np.sqrt(1.0 - ab) / (ab * self.s**2 + 1.0 - ab)

    def predict(self, x, t):
        ab = _shape_like(self.sched.abar(t), x)
        j = _shape_like(self.jacobian_scale(t), x)
        return j * (x - np.sqrt(ab) * self.mu)

    def input_vjp(self, x, t, u):
        return _shape_like(self.jacobian_scale(t), u) * u


class ZeroDenoiser:
    """Predicts zero noise everywhere."""

    supports_vjp = True

    def predict(self, x, t):
        return np.zeros_like(x)

    def input_vjp(self, x, t, u):
        return np.zeros_like(u)


# ------------------------------------------------------ patchwise stepping


def _chunks(n, size):
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


def _run_chunks(fn, chunks, threads):
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def patch_denoise_step(x_t, layout, denoiser, t, chunk_size=4, threads=1):
    """Full-size noise estimate: per-patch predictions reassembled and divided by the crop mask.

    Patches are evaluated in fixed-size chunks in index order, so the result
    does not depend on ``threads``.
    """
    x_t = np.asarray(x_t)
    patches = extract(x_t, layout)

    def run(idx):
        batch = np.stack([patches[i] for i in idx])
        return denoiser.predict(batch, np.full(len(idx), t))

    outs = _run_chunks(run, _chunks(len(patches), chunk_size), threads)
    eps_patches = [p for out in outs for p in out]
    return scatter_add(eps_patches, layout) / layout.crop_mask


def patch_denoise_vjp(x_t, layout, denoiser, t, cotangent, chunk_size=4, threads=1):
    """Vector-Jacobian product of :func:`patch_denoise_step` with respect to ``x_t``."""
    if not getattr(denoiser, "supports_vjp", False):
        raise CapabilityError("denoiser does not provide an input VJP")
    x_t = np.asarray(x_t)
    patches = extract(x_t, layout)
    u_patches = extract(np.asarray(cotangent) / layout.crop_mask, layout)

    def run(idx):
        xb = np.stack([patches[i] for i in idx])
        ub = np.stack([u_patches[i] for i in idx])
        return denoiser.input_vjp(xb, np.full(len(idx), t), ub)

    outs = _run_chunks(run, _chunks(len(patches), chunk_size), threads)
    return scatter_add([p for out in outs for p in out], layout)

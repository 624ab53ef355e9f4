"""Measurement-guided sampling: dipole, translation and TV guidance on the x0 estimate.

All arrays in this module live in normalized model units (ppm / chi_scale).
The model grid may differ from the measurement grid; ``S`` denotes trilinear
resampling from the former to the latter.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from ._validation import check_positive, check_random_state
from .diffusion import ddim_step, ddim_timesteps, patch_denoise_step, patch_denoise_vjp, predict_x0
from .dipole import apply_kernel, dipole_kernel, tkd_invert
from .exceptions import CapabilityError, ParameterError
from .patches import plan_patches
from .volume import NormalizationSpec, Volume, resample_array, resample_array_adjoint

logger = logging.getLogger(__name__)

JACOBIAN_MODES = ("frozen", "exact")
GRAD_SCALINGS = ("none", "residual_norm")
STEP_RULES = ("x0", "xt")
BACKPROJECTIONS = ("interpolate", "adjoint")


@dataclass(frozen=True)
class GuidanceConfig:
    """Weights and sampler settings for guided inversion.

    ``grad_scaling="residual_norm"`` differentiates the square root of each
    loss (``||r||`` for the data terms, ``sqrt(TV)`` for the smoothness term),
    so a unit weight moves the estimate by a bounded amount whatever the
    residual size. ``"none"`` uses the squared losses as they are.

    ``step_rule`` decides how the weighted gradient ``G`` with respect to
    ``x_t`` corrects the unconditional update ``x_{t-1}``:

    * ``"xt"``: ``x_{t-1} - G``.
    * ``"x0"``: ``x_{t-1} - step_budget * (abar_{t-1} - abar_t) * sqrt(abar_{t-1} abar_t) * G``.
      In frozen mode this is a gradient step on the clean estimate carried
      into ``x_{t-1}`` by the DDIM map, with per-step sizes proportional to
      the drop in noise level. Those drops sum to ~1 over any timestep
      subsequence, so ``step_budget`` is the total number of full-weight
      steps spent regardless of ``ddim_steps``.

    When the measurement grid is coarser than the model grid, the adjoint of
    trilinear downsampling only touches the model voxels that sit on
    measurement sample points (an odd integer factor samples one voxel in
    three and ignores the rest). ``backprojection="interpolate"`` carries
    measurement-space gradients back with trilinear upsampling instead, so
    the correction is spread smoothly over the skipped voxels. Under
    ``residual_norm`` the data terms are further scaled by
    ``sqrt(n_measured / n_model)`` so a coarse measurement does not push
    each model voxel harder than a full-resolution one would. Both
    adjustments vanish when the grids coincide.
    """

    xi1: float = 10.0
    xi2: float = 2.5
    lam: float = 0.1
    tkd_threshold: float = 0.1
    jacobian_mode: str = "frozen"
    tv_epsilon: float = 1e-6
    ddim_steps: int = 200
    eta: float = 0.0
    grad_scaling: str = "residual_norm"
    step_rule: str = "x0"
    step_budget: float = 50.0
    backprojection: str = "interpolate"

    def __post_init__(self):
        for name in ("xi1", "xi2", "lam"):
            check_positive(getattr(self, name), name, allow_zero=True)
        check_positive(self.tkd_threshold, "tkd_threshold")
        check_positive(self.tv_epsilon, "tv_epsilon")
        if self.jacobian_mode not in JACOBIAN_MODES:
            raise ParameterError(f"jacobian_mode must be one of {JACOBIAN_MODES}")
        if self.grad_scaling not in GRAD_SCALINGS:
            raise ParameterError(f"grad_scaling must be one of {GRAD_SCALINGS}")
        if self.step_rule not in STEP_RULES:
            raise ParameterError(f"step_rule must be one of {STEP_RULES}")
        check_positive(self.step_budget, "step_budget")
        if self.backprojection not in BACKPROJECTIONS:
            raise ParameterError(f"backprojection must be one of {BACKPROJECTIONS}")
        if int(self.ddim_steps) != self.ddim_steps or self.ddim_steps < 1:
            raise ParameterError("ddim_steps must be a positive integer")
        if not 0.0 <= self.eta <= 1.0:
            raise ParameterError("eta must be in [0, 1]")

    @property
    def unguided(self):
        return self.xi1 == 0 and self.xi2 == 0 and self.lam == 0


@dataclass(eq=False)
class Measurement:
    """Local field, matched kernel and TKD estimate on the measurement grid.

    ``model_dims`` is the grid the prior operates on; ``pad`` gives the
    ``(before, after)`` zero padding per axis added around it for patching.
    """

    phi: np.ndarray
    kernel: np.ndarray
    x_tkd: np.ndarray
    model_dims: tuple
    mask: np.ndarray = None
    pad: tuple = ((0, 0), (0, 0), (0, 0))

    def __post_init__(self):
        shapes = {np.shape(self.phi), np.shape(self.kernel), np.shape(self.x_tkd)}
        if len(shapes) != 1:
            raise ParameterError(f"phi, kernel and x_tkd must share dims, got {shapes}")
        if self.mask is not None and np.shape(self.mask) != np.shape(self.phi):
            raise ParameterError("mask dims must match phi")
        self.model_dims = tuple(int(n) for n in self.model_dims)

    @property
    def dims(self):
        return tuple(np.shape(self.phi))

    @property
    def padded_dims(self):
        return tuple(n + a + b for n, (a, b) in zip(self.model_dims, self.pad))

    def _crop(self, x):
        if np.shape(x) != self.padded_dims:
            raise ParameterError(f"x0 estimate has dims {np.shape(x)}, expected {self.padded_dims}")
        return x[tuple(slice(a, a + n) for n, (a, _) in zip(self.model_dims, self.pad))]

    def S(self, x):
        return resample_array(self._crop(x), self.dims)

    def S_adjoint(self, y):
        return np.pad(resample_array_adjoint(y, self.model_dims), self.pad)

    def upsample(self, y):
        """Trilinear interpolation from the measurement grid back to the padded model grid."""
        return np.pad(resample_array(y, self.model_dims), self.pad)

    @property
    def density(self):
        """Measured voxels per model voxel (1 when the grids coincide)."""
        return float(np.prod(self.dims)) / float(np.prod(self.model_dims))

    def masked(self, r):
        return r if self.mask is None else r * self.mask

    @classmethod
    def from_field(cls, phi, kernel=None, tkd_threshold=0.1, model_dims=None, norm=None, pad=None):
        """Build from a ppm-valued field Volume; TKD is computed here."""
        norm = norm or NormalizationSpec()
        if kernel is None:
            kernel = dipole_kernel(phi.dims, phi.voxel_size, phi.b0_dir)
        x_tkd = tkd_invert(phi, kernel, tkd_threshold)
        return cls(
            phi.data / norm.chi_scale,
            kernel.values,
            x_tkd.data / norm.chi_scale,
            model_dims or phi.dims,
            phi.mask,
            pad or ((0, 0),) * 3,
        )


def _scaled(loss, grad, scaling):
    if scaling == "residual_norm" and loss > 0:
        return grad / (2.0 * np.sqrt(loss))
    return grad


def dipinv_loss_grad(x0_hat, meas, back=None):
    """``||phi - F^-1 D F S x0||^2`` over the mask, and its gradient in ``x0``.

    ``back`` replaces ``S^T`` when mapping the measurement-space gradient to
    the model grid; the default gives the exact gradient.
    """
    back = back or meas.S_adjoint
    r = meas.masked(meas.phi - apply_kernel(meas.S(x0_hat), meas.kernel))
    loss = float(np.sum(r * r))
    grad = -2.0 * back(apply_kernel(r, meas.kernel))
    return loss, grad


def trans_loss_grad(x0_hat, meas, back=None):
    """``||x_tkd - S x0||^2`` over the mask, and its gradient in ``x0``."""
    back = back or meas.S_adjoint
    r = meas.masked(meas.x_tkd - meas.S(x0_hat))
    return float(np.sum(r * r)), -2.0 * back(r)


def tv_loss_grad(x0_hat, epsilon=1e-6):
    """Smoothed isotropic TV with forward differences and replicate boundary."""
    x = np.asarray(x0_hat, dtype=np.float64)
    diffs = []
    for axis in range(3):
        d = np.zeros_like(x)
        lead = [slice(None)] * 3
        lead[axis] = slice(0, -1)
        d[tuple(lead)] = np.diff(x, axis=axis)
        diffs.append(d)
    mag = np.sqrt(diffs[0] ** 2 + diffs[1] ** 2 + diffs[2] ** 2 + epsilon**2)
    grad = np.zeros_like(x)
    for axis, d in enumerate(diffs):
        w = d / mag
        grad -= w
        head = [slice(None)] * 3
        tail = [slice(None)] * 3
        head[axis] = slice(1, None)
        tail[axis] = slice(0, -1)
        grad[tuple(head)] += w[tuple(tail)]
    return float(mag.sum()), grad


def guidance_gradient(x0_hat, meas, cfg):
    """Weighted gradient in ``x0`` and the three loss values."""
    grad = np.zeros(np.shape(x0_hat))
    losses = {}
    back = meas.upsample if cfg.backprojection == "interpolate" else meas.S_adjoint
    l1, g1 = dipinv_loss_grad(x0_hat, meas, back)
    l2, g2 = trans_loss_grad(x0_hat, meas, back)
    losses["dipinv"], losses["trans"] = l1, l2
    data_weight = np.sqrt(meas.density) if cfg.grad_scaling == "residual_norm" else 1.0
    if cfg.xi1:
        grad += cfg.xi1 * data_weight * _scaled(l1, g1, cfg.grad_scaling)
    if cfg.xi2:
        grad += cfg.xi2 * data_weight * _scaled(l2, g2, cfg.grad_scaling)
    l3, g3 = tv_loss_grad(x0_hat, cfg.tv_epsilon)
    losses["tv"] = l3
    if cfg.lam:
        grad += cfg.lam * _scaled(l3, g3, cfg.grad_scaling)
    return grad, losses


def step_weight(t, t_prev, cfg, sched):
    """Factor multiplying the ``x_t`` gradient under ``cfg.step_rule``."""
    if cfg.step_rule == "xt":
        return 1.0
    ab_t, ab_p = sched.abar(t), sched.abar(t_prev)
    return cfg.step_budget * (ab_p - ab_t) * np.sqrt(ab_p * ab_t)


def conditional_step(x_t, x_prev, eps_full, t, meas, cfg, denoiser, layout, sched, threads=1, t_prev=None):
    """Apply the guided correction to an unconditional update ``x_prev``.

    Gradients are taken with respect to ``x_t`` through the x0 estimate. In
    ``frozen`` mode the noise prediction is treated as constant in ``x_t``;
    ``exact`` mode adds the denoiser's input VJP routed through the patch
    assembly. ``t_prev`` defaults to ``t - 1``.
    """
    if cfg.jacobian_mode == "exact" and not getattr(denoiser, "supports_vjp", False):
        raise CapabilityError("exact jacobian mode needs a denoiser with input_vjp")
    t_prev = t - 1 if t_prev is None else t_prev
    x0_hat = predict_x0(x_t, eps_full, t, sched)
    g, losses = guidance_gradient(x0_hat, meas, cfg)
    if cfg.unguided:
        return x_prev, losses
    ab = sched.abar(t)
    if cfg.jacobian_mode == "exact":
        g = g - np.sqrt(1.0 - ab) * patch_denoise_vjp(x_t, layout, denoiser, t, g, threads=threads)
    return x_prev - step_weight(t, t_prev, cfg, sched) * g / np.sqrt(ab), losses


@dataclass
class StepRecord:
    t: int
    dipinv: float
    trans: float
    tv: float


@dataclass
class SampleResult:
    chi: Volume
    trace: list = field(default_factory=list)
    x_tkd: Volume = None


def sample_loop(x_T, meas, denoiser, sched, cfg, layout, rng=None, threads=1):
    """Run the guided DDIM loop from ``x_T``; returns the final x0 estimate and per-step losses.

    With ``meas=None`` this is the plain unconditional sampler.
    """
    rng = check_random_state(rng)
    ts = ddim_timesteps(sched.T, cfg.ddim_steps)
    x = np.asarray(x_T, dtype=np.float64)
    x0_hat = x
    trace = []
    with threadpool_limits(limits=1, user_api="blas"):
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps = patch_denoise_step(x, layout, denoiser, t, threads=threads)
            z = rng.standard_normal(x.shape) if cfg.eta > 0 else None
            x_prev = ddim_step(x, eps, t, t_prev, cfg.eta, sched, z)
            x0_hat = predict_x0(x, eps, t, sched)
            if meas is not None:
                x_prev, losses = conditional_step(x, x_prev, eps, t, meas, cfg, denoiser, layout, sched, threads,
                                                  t_prev=t_prev)
                trace.append(StepRecord(t, losses["dipinv"], losses["trans"], losses["tv"]))
            x = x_prev
    return x0_hat, trace


def model_grid_dims(meas_dims, meas_voxel, model_voxel=(1.0, 1.0, 1.0)):
    """Grid on which the prior runs: measurement extent at the model's voxel size."""
    return tuple(max(1, int(round(n * v / m))) for n, v, m in zip(meas_dims, meas_voxel, model_voxel))


def symmetric_pad(dims, patch_size):
    pads = []
    for n, d in zip(dims, np.broadcast_to(patch_size, 3)):
        extra = max(int(d) - n, 0)
        pads.append((extra // 2, extra - extra // 2))
    return tuple(pads)


def sample(phi, model, cfg=None, patch_size=16, overlap=8, seed=0, kernel=None, model_dims=None,
           model_voxel=(1.0, 1.0, 1.0), threads=1):
    """Guided inversion of a ppm-valued local field with a trained denoiser.

    The prior runs on ``model_dims`` (default: the measurement extent at
    ``model_voxel``), zero-padded symmetrically when smaller than a patch.
    Returns the susceptibility estimate in ppm on the model grid.
    """
    cfg = cfg or GuidanceConfig()
    if model_dims is None:
        model_dims = model_grid_dims(phi.dims, phi.voxel_size, model_voxel)
    pad = symmetric_pad(model_dims, patch_size)
    if any(a or b for a, b in pad):
        logger.warning("model grid %s is smaller than the patch size; zero-padding by %s", model_dims, pad)
    meas = Measurement.from_field(phi, kernel, cfg.tkd_threshold, model_dims, model.norm, pad)
    layout = plan_patches(meas.padded_dims, patch_size, overlap)
    rng = np.random.default_rng(seed)
    x_T = rng.standard_normal(meas.padded_dims)
    x0_hat, trace = sample_loop(x_T, meas, model, model.sched, cfg, layout, rng, threads)
    x0_hat = meas._crop(x0_hat)
    n_clip = int(np.count_nonzero(np.abs(x0_hat) > 1))
    if n_clip:
        logger.info("clipping %d voxels of the final estimate to [-1, 1]", n_clip)
    chi = np.clip(x0_hat, -1.0, 1.0) * model.norm.chi_scale
    voxel = tuple(v * n / m for v, n, m in zip(phi.voxel_size, phi.dims, model_dims))
    mask = None
    if phi.mask is not None:
        mask = resample_array(phi.mask.astype(float), model_dims) >= 0.5
    x_tkd = Volume(meas.x_tkd * model.norm.chi_scale, phi.voxel_size, phi.b0_dir, phi.mask)
    return SampleResult(Volume(chi, voxel, phi.b0_dir, mask), trace, x_tkd)


def write_trace(trace, path):
    with open(path, "w") as fh:
        fh.write("# t dipinv trans tv\n")
        for rec in trace:
            fh.write(f"{rec.t} {rec.dipinv:.9g} {rec.trans:.9g} {rec.tv:.9g}\n")

"""Estimator-style wrappers: TKD as a stateless transformer and the diffusion inverter.

Both follow scikit-learn conventions (constructor arguments stored verbatim,
``get_params``/``set_params``, fitted state in trailing-underscore attributes)
but operate on :class:`~qsmdiff.volume.Volume` objects rather than 2D arrays.
"""

import logging

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive
from .denoiser import TrainHyper, build_dataset, load_model, save_model, train
from .diffusion import make_schedule
from .dipole import dipole_kernel, tkd_invert
from .exceptions import ParameterError
from .guidance import GuidanceConfig, sample
from .metrics import psnr
from .network import DenoiserArch
from .volume import NormalizationSpec, Volume

logger = logging.getLogger(__name__)


def _as_volume(phi, name="phi"):
    if not isinstance(phi, Volume):
        raise ParameterError(f"{name} must be a Volume, got {type(phi).__name__}")
    return phi


class TKDInversion(TransformerMixin, BaseEstimator):
    """Thresholded k-space division. ``fit`` only validates parameters."""

    def __init__(self, threshold=0.1):
        self.threshold = threshold

    def fit(self, X=None, y=None):
        check_positive(self.threshold, "threshold")
        self.is_fitted_ = True
        return self

    def transform(self, X, kernel=None):
        check_is_fitted(self)
        phi = _as_volume(X)
        if kernel is None:
            kernel = dipole_kernel(phi.dims, phi.voxel_size, phi.b0_dir)
        return tkd_invert(phi, kernel, self.threshold)


class QSMDiffInverter(BaseEstimator):
    """Patch-diffusion prior trained on susceptibility maps, inverted with field guidance.

    ``fit(volumes)`` trains the noise predictor on patches of ppm-valued
    volumes. ``predict(phi)`` returns the guided susceptibility estimate in ppm.
    Training-time patching uses ``patch_size``/``stride``; inference uses
    ``patch_size``/``overlap``.
    """

    def __init__(
        self,
        patch_size=48,
        stride=32,
        overlap=8,
        base_width=32,
        num_blocks=4,
        time_embed_dim=32,
        chi_scale=0.2,
        T=1000,
        beta_start=1e-4,
        beta_end=0.02,
        learning_rate=1e-4,
        batch_size=4,
        n_steps=1000,
        max_patches=None,
        xi1=10.0,
        xi2=2.5,
        lam=0.1,
        tkd_threshold=0.1,
        jacobian_mode="frozen",
        grad_scaling="residual_norm",
        step_rule="x0",
        step_budget=50.0,
        backprojection="interpolate",
        tv_epsilon=1e-6,
        ddim_steps=200,
        eta=0.0,
        model_voxel=(1.0, 1.0, 1.0),
        random_state=0,
        n_threads=1,
    ):
        self.patch_size = patch_size
        self.stride = stride
        self.overlap = overlap
        self.base_width = base_width
        self.num_blocks = num_blocks
        self.time_embed_dim = time_embed_dim
        self.chi_scale = chi_scale
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.max_patches = max_patches
        self.xi1 = xi1
        self.xi2 = xi2
        self.lam = lam
        self.tkd_threshold = tkd_threshold
        self.jacobian_mode = jacobian_mode
        self.grad_scaling = grad_scaling
        self.step_rule = step_rule
        self.step_budget = step_budget
        self.backprojection = backprojection
        self.tv_epsilon = tv_epsilon
        self.ddim_steps = ddim_steps
        self.eta = eta
        self.model_voxel = model_voxel
        self.random_state = random_state
        self.n_threads = n_threads

    def guidance_config(self):
        return GuidanceConfig(
            xi1=self.xi1,
            xi2=self.xi2,
            lam=self.lam,
            tkd_threshold=self.tkd_threshold,
            jacobian_mode=self.jacobian_mode,
            tv_epsilon=self.tv_epsilon,
            ddim_steps=self.ddim_steps,
            eta=self.eta,
            grad_scaling=self.grad_scaling,
            step_rule=self.step_rule,
            step_budget=self.step_budget,
            backprojection=self.backprojection,
        )

    def fit(self, X, y=None, callback=None):
        """Train on a list of ppm-valued Volumes; ``y`` is ignored."""
        volumes = [_as_volume(v, "volume") for v in X]
        norm = NormalizationSpec(self.chi_scale)
        dataset = build_dataset(volumes, self.patch_size, self.stride, norm)
        if self.max_patches is not None and len(dataset) > self.max_patches:
            dataset.patches = dataset.patches[: int(self.max_patches)]
        logger.info("training on %d patches", len(dataset))
        arch = DenoiserArch(self.base_width, self.num_blocks, self.time_embed_dim)
        sched = make_schedule(self.T, self.beta_start, self.beta_end)
        hyper = TrainHyper(lr=self.learning_rate, batch=self.batch_size, steps=self.n_steps,
                           seed=self.random_state)
        self.model_ = train(dataset, arch, sched, hyper, norm, callback=callback)
        self.n_patches_ = len(dataset)
        self.loss_curve_ = list(self.model_.train_meta["losses"])
        return self

    def sample(self, phi, kernel=None, seed=None):
        """Full sampling result: estimate, per-step loss trace and the TKD start."""
        check_is_fitted(self, "model_")
        phi = _as_volume(phi)
        seed = self.random_state if seed is None else seed
        return sample(phi, self.model_, self.guidance_config(), self.patch_size, self.overlap, seed=seed,
                      kernel=kernel, model_voxel=self.model_voxel, threads=self.n_threads)

    def predict(self, X, kernel=None, seed=None):
        return self.sample(X, kernel, seed).chi

    def save(self, path):
        check_is_fitted(self, "model_")
        save_model(self.model_, path)

    @classmethod
    def load(cls, path, **params):
        """Wrap a stored model; architecture and schedule come from the file."""
        model = load_model(path)
        arch = model.arch
        est = cls(
            base_width=arch.base_width,
            num_blocks=arch.num_blocks,
            time_embed_dim=arch.time_embed_dim,
            chi_scale=model.norm.chi_scale,
            T=model.sched.T,
            beta_start=model.sched.beta_start,
            beta_end=model.sched.beta_end,
            **params,
        )
        est.model_ = model
        return est

    def score(self, X, y, mask=None):
        """PSNR of ``predict(X)`` against the reference Volume ``y``."""
        pred = self.predict(X)
        ref = _as_volume(y, "y")
        return psnr(pred, ref, ref.mask if mask is None else mask)


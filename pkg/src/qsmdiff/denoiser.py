"""Patch dataset, noise-prediction loss, Adam training loop and the QDM model file."""

import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import make_schedule, q_sample
from .exceptions import DatasetError, FormatError, LengthError, NumericError, ParameterError, TrainingError
from .network import DenoiserArch, ResidualDenoiserNet
from .patches import extract, plan_patches_stride
from .volume import NormalizationSpec, normalize

logger = logging.getLogger(__name__)

ZERO_FRACTION_LIMIT = 0.95


@dataclass
class DenoiserModel:
    """Trained noise predictor together with everything needed to use it."""

    net: ResidualDenoiserNet
    sched: object
    norm: NormalizationSpec = field(default_factory=NormalizationSpec)
    train_meta: dict = field(default_factory=dict)

    supports_vjp = True

    @property
    def arch(self):
        return self.net.arch

    @property
    def theta(self):
        return self.net.theta

    def predict(self, x, t):
        return forward_eps(self, x, t)

    def input_vjp(self, x, t, u):
        return self.net.input_vjp(x, t, u).astype(np.float64)


@dataclass
class PatchDataset:
    patches: np.ndarray
    stride: tuple
    exclusion_ratio: float = ZERO_FRACTION_LIMIT

    def __len__(self):
        return len(self.patches)


def build_dataset(volumes, patch_size=48, stride=32, norm=None, exclusion_ratio=ZERO_FRACTION_LIMIT):
    """Normalized training patches on an end-clamped stride grid.

    Patches whose fraction of exactly-zero voxels is strictly greater than
    ``exclusion_ratio`` are dropped.
    """
    norm = norm or NormalizationSpec()
    kept = []
    stride_t = None
    for v in volumes:
        layout = plan_patches_stride(v.dims, patch_size, stride)
        stride_t = tuple(np.broadcast_to(stride, 3).tolist()) if stride_t is None else stride_t
        data = normalize(v, norm).data
        for p in extract(data, layout):
            if np.count_nonzero(p == 0) / p.size > exclusion_ratio:
                continue
            kept.append(np.array(p, dtype=np.float32))
    if not kept:
        raise DatasetError("no patches left after the zero-fraction exclusion rule")
    return PatchDataset(np.stack(kept), stride_t, exclusion_ratio)


def forward_eps(model, x, t):
    """Noise prediction for a patch ``(X, Y, Z)`` or batch ``(N, X, Y, Z)``."""
    x = np.asarray(x)
    single = x.ndim == 3
    out = model.net.forward(x[None] if single else x, t)
    if not np.all(np.isfinite(out)):
        raise NumericError("denoiser produced non-finite output")
    out = out.astype(np.float64)
    return out[0] if single else out


def loss_and_grads(model, x0, eps, t):
    """Mean squared noise-prediction error over all voxels of the batch and its gradient."""
    x0 = np.asarray(x0)
    if len(x0) == 0:
        raise ParameterError("empty batch")
    x_t = q_sample(x0, eps, np.asarray(t), model.sched)
    pred, cache = model.net.forward(x_t, t, keep_cache=True)
    diff = pred - np.asarray(eps, dtype=pred.dtype)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    grad, _ = model.net.backward((2.0 / diff.size) * diff, cache)
    return loss, grad


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-4
    batch: int = 4
    steps: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


class Adam:
    def __init__(self, shape, dtype, hyper):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.h = hyper
        self.k = 0

    def step(self, theta, grad):
        h = self.h
        self.k += 1
        self.m = h.beta1 * self.m + (1 - h.beta1) * grad
        self.v = h.beta2 * self.v + (1 - h.beta2) * grad * grad
        m_hat = self.m / (1 - h.beta1**self.k)
        v_hat = self.v / (1 - h.beta2**self.k)
        theta -= (h.lr * m_hat / (np.sqrt(v_hat) + h.adam_eps)).astype(theta.dtype)


def init_model(arch, sched=None, norm=None, seed=0, dtype=np.float32, zero_head=True):
    sched = sched or make_schedule()
    norm = norm or NormalizationSpec()
    net = ResidualDenoiserNet.initialize(arch, seed=seed, dtype=dtype, zero_head=zero_head)
    return DenoiserModel(net, sched, norm)


def train(dataset, arch=None, sched=None, hyper=None, norm=None, model=None, callback=None):
    """Fit the noise predictor: random patch, uniform step, Gaussian noise, one Adam update per batch."""
    hyper = hyper or TrainHyper()
    if len(dataset) == 0:
        raise DatasetError("empty dataset")
    rng = np.random.default_rng(hyper.seed)
    if model is None:
        init_seed = int(rng.integers(2**31))
        model = init_model(arch or DenoiserArch(), sched, norm, seed=init_seed)
    theta = model.net.theta
    opt = Adam(theta.shape, theta.dtype, hyper)
    losses = []
    t_start = time.perf_counter()
    for step in range(hyper.steps):
        idx = rng.integers(0, len(dataset), size=hyper.batch)
        t = rng.integers(1, model.sched.T + 1, size=hyper.batch)
        x0 = dataset.patches[idx]
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        try:
            loss, grad = loss_and_grads(model, x0, eps, t)
        except NumericError as exc:
            raise TrainingError(f"training diverged at step {step}: {exc}", step=step) from exc
        opt.step(theta, grad)
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
        if step % 100 == 0:
            logger.info("step %d loss %.5f", step, loss)
    model.train_meta = {
        "steps": int(hyper.steps),
        "losses": losses,
        "seconds": time.perf_counter() - t_start,
    }
    return model


# ---------------------------------------------------------------- QDM file

QDM_MAGIC = b"QDM1"
QDM_VERSION = 1
_QDM_HEADER = struct.Struct("<4sIIddfIIIQ")


def save_model(model, path):
    arch = model.arch
    theta = np.asarray(model.theta, dtype="<f4")
    header = _QDM_HEADER.pack(
        QDM_MAGIC,
        QDM_VERSION,
        model.sched.T,
        model.sched.beta_start,
        model.sched.beta_end,
        model.norm.chi_scale,
        arch.base_width,
        arch.num_blocks,
        arch.time_embed_dim,
        theta.size,
    )
    with open(path, "wb") as fh:
        fh.write(header + theta.tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != QDM_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < _QDM_HEADER.size:
        raise LengthError(f"{path}: truncated header")
    _, version, T, b0, b1, chi_scale, F, B, E, count = _QDM_HEADER.unpack_from(blob)
    if version != QDM_VERSION:
        raise FormatError(f"{path}: unsupported QDM version {version}")
    arch = DenoiserArch(F, B, E)
    if count != arch.param_count:
        raise FormatError(f"{path}: parameter count {count} does not match architecture ({arch.param_count})")
    if len(blob) != _QDM_HEADER.size + 4 * count:
        raise LengthError(f"{path}: expected {_QDM_HEADER.size + 4 * count} bytes, found {len(blob)}")
    theta = np.frombuffer(blob, dtype="<f4", offset=_QDM_HEADER.size).astype(np.float32)
    if not np.all(np.isfinite(theta)):
        raise FormatError(f"{path}: non-finite parameters")
    sched = make_schedule(T, b0, b1)
    return DenoiserModel(ResidualDenoiserNet(arch, theta), sched, NormalizationSpec(float(chi_scale)))

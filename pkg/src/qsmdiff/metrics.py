"""PSNR, SSIM and HFEN evaluated inside a mask."""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .exceptions import MetricError, ParameterError

PSNR_PERFECT = math.inf

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11^3 window
LOG_SIGMA = 1.5
LOG_SIZE = 15


def _prepare(pred, ref, mask):
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    ref = np.asarray(getattr(ref, "data", ref), dtype=np.float64)
    if pred.shape != ref.shape:
        raise ParameterError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if mask is None:
        mask = np.ones(ref.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != ref.shape:
        raise ParameterError(f"mask shape {mask.shape} does not match {ref.shape}")
    if not mask.any():
        raise MetricError("empty mask")
    return pred, ref, mask


def _data_range(ref, mask):
    vals = ref[mask]
    return float(vals.max() - vals.min())


def psnr(pred, ref, mask=None):
    """``10 log10(range^2 / MSE)`` with the range of ``ref`` inside the mask."""
    pred, ref, mask = _prepare(pred, ref, mask)
    mse = float(np.mean((pred[mask] - ref[mask]) ** 2))
    if mse == 0.0:
        return PSNR_PERFECT
    rng = _data_range(ref, mask)
    if rng == 0.0:
        raise MetricError("reference is constant inside the mask")
    return 10.0 * math.log10(rng**2 / mse)


def ssim(pred, ref, mask=None, k1=0.01, k2=0.03):
    """Mean local SSIM over the mask with an 11^3 Gaussian window (sigma 1.5)."""
    pred, ref, mask = _prepare(pred, ref, mask)
    if mask.sum() < (2 * SSIM_RADIUS + 1) ** 3:
        raise MetricError("mask is smaller than the SSIM window")
    L = _data_range(ref, mask)
    if L == 0.0:
        raise MetricError("reference is constant inside the mask")
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2

    def blur(a):
        return ndimage.gaussian_filter(a, SSIM_SIGMA, mode="reflect", truncate=SSIM_RADIUS / SSIM_SIGMA)

    mu_x, mu_y = blur(pred), blur(ref)
    sxx = blur(pred * pred) - mu_x * mu_x
    syy = blur(ref * ref) - mu_y * mu_y
    sxy = blur(pred * ref) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean((num / den)[mask]))


def log_kernel(size=LOG_SIZE, sigma=LOG_SIGMA):
    """Zero-sum 3D Laplacian-of-Gaussian kernel."""
    r = np.arange(size) - (size - 1) / 2
    x, y, z = np.meshgrid(r, r, r, indexing="ij")
    r2 = x**2 + y**2 + z**2
    g = np.exp(-r2 / (2 * sigma**2))
    g /= g.sum()
    h = g * (r2 - 3 * sigma**2) / sigma**4
    return h - h.mean()


def hfen(pred, ref, mask=None):
    """Relative LoG-filtered error in percent."""
    pred, ref, mask = _prepare(pred, ref, mask)
    k = log_kernel()
    err = ndimage.convolve(pred - ref, k, mode="nearest")
    base = ndimage.convolve(ref, k, mode="nearest")
    denom = float(np.linalg.norm(base[mask]))
    if denom == 0.0:
        raise MetricError("LoG of the reference vanishes inside the mask")
    return 100.0 * float(np.linalg.norm(err[mask])) / denom


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    hfen: float
    voxels: int

    def to_dict(self):
        d = asdict(self)
        if math.isinf(d["psnr"]):
            d["psnr"] = "inf"
        return d


def evaluate(pred, ref, mask=None):
    pred_a, ref_a, mask_a = _prepare(pred, ref, mask)
    return MetricReport(psnr(pred_a, ref_a, mask_a), ssim(pred_a, ref_a, mask_a), hfen(pred_a, ref_a, mask_a),
                        int(mask_a.sum()))


def seam_discontinuity(volume, layout, mask=None):
    """Mean |finite difference| across patch boundary planes minus the mean across all other planes.

    Differences are taken along each axis between neighbouring voxels; a pair
    straddles a boundary when its face is one of ``layout.boundary_planes()``.
    Pairs are pooled over the three axes and restricted to ``mask`` (both
    voxels inside) when given. Returns 0.0 when the layout has no interior
    boundaries.
    """
    data = np.asarray(getattr(volume, "data", volume), dtype=np.float64)
    if data.shape != tuple(layout.volume_dims):
        raise ParameterError(f"volume dims {data.shape} do not match layout {layout.volume_dims}")
    if mask is None:
        mask = np.ones(data.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    seam_vals, other_vals = [], []
    for axis, planes in enumerate(layout.boundary_planes()):
        diff = np.abs(np.diff(data, axis=axis))
        both = np.logical_and(np.delete(mask, 0, axis=axis), np.delete(mask, -1, axis=axis))
        # face b lies between voxels b-1 and b, i.e. at diff index b-1
        on_seam = np.zeros(diff.shape[axis], dtype=bool)
        on_seam[np.asarray(planes, dtype=int) - 1] = True
        shape = [1, 1, 1]
        shape[axis] = -1
        on_seam = np.broadcast_to(on_seam.reshape(shape), diff.shape)
        seam_vals.append(diff[on_seam & both])
        other_vals.append(diff[~on_seam & both])
    seam = np.concatenate(seam_vals)
    other = np.concatenate(other_vals)
    if seam.size == 0:
        return 0.0
    if other.size == 0:
        raise MetricError("no interior planes to compare against")
    return float(seam.mean() - other.mean())

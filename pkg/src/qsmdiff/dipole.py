"""Unit dipole kernel, Fourier forward model, measurement noise and TKD inversion."""

from dataclasses import dataclass

import numpy as np

from ._validation import check_positive, check_random_state, check_triple, check_unit_vector
from .exceptions import ParameterError
from .volume import Volume


@dataclass(frozen=True, eq=False)
class DipoleKernel:
    """Dipole kernel sampled on the unshifted FFT grid (``values[0, 0, 0]`` is k = 0)."""

    values: np.ndarray
    voxel_size: tuple
    b0_dir: tuple

    @property
    def dims(self):
        return tuple(int(n) for n in self.values.shape)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sigma", check_positive(self.sigma, "sigma", allow_zero=True))


def _index_negate(a):
    """Return ``a[-k]`` on the discrete FFT grid for every axis."""
    return np.roll(np.flip(a, axis=(0, 1, 2)), shift=1, axis=(0, 1, 2))


def dipole_kernel(dims, voxel_size=(1.0, 1.0, 1.0), b0_dir=(0.0, 0.0, 1.0)):
    """Build ``D(k) = 1/3 - (k . b0)^2 / |k|^2`` with ``D(0) = 0``.

    Frequencies are in physical units (cycles/mm), so anisotropic voxels give an
    anisotropic kernel. For even grid sizes the Nyquist samples are averaged
    with their index-mirrored partners so that ``D(k) == D(-k)`` holds exactly
    on the grid, which keeps the forward model real-valued for tilted B0.
    """
    dims = check_triple(dims, "dims")
    voxel_size = check_triple(voxel_size, "voxel_size", kind=float)
    b0 = np.asarray(check_unit_vector(b0_dir))
    kx, ky, kz = np.meshgrid(
        *(np.fft.fftfreq(n, d=v) for n, v in zip(dims, voxel_size)), indexing="ij"
    )
    k2 = kx**2 + ky**2 + kz**2
    kb = kx * b0[0] + ky * b0[1] + kz * b0[2]
    with np.errstate(invalid="ignore", divide="ignore"):
        d = 1.0 / 3.0 - kb**2 / k2
    d[0, 0, 0] = 0.0
    if any(n % 2 == 0 for n in dims):
        d = 0.5 * (d + _index_negate(d))
        d[0, 0, 0] = 0.0
    return DipoleKernel(d, tuple(voxel_size), tuple(float(c) for c in b0))


def apply_kernel(data, kernel_values):
    """Real part of ``ifft(K * fft(data))`` for a real, even-symmetric kernel."""
    return np.real(np.fft.ifftn(kernel_values * np.fft.fftn(data)))


def forward_field(chi, D):
    """Local field ``phi = F^-1 D F chi`` in the same units as ``chi``."""
    if chi.dims != D.dims:
        raise ParameterError(f"chi dims {chi.dims} do not match kernel dims {D.dims}")
    return chi.with_data(apply_kernel(chi.data, D.values), b0_dir=D.b0_dir)


def add_noise(phi, spec):
    """Add i.i.d. Gaussian noise of standard deviation ``spec.sigma``."""
    if spec.sigma == 0:
        return phi
    rng = check_random_state(spec.seed)
    return phi.with_data(phi.data + spec.sigma * rng.standard_normal(phi.dims))


def tkd_filter(D, threshold=0.1):
    """Thresholded inverse-filter denominator: sub-threshold magnitudes become ``sign(D) * threshold``."""
    threshold = check_positive(threshold, "threshold")
    sign = np.where(D.values < 0, -1.0, 1.0)
    return np.where(np.abs(D.values) >= threshold, D.values, sign * threshold)


def tkd_invert(phi, D, threshold=0.1):
    """Thresholded k-space division estimate of the susceptibility map."""
    if phi.dims != D.dims:
        raise ParameterError(f"field dims {phi.dims} do not match kernel dims {D.dims}")
    denom = tkd_filter(D, threshold)
    chi = np.real(np.fft.ifftn(np.fft.fftn(phi.data) / denom))
    if phi.mask is not None:
        chi = chi * phi.mask
    return phi.with_data(chi)

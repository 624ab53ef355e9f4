"""Synthetic susceptibility phantoms and acquisition simulation."""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from ._validation import check_random_state, check_triple, check_unit_vector
from .dipole import NoiseSpec, add_noise, dipole_kernel, forward_field
from .exceptions import ParameterError
from .volume import Volume, resample_trilinear

MASK_DILATION = 4


@dataclass(frozen=True)
class Component:
    """One rasterized shape.

    ``radii`` are semi-axes in voxels; for a cylinder they are
    ``(radius, radius, half_length)`` along ``axis``. ``angles`` are xyz Euler
    angles in degrees applied to ellipsoids.
    """

    kind: str
    center: tuple
    radii: tuple
    chi: float
    angles: tuple = (0.0, 0.0, 0.0)
    axis: tuple = (0.0, 0.0, 1.0)

    def rotation(self):
        if self.kind == "cylinder":
            # any rotation taking z to the cylinder axis
            a = np.asarray(check_unit_vector(self.axis, "axis", normalize=True))
            rot, _ = Rotation.align_vectors([a], [[0.0, 0.0, 1.0]])
            return rot.as_matrix()
        return Rotation.from_euler("xyz", self.angles, degrees=True).as_matrix()

    def support(self, dims):
        grid = np.stack(np.meshgrid(*(np.arange(n, dtype=float) for n in dims), indexing="ij"), axis=-1)
        local = (grid - np.asarray(self.center, dtype=float)) @ self.rotation()
        r = np.asarray(self.radii, dtype=float)
        if self.kind in ("sphere", "ellipsoid"):
            return np.sum((local / r) ** 2, axis=-1) <= 1.0
        if self.kind == "cylinder":
            radial = (local[..., 0] / r[0]) ** 2 + (local[..., 1] / r[1]) ** 2
            return (radial <= 1.0) & (np.abs(local[..., 2]) <= r[2])
        raise ParameterError(f"unknown component kind {self.kind!r}")

    def extent(self):
        """Half-width of the axis-aligned bounding box, per axis."""
        r = np.asarray(self.radii, dtype=float)
        rot = self.rotation()
        if self.kind == "cylinder":
            axis = rot[:, 2]
            return np.abs(axis) * r[2] + r[0] * np.sqrt(np.clip(1 - axis**2, 0, None))
        return np.sqrt(((rot * r) ** 2).sum(axis=1))


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple
    components: tuple = ()
    voxel_size: tuple = (1.0, 1.0, 1.0)
    b0_dir: tuple = (0.0, 0.0, 1.0)
    shape: str = "custom"


def make_phantom(spec):
    """Rasterize the components (values add) with a mask dilated by four voxels."""
    dims = check_triple(spec.dims, "dims")
    data = np.zeros(dims)
    support = np.zeros(dims, dtype=bool)
    for comp in spec.components:
        if not np.isfinite(comp.chi):
            raise ParameterError("component chi must be finite")
        lo = np.asarray(comp.center) - comp.extent()
        hi = np.asarray(comp.center) + comp.extent()
        if np.any(lo < -0.5) or np.any(hi > np.asarray(dims) - 0.5):
            raise ParameterError(f"{comp.kind} at {comp.center} extends outside the {dims} volume")
        inside = comp.support(dims)
        data[inside] += comp.chi
        support |= inside
    mask = ndimage.binary_dilation(support, structure=_ball(MASK_DILATION)) if support.any() else support
    return Volume(data, voxel_size=spec.voxel_size, b0_dir=spec.b0_dir, mask=mask)


def _ball(radius):
    r = np.arange(-radius, radius + 1)
    x, y, z = np.meshgrid(r, r, r, indexing="ij")
    return x**2 + y**2 + z**2 <= radius**2


def sphere_spec(dims, radius, chi, center=None, voxel_size=(1.0, 1.0, 1.0)):
    dims = check_triple(dims, "dims")
    if center is None:
        center = tuple(n // 2 for n in dims)
    comp = Component("sphere", tuple(center), (radius,) * 3, float(chi))
    return PhantomSpec(dims, (comp,), voxel_size, shape="sphere")


def cylinder_spec(dims, radius, half_length, chi, axis=(0.0, 0.0, 1.0), center=None,
                  voxel_size=(1.0, 1.0, 1.0)):
    dims = check_triple(dims, "dims")
    if center is None:
        center = tuple(n // 2 for n in dims)
    comp = Component("cylinder", tuple(center), (radius, radius, half_length), float(chi), axis=tuple(axis))
    return PhantomSpec(dims, (comp,), voxel_size, shape="cylinder")


def ellipsoid_mixture_spec(dims, seed=0, n_components=12, head_chi=0.02, chi_range=(-0.08, 0.12),
                           voxel_size=(1.0, 1.0, 1.0)):
    """Random brain-like phantom: a head ellipsoid holding smaller rotated ellipsoids."""
    dims = np.asarray(check_triple(dims, "dims"), dtype=float)
    rng = check_random_state(seed)
    center = (dims - 1) / 2
    head_r = 0.42 * dims
    comps = [Component("ellipsoid", tuple(center), tuple(head_r), float(head_chi))]
    for _ in range(n_components):
        radii = rng.uniform(0.06, 0.2, size=3) * dims.min()
        angles = rng.uniform(0, 180, size=3)
        # keep the inner structure within the head
        room = np.maximum(head_r - radii.max() - 1, 0)
        offset = rng.uniform(-1, 1, size=3) * room / np.sqrt(3)
        chi = rng.uniform(*chi_range)
        comps.append(Component("ellipsoid", tuple(center + offset), tuple(radii), float(chi), tuple(angles)))
    return PhantomSpec(tuple(int(n) for n in dims), tuple(comps), voxel_size, shape="ellipsoid_mixture")


def spec_from_mapping(cfg):
    """Build a :class:`PhantomSpec` from ``key=value`` style settings."""
    cfg = dict(cfg)
    shape = cfg.pop("shape", "sphere")
    dims = check_triple(cfg.pop("dims", "64,64,64"), "dims")
    voxel = check_triple(cfg.pop("voxel_size", "1,1,1"), "voxel_size", kind=float)
    center = cfg.pop("center", None)
    if center is not None:
        center = check_triple(center, "center", kind=float, positive=False)
    chi = float(cfg.pop("chi", 0.1))
    if shape == "sphere":
        spec = sphere_spec(dims, float(cfg.pop("radius", 10)), chi, center, voxel)
    elif shape == "cylinder":
        axis = check_triple(cfg.pop("axis", "0,0,1"), "axis", kind=float, positive=False)
        spec = cylinder_spec(dims, float(cfg.pop("radius", 5)), float(cfg.pop("half_length", 20)), chi,
                             axis, center, voxel)
    elif shape == "ellipsoid_mixture":
        spec = ellipsoid_mixture_spec(dims, seed=int(cfg.pop("seed", 0)),
                                      n_components=int(cfg.pop("n_components", 12)), voxel_size=voxel)
    else:
        raise ParameterError(f"unknown phantom shape {shape!r}")
    cfg.pop("radius", None)
    if cfg:
        raise ParameterError(f"unknown phantom keys: {sorted(cfg)}")
    return spec


def sphere_field(points, center, radius, chi, b0_dir=(0.0, 0.0, 1.0)):
    """Analytic field of a uniformly magnetized sphere: 0 inside, dipolar outside."""
    b0 = np.asarray(check_unit_vector(b0_dir, normalize=True))
    d = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(center, dtype=float)
    r = np.linalg.norm(d, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_t = (d @ b0) / r
        out = chi / 3.0 * (radius / r) ** 3 * (3 * cos_t**2 - 1)
    return np.where(r <= radius, 0.0, out)


@dataclass
class Acquisition:
    """Simulated local field plus the dipole kernel matched to its grid."""

    phi: Volume
    kernel: object
    source_dims: tuple
    meta: dict = field(default_factory=dict)


def simulate_acquisition(chi, b0_dir=(0.0, 0.0, 1.0), out_dims=None, noise=None):
    """Forward model at full resolution, trilinear downsampling, then additive noise."""
    b0 = check_unit_vector(b0_dir, normalize=True)
    noise = noise or NoiseSpec()
    out_dims = chi.dims if out_dims is None else check_triple(out_dims, "out_dims")
    if any(o > n for o, n in zip(out_dims, chi.dims)):
        raise ParameterError(f"out_dims {out_dims} exceed source dims {chi.dims}")
    D_full = dipole_kernel(chi.dims, chi.voxel_size, b0)
    phi = forward_field(chi, D_full)
    phi = resample_trilinear(phi, out_dims)
    phi = add_noise(phi, noise)
    kernel = dipole_kernel(phi.dims, phi.voxel_size, b0)
    meta = {"b0_dir": b0, "sigma": noise.sigma, "seed": noise.seed, "out_dims": out_dims}
    return Acquisition(phi, kernel, chi.dims, meta)

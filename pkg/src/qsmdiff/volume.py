"""Volume container, QVOL file I/O, value normalization and trilinear resampling.

Arrays are indexed ``data[x, y, z]``. On disk the payload is written with the
x index varying fastest, i.e. offset ``x + nx * (y + ny * z)``.
"""

import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import check_positive, check_triple, check_unit_vector
from .exceptions import ContractError, DataError, FormatError, LengthError, ParameterError

logger = logging.getLogger(__name__)

MAGIC = b"QVL1"
VERSION = 1
_HEADER = struct.Struct("<4sIIII3f3fB")


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D real scalar field with geometry metadata.

    Attributes:
        data: array of shape ``(nx, ny, nz)``.
        voxel_size: voxel edge lengths in mm.
        b0_dir: unit vector of the main field direction.
        mask: optional boolean array with the same shape as ``data``.
    """

    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)
    b0_dir: tuple = (0.0, 0.0, 1.0)
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ParameterError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite values")
        object.__setattr__(self, "data", data)
        # geometry is held at float32 precision so file round trips are exact
        voxel = check_triple(self.voxel_size, "voxel_size", kind=float)
        object.__setattr__(self, "voxel_size", _f32(voxel))
        object.__setattr__(self, "b0_dir", _f32(check_unit_vector(self.b0_dir)))
        if self.mask is not None:
            mask = np.asarray(self.mask).astype(bool)
            if mask.shape != data.shape:
                raise ParameterError(f"mask shape {mask.shape} does not match data shape {data.shape}")
            object.__setattr__(self, "mask", mask)

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data, **changes):
        """Return a copy carrying new ``data`` and the same metadata."""
        return replace(self, data=data, **changes)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        if (self.mask is None) != (other.mask is None):
            return False
        return (
            self.voxel_size == other.voxel_size
            and self.b0_dir == other.b0_dir
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
            and (self.mask is None or np.array_equal(self.mask, other.mask))
        )

    __hash__ = None


def _f32(values):
    return tuple(float(np.float32(v)) for v in values)


@dataclass(frozen=True)
class NormalizationSpec:
    """Map between ppm and model space: ``model = clip(ppm / chi_scale, -1, 1)``.

    ``chi_scale`` is held at float32 precision, as stored in model files.
    """

    chi_scale: float = 0.2

    def __post_init__(self):
        scale = float(np.float32(check_positive(self.chi_scale, "chi_scale")))
        object.__setattr__(self, "chi_scale", scale)


# --------------------------------------------------------------------- I/O


def save_volume(v, path):
    """Write ``v`` in the QVOL format. Identical volumes produce identical bytes."""
    if not isinstance(v, Volume):
        raise ParameterError("save_volume expects a Volume")
    if not np.all(np.isfinite(v.data)):
        raise DataError("refusing to save non-finite values")
    payload = np.asarray(v.data, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise DataError("values overflow float32")
    nx, ny, nz = v.dims
    has_mask = v.mask is not None
    parts = [
        _HEADER.pack(MAGIC, VERSION, nx, ny, nz, *v.voxel_size, *v.b0_dir, int(has_mask)),
        payload.tobytes(order="F"),
    ]
    if has_mask:
        parts.append(v.mask.astype(np.uint8).tobytes(order="F"))
    blob = b"".join(parts)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError:
        logger.error("cannot write %s", path)
        raise


def load_volume(path):
    """Read a QVOL file written by :func:`save_volume`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise LengthError(f"{path}: truncated header")
    _, version, nx, ny, nz, *rest = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported QVOL version {version}")
    voxel_size, b0_dir, has_mask = tuple(rest[0:3]), tuple(rest[3:6]), rest[6]
    if has_mask not in (0, 1):
        raise FormatError(f"{path}: has_mask flag must be 0 or 1, got {has_mask}")
    n = nx * ny * nz
    expected = _HEADER.size + 4 * n + (n if has_mask else 0)
    if len(blob) != expected:
        raise LengthError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=_HEADER.size)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: payload contains non-finite values")
    data = data.reshape((nx, ny, nz), order="F").astype(np.float64)
    mask = None
    if has_mask:
        raw = np.frombuffer(blob, dtype=np.uint8, count=n, offset=_HEADER.size + 4 * n)
        if np.any(raw > 1):
            raise FormatError(f"{path}: mask bytes must be 0 or 1")
        mask = raw.reshape((nx, ny, nz), order="F").astype(bool)
    try:
        return Volume(data, voxel_size=voxel_size, b0_dir=b0_dir, mask=mask)
    except ParameterError as exc:
        raise FormatError(f"{path}: invalid header geometry: {exc}") from exc


# ----------------------------------------------------------- normalization


def normalize(v, spec=None):
    spec = spec or NormalizationSpec()
    scaled = v.data / spec.chi_scale
    n_clip = int(np.count_nonzero(np.abs(scaled) > 1.0))
    if n_clip:
        logger.info("normalize: clipped %d voxels outside +/-%g ppm", n_clip, spec.chi_scale)
    return v.with_data(np.clip(scaled, -1.0, 1.0))


def denormalize(v, spec=None):
    spec = spec or NormalizationSpec()
    if np.any(np.abs(v.data) > 1.0):
        raise ContractError("denormalize expects model-space values within [-1, 1]")
    return v.with_data(v.data * spec.chi_scale)


# -------------------------------------------------------------- resampling


def _interp_matrix(n_src, n_dst):
    """Dense (n_dst, n_src) linear-interpolation matrix, cell-centred, edge-clamped."""
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w = pos - i0
    mat = np.zeros((n_dst, n_src))
    rows = np.arange(n_dst)
    np.add.at(mat, (rows, i0), 1.0 - w)
    np.add.at(mat, (rows, i1), w)
    return mat


def _apply_separable(data, mats):
    out = data
    for axis, mat in enumerate(mats):
        if mat is None:
            continue
        out = np.moveaxis(np.tensordot(mat, out, axes=([1], [axis])), 0, axis)
    return out


def resample_matrices(src_dims, dst_dims):
    """Per-axis interpolation matrices of the trilinear map; ``None`` marks identity axes."""
    return [None if s == d else _interp_matrix(s, d) for s, d in zip(src_dims, dst_dims)]


def resample_array(data, target_dims):
    """Array form of :func:`resample_trilinear` (the operator S)."""
    return _apply_separable(data, resample_matrices(data.shape, tuple(target_dims)))


def resample_array_adjoint(data, source_dims):
    """Array form of :func:`resample_adjoint` (the operator S^T)."""
    mats = resample_matrices(tuple(source_dims), data.shape)
    return _apply_separable(data, [None if m is None else m.T for m in mats])


def resample_trilinear(v, target_dims):
    """Trilinearly interpolate ``v`` onto ``target_dims`` over the same physical extent.

    The mask, if any, is resampled and thresholded at 0.5.
    """
    target_dims = check_triple(target_dims, "target_dims")
    if target_dims == v.dims:
        return v.with_data(v.data.copy())
    mats = resample_matrices(v.dims, target_dims)
    data = _apply_separable(v.data, mats)
    voxel = tuple(vs * s / d for vs, s, d in zip(v.voxel_size, v.dims, target_dims))
    mask = None
    if v.mask is not None:
        mask = _apply_separable(v.mask.astype(float), mats) >= 0.5
    return Volume(data, voxel_size=voxel, b0_dir=v.b0_dir, mask=mask)


def resample_adjoint(v, source_dims):
    """Apply the transpose of the :func:`resample_trilinear` map from ``source_dims``."""
    source_dims = check_triple(source_dims, "source_dims")
    if source_dims == v.dims:
        return v.with_data(v.data.copy())
    mats = [None if m is None else m.T for m in resample_matrices(source_dims, v.dims)]
    data = _apply_separable(v.data, mats)
    voxel = tuple(vs * d / s for vs, s, d in zip(v.voxel_size, source_dims, v.dims))
    return Volume(data, voxel_size=voxel, b0_dir=v.b0_dir)

"""Overlapping 3D patch extraction and crop-mask normalized reassembly."""

from dataclasses import dataclass
from itertools import product

import numpy as np

from ._validation import check_triple
from .exceptions import ParameterError


@dataclass(frozen=True, eq=False)
class PatchLayout:
    """Patch start positions over a volume plus the per-voxel coverage count.

    ``starts`` is ordered z-major with x varying fastest.
    """

    volume_dims: tuple
    patch_size: tuple
    overlap: tuple
    starts: tuple
    crop_mask: np.ndarray

    @property
    def n_patches(self):
        return len(self.starts)

    def slices(self, i):
        return tuple(slice(s, s + d) for s, d in zip(self.starts[i], self.patch_size))

    def boundary_planes(self):
        """Interior plane indices per axis where some patch begins or ends.

        A plane index ``b`` refers to the face between voxels ``b - 1`` and ``b``.
        """
        planes = []
        for axis in range(3):
            n = self.volume_dims[axis]
            cuts = set()
            for s in self.starts:
                cuts.update((s[axis], s[axis] + self.patch_size[axis]))
            planes.append(sorted(c for c in cuts if 0 < c < n))
        return planes


def axis_starts(n, d, stride):
    """Starts ``0, stride, 2*stride, ...`` with the last patch clamped to ``n - d``."""
    if d > n:
        raise ParameterError(f"patch size {d} exceeds volume size {n}; pad the volume first")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    starts = list(range(0, n - d + 1, stride))
    if starts[-1] + d < n:
        starts.append(n - d)
    return starts


def _layout(volume_dims, d, o, strides):
    per_axis = [axis_starts(n, di, si) for n, di, si in zip(volume_dims, d, strides)]
    starts = tuple((x, y, z) for z, y, x in product(per_axis[2], per_axis[1], per_axis[0]))
    mask = np.zeros(volume_dims, dtype=np.int32)
    for sx, sy, sz in starts:
        mask[sx : sx + d[0], sy : sy + d[1], sz : sz + d[2]] += 1
    return PatchLayout(tuple(volume_dims), tuple(d), tuple(o), starts, mask)


def plan_patches(volume_dims, patch_size, overlap):
    """Plan patches of size ``patch_size`` with ``overlap`` voxels shared between neighbours."""
    volume_dims = check_triple(volume_dims, "volume_dims")
    d = check_triple(patch_size, "patch_size")
    o = check_triple(overlap, "overlap", positive=False)
    for di, oi in zip(d, o):
        if not 0 <= oi < di:
            raise ParameterError(f"overlap must satisfy 0 <= o < d, got o={oi}, d={di}")
    return _layout(volume_dims, d, o, [di - oi for di, oi in zip(d, o)])


def plan_patches_stride(volume_dims, patch_size, stride):
    """Stride-based planning over the same layout type (used for training crops)."""
    volume_dims = check_triple(volume_dims, "volume_dims")
    d = check_triple(patch_size, "patch_size")
    stride = check_triple(stride, "stride")
    o = tuple(max(di - si, 0) for di, si in zip(d, stride))
    return _layout(volume_dims, d, o, stride)


def extract(data, layout):
    """Return the list of sub-blocks of ``data`` at the layout's starts."""
    data = np.asarray(data)
    if data.shape != layout.volume_dims:
        raise ParameterError(f"array shape {data.shape} does not match layout {layout.volume_dims}")
    return [data[layout.slices(i)] for i in range(layout.n_patches)]


def scatter_add(patches, layout, dtype=np.float64):
    """Sum patches into a full-size array without mask normalization (the adjoint of extract)."""
    if len(patches) != layout.n_patches:
        raise ParameterError(f"expected {layout.n_patches} patches, got {len(patches)}")
    out = np.zeros(layout.volume_dims, dtype=dtype)
    for i, p in enumerate(patches):
        p = np.asarray(p)
        if p.shape != layout.patch_size:
            raise ParameterError(f"patch {i} has shape {p.shape}, expected {layout.patch_size}")
        out[layout.slices(i)] += p
    return out


def assemble(patches, layout):
    """Scatter-add patches in index order and divide by the crop mask."""
    return scatter_add(patches, layout) / layout.crop_mask

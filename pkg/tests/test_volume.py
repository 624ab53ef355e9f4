import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qsmdiff.exceptions import ContractError, DataError, FormatError, LengthError
from qsmdiff.phantom import make_phantom, sphere_spec
from qsmdiff.volume import (
    NormalizationSpec,
    Volume,
    denormalize,
    load_volume,
    normalize,
    resample_adjoint,
    resample_trilinear,
    save_volume,
)


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_roundtrip_zeros(tmp_path):
    v = Volume(np.zeros((4, 4, 4)))
    save_volume(v, tmp_path / "z.qvol")
    assert load_volume(tmp_path / "z.qvol") == v


def test_bad_magic(tmp_path):
    v = Volume(np.zeros((2, 2, 2)))
    path = tmp_path / "v.qvol"
    save_volume(v, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"QVL0"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_volume(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "v.qvol"
    save_volume(Volume(np.ones((3, 3, 3))), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(LengthError):
        load_volume(path)


def test_nonfinite_payload_rejected_on_load(tmp_path):
    path = tmp_path / "v.qvol"
    save_volume(Volume(np.ones((2, 2, 2))), path)
    blob = bytearray(path.read_bytes())
    blob[-4:] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError):
        load_volume(path)


def test_phantom_roundtrip_bit_identical(tmp_path):
    chi = make_phantom(sphere_spec((64, 64, 64), 10, 0.1))
    save_volume(chi, tmp_path / "p.qvol")
    back = load_volume(tmp_path / "p.qvol")
    assert back.data.size == 262144
    expected = chi.data.astype(np.float32)
    assert np.array_equal(back.data.astype(np.float32).view(np.uint32), expected.view(np.uint32))
    assert np.array_equal(back.mask, chi.mask)
    save_volume(back, tmp_path / "q.qvol")
    assert _sha(tmp_path / "p.qvol") == _sha(tmp_path / "q.qvol")


def test_save_deterministic(tmp_path, rng):
    b0 = np.array([0.5, 0.5, 0.71]) / np.linalg.norm([0.5, 0.5, 0.71])
    v = Volume(rng.standard_normal((5, 6, 7)), voxel_size=(1, 1, 3), b0_dir=b0)
    save_volume(v, tmp_path / "a.qvol")
    save_volume(v, tmp_path / "b.qvol")
    assert _sha(tmp_path / "a.qvol") == _sha(tmp_path / "b.qvol")
    assert load_volume(tmp_path / "a.qvol") == Volume(v.data.astype(np.float32), v.voxel_size, v.b0_dir)


def test_nan_volume_not_written(tmp_path):
    data = np.zeros((2, 2, 2))
    v = Volume(data)
    # bypass construction-time validation to exercise the writer's own check
    object.__setattr__(v, "data", np.full((2, 2, 2), np.nan))
    with pytest.raises(DataError):
        save_volume(v, tmp_path / "nan.qvol")
    assert not (tmp_path / "nan.qvol").exists()
    with pytest.raises(DataError):
        Volume(np.full((2, 2, 2), np.nan))


def test_payload_order_x_fastest(tmp_path):
    data = np.arange(8, dtype=float).reshape((2, 2, 2), order="F")
    save_volume(Volume(data), tmp_path / "o.qvol")
    blob = (tmp_path / "o.qvol").read_bytes()
    header = 4 + 4 + 12 + 12 + 12 + 1
    assert blob[header:header + 32] == struct.pack("<8f", *range(8))
    assert data[1, 0, 0] == 1 and data[0, 1, 0] == 2 and data[0, 0, 1] == 4


def test_mask_shape_checked():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), mask=np.ones((2, 2, 3), bool))


@pytest.mark.parametrize(
    "value, expected",
    [(0.1, 0.5), (0.5, 1.0), (-0.5, -1.0), (0.0, 0.0)],
)
def test_normalize_values(value, expected):
    v = Volume(np.full((2, 2, 2), value))
    assert np.allclose(normalize(v, NormalizationSpec(0.2)).data, expected)


def test_normalize_zero_any_scale():
    v = Volume(np.zeros((2, 2, 2)))
    for scale in (0.01, 1.0, 7.0):
        assert np.all(normalize(v, NormalizationSpec(scale)).data == 0)


def test_denormalize_values():
    spec = NormalizationSpec(0.2)
    assert np.allclose(denormalize(Volume(np.full((1, 1, 1), 0.5)), spec).data, 0.1)
    assert np.allclose(denormalize(Volume(np.full((1, 1, 1), -1.0)), spec).data, -0.2)
    with pytest.raises(ContractError):
        denormalize(Volume(np.full((1, 1, 1), 1.5)), spec)


def test_normalize_roundtrip_random(rng):
    spec = NormalizationSpec(0.2)
    v = Volume(rng.uniform(-0.2, 0.2, size=(8, 8, 8)))
    assert np.allclose(denormalize(normalize(v, spec), spec).data, v.data, atol=1e-6, rtol=0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 3, 3), elements=st.floats(-1, 1)), st.floats(0.01, 5.0))
def test_normalize_denormalize_identity(values, scale):
    spec = NormalizationSpec(scale)
    out = normalize(denormalize(Volume(values), spec), spec)
    assert np.allclose(out.data, values, atol=1e-12)


def test_resample_identity_bit_equal(rng):
    v = Volume(rng.standard_normal((6, 5, 4)))
    assert np.array_equal(resample_trilinear(v, (6, 5, 4)).data, v.data)


@pytest.mark.parametrize("target", [(3, 3, 3), (8, 5, 11), (1, 2, 9)])
def test_resample_constant(target):
    v = Volume(np.full((6, 5, 4), 0.37))
    assert np.allclose(resample_trilinear(v, target).data, 0.37, rtol=0, atol=1e-15)


def test_resample_ramp_matches_analytic():
    x = np.arange(64, dtype=float)
    v = Volume(np.broadcast_to(x[:, None, None], (64, 64, 64)).copy())
    out = resample_trilinear(v, (32, 32, 32))
    # target voxel j sits at source coordinate 2j + 0.5; a linear ramp interpolates exactly
    expected = 2 * np.arange(32) + 0.5
    assert np.allclose(out.data, expected[:, None, None], atol=1e-5)
    assert out.voxel_size == (2.0, 2.0, 2.0)


def test_resample_linear(rng):
    x, y = rng.standard_normal((2, 7, 6, 9))
    a, b = 1.7, -0.3
    lhs = resample_trilinear(Volume(a * x + b * y), (3, 4, 5)).data
    rhs = a * resample_trilinear(Volume(x), (3, 4, 5)).data + b * resample_trilinear(Volume(y), (3, 4, 5)).data
    assert np.allclose(lhs, rhs, rtol=1e-6, atol=1e-12)


def test_adjoint_identity(rng):
    v = Volume(rng.standard_normal((4, 4, 4)))
    assert np.array_equal(resample_adjoint(v, (4, 4, 4)).data, v.data)


@pytest.mark.parametrize("seed", range(5))
def test_adjoint_dot_product(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((8, 8, 8))
    y = rng.standard_normal((4, 4, 4))
    sx = resample_trilinear(Volume(x), (4, 4, 4)).data
    sty = resample_adjoint(Volume(y), (8, 8, 8)).data
    lhs, rhs = np.sum(sx * y), np.sum(x * sty)
    assert abs(lhs - rhs) <= 1e-4 * abs(lhs)


def _explicit_matrix(src, dst):
    """Brute-force the matrix of S by pushing every source basis vector through it."""
    n = int(np.prod(src))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(resample_trilinear(Volume(e.reshape(src)), dst).data.ravel())
    return np.stack(cols, axis=1)


def test_adjoint_one_hot_is_weight_stencil():
    src, dst = (8, 8, 8), (4, 4, 4)
    S = _explicit_matrix(src, dst)
    j = np.ravel_multi_index((1, 2, 3), dst)
    e = np.zeros(dst)
    e[1, 2, 3] = 1.0
    stencil = resample_adjoint(Volume(e), src).data.ravel()
    assert np.allclose(stencil, S[j], atol=1e-12)
    assert np.isclose(stencil.sum(), S[j].sum())
    assert np.count_nonzero(stencil) == 8


def test_adjoint_upsampling_direction(rng):
    x = rng.standard_normal((4, 5, 3))
    y = rng.standard_normal((9, 10, 7))
    sx = resample_trilinear(Volume(x), y.shape).data
    sty = resample_adjoint(Volume(y), x.shape).data
    assert np.isclose(np.sum(sx * y), np.sum(x * sty), rtol=1e-10)

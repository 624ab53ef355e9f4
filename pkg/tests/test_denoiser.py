import struct

import numpy as np
import pytest

from qsmdiff.denoiser import (
    QDM_MAGIC,
    TrainHyper,
    build_dataset,
    forward_eps,
    init_model,
    load_model,
    save_model,
    train,
)
from qsmdiff.diffusion import make_schedule
from qsmdiff.exceptions import DatasetError, FormatError, LengthError, NumericError, TrainingError
from qsmdiff.network import DenoiserArch
from qsmdiff.phantom import ellipsoid_mixture_spec, make_phantom
from qsmdiff.volume import NormalizationSpec, Volume

SMALL = DenoiserArch(4, 1, 8)


def _dataset(rng, n=6, size=6):
    vol = Volume(rng.uniform(-0.1, 0.1, (size * 2,) * 3))
    ds = build_dataset([vol], size, size)
    ds.patches = ds.patches[:n]
    return ds


def test_all_zero_volume_gives_dataset_error():
    with pytest.raises(DatasetError):
        build_dataset([Volume(np.zeros((16, 16, 16)))], 8, 8)


def test_clamped_grid_candidate_count():
    vol = Volume(np.ones((64, 64, 64)))
    assert len(build_dataset([vol], 48, 32)) == 8


def test_exclusion_boundary_is_strict():
    # 20^3 patch with exactly 95% zero voxels is kept; one more zero drops it
    n = 20**3
    data = np.zeros(n)
    data[: n // 20] = 0.05
    kept = build_dataset([Volume(data.reshape(20, 20, 20))], 20, 20)
    assert len(kept) == 1
    data[0] = 0.0
    with pytest.raises(DatasetError):
        build_dataset([Volume(data.reshape(20, 20, 20))], 20, 20)


def test_dataset_is_normalized_and_ordered():
    data = np.zeros((8, 8, 8))
    data[:4] = 0.4  # beyond chi_scale: clipped to 1
    data[4:] = -0.1
    ds = build_dataset([Volume(data)], 4, 4, NormalizationSpec(0.2))
    assert ds.patches.dtype == np.float32
    assert ds.patches.max() == 1.0 and ds.patches.min() == -0.5
    # x fastest: the first patch starts at the origin, the second one step along x
    assert np.all(ds.patches[0] == 1.0) and np.all(ds.patches[1] == -0.5)


def test_forward_eps_batch_and_single_agree(rng):
    model = init_model(SMALL, zero_head=False, seed=1)
    x = rng.standard_normal((2, 6, 6, 6)).astype(np.float32)
    batch = forward_eps(model, x, np.array([5, 5]))
    single = forward_eps(model, x[1], 5)
    assert np.allclose(batch[1], single, atol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_forward_eps_rejects_non_finite_output(rng):
    model = init_model(SMALL, zero_head=False)
    model.net.theta[:] = np.inf
    with pytest.raises(NumericError):
        forward_eps(model, rng.standard_normal((4, 4, 4)), 3)


def test_zero_steps_returns_initial_model(rng):
    ds = _dataset(rng)
    a = train(ds, SMALL, hyper=TrainHyper(steps=0, seed=3))
    rng_init = np.random.default_rng(3)
    b = init_model(SMALL, seed=int(rng_init.integers(2**31)))
    assert np.array_equal(a.theta, b.theta)
    assert a.train_meta["losses"] == []


def test_training_is_deterministic(rng):
    ds = _dataset(rng)
    hyper = TrainHyper(lr=1e-3, batch=2, steps=5, seed=11)
    a = train(ds, SMALL, hyper=hyper)
    b = train(ds, SMALL, hyper=hyper)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert a.train_meta["losses"] == b.train_meta["losses"]
    c = train(ds, SMALL, hyper=TrainHyper(lr=1e-3, batch=2, steps=5, seed=12))
    assert c.theta.tobytes() != a.theta.tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step(rng):
    ds = _dataset(rng)
    model = init_model(SMALL, zero_head=False)
    model.net.theta[:] = 1e30
    with pytest.raises(TrainingError) as info:
        train(ds, model=model, hyper=TrainHyper(steps=3))
    assert info.value.step == 0


def test_qdm_roundtrip_is_bit_exact(tmp_path, rng):
    model = init_model(SMALL, make_schedule(500, 2e-4, 0.03), NormalizationSpec(0.25), seed=4, zero_head=False)
    path = tmp_path / "m.qdm"
    save_model(model, path)
    back = load_model(path)
    assert back.theta.tobytes() == model.theta.tobytes()
    assert back.arch == model.arch
    assert (back.sched.T, back.sched.beta_start, back.sched.beta_end) == (500, 2e-4, 0.03)
    assert back.norm.chi_scale == np.float32(0.25)
    x = rng.standard_normal((6, 6, 6))
    assert np.array_equal(forward_eps(model, x, 17), forward_eps(back, x, 17))
    save_model(back, tmp_path / "again.qdm")
    assert (tmp_path / "again.qdm").read_bytes() == path.read_bytes()


def test_qdm_header_layout(tmp_path):
    model = init_model(SMALL)
    path = tmp_path / "m.qdm"
    save_model(model, path)
    blob = path.read_bytes()
    magic, version, T = struct.unpack_from("<4sII", blob)
    assert (magic, version, T) == (QDM_MAGIC, 1, 1000)
    F, B, E, count = struct.unpack_from("<IIIQ", blob, 4 + 4 + 4 + 16 + 4)
    assert (F, B, E, count) == (4, 1, 8, SMALL.param_count)
    assert len(blob) == 52 + 4 * count


def test_qdm_truncated_and_bad_magic(tmp_path):
    path = tmp_path / "m.qdm"
    save_model(init_model(SMALL), path)
    blob = path.read_bytes()
    (tmp_path / "short.qdm").write_bytes(blob[:-4])
    with pytest.raises(LengthError):
        load_model(tmp_path / "short.qdm")
    (tmp_path / "bad.qdm").write_bytes(b"QDM0" + blob[4:])
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad.qdm")
    (tmp_path / "ver.qdm").write_bytes(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(FormatError):
        load_model(tmp_path / "ver.qdm")


def test_toy_run_reduces_loss():
    vols = [make_phantom(ellipsoid_mixture_spec((48, 48, 48), seed=s)) for s in range(5)]
    ds = build_dataset(vols, 16, 8)
    ds.patches = ds.patches[:500]
    assert len(ds) == 500
    model = train(ds, DenoiserArch(16, 2, 32), hyper=TrainHyper(lr=1e-4, batch=4, steps=2000, seed=0))
    losses = np.asarray(model.train_meta["losses"])
    assert losses[-100:].mean() <= 0.7 * losses[:100].mean()

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from qsmdiff.dipole import dipole_kernel, forward_field, tkd_invert
from qsmdiff.estimators import QSMDiffInverter, TKDInversion
from qsmdiff.exceptions import ParameterError
from qsmdiff.phantom import ellipsoid_mixture_spec, make_phantom

TINY = dict(patch_size=8, stride=8, overlap=4, base_width=4, num_blocks=1, time_embed_dim=8, n_steps=3,
            ddim_steps=3, learning_rate=1e-3)


@pytest.fixture(scope="module")
def phantom():
    return make_phantom(ellipsoid_mixture_spec((16, 16, 16), seed=7, n_components=4))


@pytest.fixture(scope="module")
def field(phantom):
    return forward_field(phantom, dipole_kernel(phantom.dims))


@pytest.fixture(scope="module")
def fitted(phantom):
    return QSMDiffInverter(**TINY).fit([phantom])


def test_tkd_estimator_matches_function(field):
    est = TKDInversion(threshold=0.15).fit()
    expected = tkd_invert(field, dipole_kernel(field.dims), 0.15)
    assert np.array_equal(est.transform(field).data, expected.data)
    assert np.array_equal(est.fit_transform(field).data, expected.data)


def test_tkd_estimator_validates_on_fit():
    with pytest.raises(ParameterError):
        TKDInversion(threshold=0).fit()
    with pytest.raises(NotFittedError):
        TKDInversion().transform(None)


def test_params_roundtrip():
    est = QSMDiffInverter(xi1=3.0, step_budget=20.0)
    params = est.get_params()
    assert params["xi1"] == 3.0 and params["step_budget"] == 20.0
    copy = clone(est).set_params(lam=0.5)
    assert copy.lam == 0.5 and est.lam == 0.1
    cfg = copy.guidance_config()
    assert (cfg.xi1, cfg.lam, cfg.step_budget) == (3.0, 0.5, 20.0)


def test_defaults_follow_inference_settings():
    est = QSMDiffInverter()
    assert (est.patch_size, est.stride, est.overlap) == (48, 32, 8)
    assert (est.xi1, est.xi2, est.lam, est.ddim_steps, est.eta) == (10.0, 2.5, 0.1, 200, 0.0)


def test_predict_requires_fit(field):
    with pytest.raises(NotFittedError):
        QSMDiffInverter(**TINY).predict(field)


def test_fit_records_training(fitted):
    assert fitted.n_patches_ == 8
    assert len(fitted.loss_curve_) == 3
    assert fitted.model_.arch.base_width == 4


def test_max_patches_truncates(phantom):
    est = QSMDiffInverter(**{**TINY, "max_patches": 2}).fit([phantom])
    assert est.n_patches_ == 2


def test_predict_shape_and_determinism(fitted, field):
    a = fitted.predict(field, seed=3)
    b = fitted.predict(field, seed=3)
    assert a.dims == field.dims
    assert np.array_equal(a.data, b.data)
    assert np.all(np.abs(a.data) <= fitted.chi_scale + 1e-6)


def test_sample_returns_trace(fitted, field):
    res = fitted.sample(field)
    assert len(res.trace) == 3
    assert res.x_tkd.dims == field.dims


def test_save_load_gives_same_predictions(tmp_path, fitted, field):
    path = tmp_path / "est.qdm"
    fitted.save(path)
    loaded = QSMDiffInverter.load(path, patch_size=8, overlap=4, ddim_steps=3)
    assert loaded.base_width == 4 and loaded.num_blocks == 1
    assert np.array_equal(loaded.predict(field, seed=1).data, fitted.predict(field, seed=1).data)


def test_score_is_psnr(fitted, field, phantom):
    score = fitted.score(field, phantom)
    assert np.isfinite(score)


def test_rejects_plain_arrays(fitted):
    with pytest.raises(ParameterError):
        fitted.predict(np.zeros((8, 8, 8)))

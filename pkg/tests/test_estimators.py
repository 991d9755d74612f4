import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ctbound import CTBound, DirectFoJ, InitStage, RefineStage, noise
from ctbound.exceptions import InputError, InvalidParameterError
from ctbound.foj import PatchGridSpec


@pytest.fixture(scope="module")
def patch_data():
    samples = noise.gen_patch_dataset(16, seed=4)
    X = np.stack([s.noisy.counts for s in samples])
    y = np.stack([s.truth.geometry() for s in samples])
    alpha = np.array([s.noisy.alpha for s in samples])
    return X, y, alpha


@pytest.fixture(scope="module")
def fitted_init(patch_data):
    X, y, alpha = patch_data
    return InitStage(width=0.02, epochs=2, batch_size=8).fit(X, y, alpha=alpha)


def test_params_round_trip_and_clone():
    est = InitStage(width=0.5, epochs=3)
    assert est.get_params()["width"] == 0.5
    twin = clone(est)
    assert twin is not est and twin.get_params() == est.get_params()
    est.set_params(lr=1e-3)
    assert est.lr == 1e-3
    ref = RefineStage(init_stage=est, d=32)
    assert clone(ref).get_params()["d"] == 32
    assert set(DirectFoJ().get_params()) >= {"restarts", "iterations", "stride"}


def test_unfitted_estimators_refuse_to_predict():
    with pytest.raises(NotFittedError):
        InitStage().predict(np.ones((1, 21, 21)))
    with pytest.raises(NotFittedError):
        CTBound(init_stage=InitStage()).fit()
    with pytest.raises(NotFittedError):
        DirectFoJ().predict(np.ones((30, 30)))


def test_init_stage_fit_predict(fitted_init, patch_data):
    X, y, alpha = patch_data
    assert len(fitted_init.history_) == 2
    pred = fitted_init.predict(X, alpha=alpha)
    assert pred.shape == (16, 5) and np.all(np.isfinite(pred))
    angles = pred[:, 2:]
    assert np.all(np.diff(angles, axis=1) >= 0) and np.all((angles >= 0) & (angles < 2 * np.pi))
    assert fitted_init.score(X, y, alpha=alpha) <= 0
    np.testing.assert_array_equal(fitted_init.transform(X, alpha=alpha), pred)


def test_init_stage_is_deterministic(patch_data, fitted_init):
    X, y, alpha = patch_data
    again = clone(fitted_init).fit(X, y, alpha=alpha)
    np.testing.assert_array_equal(again.predict(X, alpha=alpha), fitted_init.predict(X, alpha=alpha))


@pytest.mark.parametrize("X", [np.ones((2, 21, 20)), np.ones((0, 21, 21)),
                               -np.ones((2, 21, 21)), np.full((2, 21, 21), np.nan)])
def test_bad_patches_are_rejected(X):
    with pytest.raises(InputError):
        InitStage(epochs=1).fit(X, np.zeros((len(X), 5)))


def test_bad_targets_and_levels(patch_data):
    X, y, _ = patch_data
    with pytest.raises(InputError):
        InitStage(epochs=1).fit(X, y[:3])
    with pytest.raises(InputError):
        InitStage(epochs=1).fit(X, y, alpha=-1.0)


def test_refine_and_ctbound_end_to_end(fitted_init):
    comps = noise.gen_composite_images(2, H=33, W=33, seed=1, max_shapes=1)
    grid = PatchGridSpec(33, 33, 21, 3)
    truths = [noise.composite_truth(c, grid) for c in comps]
    images = [c.noisy.counts for c in comps]
    alphas = [c.noisy.alpha for c in comps]
    ref = RefineStage(fitted_init, d=16, layers=1, heads=2, d_ff=16, phase1_epochs=1,
                      phase2_epochs=1, batch_size=2).fit(images, truths, alphas)
    params = ref.predict(images[0], alpha=alphas[0])
    assert params.shape == grid.shape
    model = CTBound(fitted_init, ref).fit()
    res = model.predict(images[0], alpha=alphas[0])
    assert res.boundary.shape == (33, 33) and res.color.shape == (33, 33, 1)
    assert model.transform(np.stack(images), alpha=alphas[0]).shape == (2, 33, 33)


def test_direct_estimator(patch_data):
    X, _, alpha = patch_data
    est = DirectFoJ(restarts=1, iterations=8).fit()
    assert est.fit_patches(X[:2], alpha=alpha[:2]).shape == (2, 5)
    res = est.predict(noise.gen_composite_images(1, H=25, W=25, seed=0)[0].noisy.counts)
    assert res.boundary.shape == (25, 25)
    with pytest.raises(InvalidParameterError):
        DirectFoJ(restarts=0).fit()

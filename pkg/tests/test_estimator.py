import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cellseg import OutlierAwareSegmenter


def _desk_estimator(**kw):
    base = dict(
        epochs=5,
        sampling_start_epoch=3,
        batch_size=4,
        pixels_per_image=150,
        sample_size=400,
        selection_count=40,
        substitution_fraction=0.1,
        queue_capacity=400,
        patch=32,
        margin=8,
        seed=21,
    )
    base.update(kw)
    return OutlierAwareSegmenter(**base)


@pytest.fixture(scope="module")
def xy(tiny_dataset):
    return [d[0] for d in tiny_dataset], [d[1] for d in tiny_dataset]


def test_get_set_params_and_clone():
    est = _desk_estimator(strategy="norm")
    params = est.get_params()
    assert params["strategy"] == "norm"
    assert params["epochs"] == 5
    est2 = clone(est)
    assert est2.get_params() == params
    est.set_params(beta=0.25)
    assert est.get_params()["beta"] == 0.25


def test_not_fitted_errors(xy):
    X, _ = xy
    with pytest.raises(NotFittedError):
        _desk_estimator().predict(X[:1])


def test_fit_predict_shapes_and_determinism(xy):
    X, y = xy
    est = _desk_estimator().fit(X[:8], y[:8])
    preds = est.predict(X[8:])
    assert [p.shape for p in preds] == [x.shape[:2] for x in X[8:]]
    assert all(set(np.unique(p)) <= {0, 1} for p in preds)
    probs = est.predict_proba(X[8:10])
    assert probs[0].shape == X[8].shape[:2] + (2,)

    est2 = _desk_estimator().fit(X[:8], y[:8])
    np.testing.assert_array_equal(est.params_.theta, est2.params_.theta)


def test_score_range(xy):
    X, y = xy
    est = _desk_estimator(epochs=3, sampling_start_epoch=3).fit(X[:6], y[:6])
    s = est.score(X[6:9], y[6:9])
    assert 0.0 <= s <= 1.0


def test_save_load_roundtrip(xy, tmp_path):
    X, y = xy
    est = _desk_estimator(epochs=3, sampling_start_epoch=2).fit(X[:6], y[:6])
    path = str(tmp_path / "model.ckpt")
    est.save(path)
    loaded = _desk_estimator().load(path)
    np.testing.assert_array_equal(loaded.params_.theta, est.params_.theta)
    a = est.predict(X[6:8])
    b = loaded.predict(X[6:8])
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa, pb)

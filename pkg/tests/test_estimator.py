import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from jema.estimator import JemaRegressor
from jema.trainer import load_frames


@pytest.fixture(scope="module")
def arrays(tiny_manifest):
    d, _ = load_frames(tiny_manifest, "train")
    X = np.concatenate([d.on_axis.numpy(), d.off_axis.numpy()], axis=1)
    return X, d.targets.numpy(), d.metadata.numpy()


def test_params_and_clone():
    est = JemaRegressor(loss_kind="rnc", epochs=3)
    params = est.get_params()
    assert params["loss_kind"] == "rnc" and params["epochs"] == 3
    c = clone(est).set_params(lr=1e-3)
    assert c.lr == 1e-3 and est.lr == 1e-4


def test_fit_predict_transform(arrays):
    X, y, meta = arrays
    est = JemaRegressor(epochs=1, batch_size=8).fit(X, y, metadata=meta)
    assert est.predict(X).shape == (len(X), 2)
    assert est.transform(X).shape == (len(X), 256)
    assert est.predict(X[:, 0]).shape == (len(X), 2)  # on-axis only
    assert est.predict(X[:, :1]).shape == (len(X), 2)
    assert np.isfinite(est.score(X, y))
    assert set(est.initial_objective_) >= {"total", "lcr_p"}


def test_deterministic(arrays):
    X, y, meta = arrays
    a = JemaRegressor(epochs=1, batch_size=8, seed=2).fit(X, y, metadata=meta).predict(X)
    b = JemaRegressor(epochs=1, batch_size=8, seed=2).fit(X, y, metadata=meta).predict(X)
    assert np.array_equal(a, b)


def test_reg_without_metadata(arrays):
    X, y, _ = arrays
    assert JemaRegressor(loss_kind="reg", epochs=1, batch_size=8).fit(X, y).predict(X).shape == y.shape


def test_validation(arrays):
    X, y, meta = arrays
    with pytest.raises(NotFittedError):
        JemaRegressor().predict(X)
    with pytest.raises(ValueError, match="metadata"):
        JemaRegressor(epochs=1).fit(X, y)
    with pytest.raises(ValueError, match="paired"):
        JemaRegressor(epochs=1).fit(X[:, :1], y, metadata=meta)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        JemaRegressor(epochs=1).fit(X * 3, y, metadata=meta)
    with pytest.raises(ValueError, match="y must"):
        JemaRegressor(epochs=1).fit(X, y[:, :1], metadata=meta)
    with pytest.raises(ValueError):
        JemaRegressor(loss_kind="nope").fit(X, y, metadata=meta)

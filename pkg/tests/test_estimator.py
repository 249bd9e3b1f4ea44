import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from crossmodal_reid import CrossModalityEmbedder, SynthConfig, synth_generate
from crossmodal_reid.estimator import check_feature_maps, check_identities, check_modalities
from crossmodal_reid.exceptions import DatasetError, DimensionError, ParameterError

FAST = dict(embedding_dim=8, private_widths=(8,), shared_widths=(8,), steps=15)


@pytest.fixture(scope="module")
def data():
    ds = synth_generate(SynthConfig(identities=5, samples_per_identity=3))
    return ds.features, ds.identities, ds.modalities


@pytest.fixture(scope="module")
def fitted(data):
    X, y, m = data
    return CrossModalityEmbedder(**FAST).fit(X, y, m)


def test_params_round_trip_through_clone():
    est = CrossModalityEmbedder(embedding_dim=12, loss_weights={"eat": 0.0}, random_state=3)
    params = est.get_params()
    assert params["embedding_dim"] == 12 and params["random_state"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    twin.set_params(steps=7)
    assert twin.steps == 7 and est.steps == 2000


def test_transform_shapes(fitted, data):
    X, _, m = data
    out = fitted.transform(X, m)
    assert out.shape == (len(X), 8)
    assert fitted.transform(X[0], m[0]).shape == (1, 8)
    assert np.array_equal(out[m == "visible"], fitted.transform(X[m == "visible"], "visible"))


def test_fitted_attributes(fitted, data):
    X, y, _ = data
    assert fitted.classes_.tolist() == sorted(set(y.tolist()))
    assert fitted.feature_shape_ == X.shape[1:]
    assert fitted.n_features_in_ == int(np.prod(X.shape[1:]))
    assert len(fitted.history_) == FAST["steps"]


def test_fit_is_deterministic(data):
    X, y, m = data
    a = CrossModalityEmbedder(**FAST).fit_transform(X, y, m)
    b = CrossModalityEmbedder(**FAST).fit_transform(X, y, m)
    assert a.tobytes() == b.tobytes()


def test_not_fitted(data):
    X, _, m = data
    with pytest.raises(NotFittedError):
        CrossModalityEmbedder().transform(X, m)


def test_score_is_a_map(fitted, data):
    X, y, m = data
    score = fitted.score(X, y, m)
    assert 0.0 < score <= 1.0
    assert score == fitted.score(X, y, m)


def test_save_and_load(fitted, data, tmp_path):
    X, _, m = data
    fitted.save(tmp_path / "est.ckpt")
    loaded = CrossModalityEmbedder.load(tmp_path / "est.ckpt")
    assert loaded.get_params() == fitted.get_params()
    assert loaded.transform(X, m).tobytes() == fitted.transform(X, m).tobytes()


def test_wrong_feature_shape(fitted):
    with pytest.raises(DimensionError):
        fitted.transform(np.zeros((2, 3, 3, 3)), "visible")


def test_fit_needs_two_identities(data):
    X, _, m = data
    with pytest.raises(DatasetError):
        CrossModalityEmbedder(**FAST).fit(X, np.zeros(len(X), dtype=int), m)


class TestValidation:
    def test_feature_maps(self):
        assert check_feature_maps(np.zeros((2, 3, 4))).shape == (1, 2, 3, 4)
        with pytest.raises(DimensionError):
            check_feature_maps(np.zeros((2, 3)))
        with pytest.raises(ParameterError):
            check_feature_maps(np.full((1, 1, 1, 1), np.nan))

    def test_modalities(self):
        assert check_modalities("rgb", 2).tolist() == ["visible", "visible"]
        with pytest.raises(DimensionError):
            check_modalities(["visible"], 2)
        with pytest.raises(ParameterError):
            check_modalities(["x", "visible"], 2)

    def test_identities(self):
        assert check_identities([1.0, 2.0], 2).dtype == np.int64
        with pytest.raises(ParameterError):
            check_identities([1.5, 2.0], 2)
        with pytest.raises(DimensionError):
            check_identities([1, 2, 3], 2)

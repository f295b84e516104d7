import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mmfusion.errors import LabelOutOfRange
from mmfusion.estimator import MultimodalClassifier, MultimodalScaler

TINY = dict(d_f=4, conv_channels=2, embed_dim=4, rnn_hidden=4, d_model=3, fcn_hidden=4,
            classifier_hidden=4, max_epochs=4)


def test_defaults_follow_training_protocol():
    p = MultimodalClassifier().get_params()
    assert (p["lr"], p["batch_size"], p["patience"], p["max_epochs"]) == (0.001, 32, 10, 200)
    assert p["fusion_mode"] == "attention"


def test_params_round_trip_through_clone():
    clf = MultimodalClassifier(**TINY).set_params(fusion_mode="late", branches=("cnn", "fcn"))
    twin = clone(clf)
    assert twin.get_params() == clf.get_params()
    assert twin is not clf


def test_fit_predict_score(small_splits):
    tr, va, te = small_splits
    clf = MultimodalClassifier(**TINY).fit(tr, eval_set=va)
    proba = clf.predict_proba(te)
    assert proba.shape == (len(te), 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-9)
    assert set(clf.predict(te)) <= {0, 1, 2}
    truth = np.array([s.label for s in te])
    assert clf.score(te) == np.mean(clf.predict(te) == truth)
    assert clf.score(te, truth) == clf.score(te)
    assert len(clf.report_.epochs) <= 4


def test_not_fitted_and_bad_labels(small_splits):
    tr, _, _ = small_splits
    with pytest.raises(NotFittedError):
        MultimodalClassifier().predict(tr)
    with pytest.raises(LabelOutOfRange):
        MultimodalClassifier(n_classes=2, **TINY).fit(tr)
    with pytest.raises(TypeError):
        MultimodalClassifier(**TINY).fit([1, 2, 3])


def test_scaler_uses_fit_statistics(small_splits):
    tr, _, te = small_splits
    scaler = MultimodalScaler(max_len=5).fit(tr)
    out = scaler.transform(tr)
    images = np.stack([s.image for s in out])
    np.testing.assert_allclose(images.mean(axis=0), 0, atol=1e-12)
    assert all(len(s.tokens) == 5 for s in out)
    test_out = scaler.transform(te)
    mean, std = scaler.image_stats_
    np.testing.assert_allclose(test_out[0].image.ravel(), (te[0].image.ravel() - mean) / std)
    assert set(scaler.stats_tensors()) == {"prep.image_mean", "prep.image_std",
                                           "prep.structured_mean", "prep.structured_std"}


def test_checkpoint_params_include_preprocessing(small_splits):
    tr, va, _ = small_splits
    clf = MultimodalClassifier(**TINY).fit(tr, eval_set=va)
    params = clf.checkpoint_params()
    assert "head.out.w" in params and "prep.image_mean" in params
    assert not any(k.startswith("prep.") for k in clf.model_.params)


def test_fit_is_reproducible(small_splits):
    tr, va, te = small_splits
    a = MultimodalClassifier(**TINY).fit(tr, eval_set=va).predict_proba(te)
    b = MultimodalClassifier(**TINY).fit(tr, eval_set=va).predict_proba(te)
    assert a.tobytes() == b.tobytes()

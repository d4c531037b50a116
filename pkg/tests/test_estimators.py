import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.metrics import accuracy_score

from neurogen.estimators import NeuroGenClassifier, ReferenceClassifier


@pytest.fixture(scope="module")
def blobs_xy(mini_blobs):
    # string labels exercise the label <-> index mapping
    names = np.array(["ant", "bee", "cat"])
    tr, te = mini_blobs.train, mini_blobs.test
    return tr.x, names[tr.y], te.x, names[te.y]


def test_reference_classifier_separates_blobs(blobs_xy):
    Xtr, ytr, Xte, yte = blobs_xy
    clf = ReferenceClassifier(hidden=16, epochs=15, lr=0.05, batch_size=16).fit(Xtr, ytr)
    assert clf.score(Xte, yte) >= 0.95
    assert set(clf.predict(Xte)) <= {"ant", "bee", "cat"}
    proba = clf.predict_proba(Xte)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-5)
    assert (clf.classes_[proba.argmax(axis=1)] == clf.predict(Xte)).all()


def test_reference_classifier_is_deterministic(blobs_xy):
    Xtr, ytr, Xte, _ = blobs_xy
    a = ReferenceClassifier(hidden=8, epochs=3, random_state=5).fit(Xtr, ytr)
    b = clone(a).fit(Xtr, ytr)
    np.testing.assert_array_equal(a.decision_function(Xte), b.decision_function(Xte))


def test_unfitted_and_shape_errors(blobs_xy):
    Xtr, ytr, Xte, _ = blobs_xy
    with pytest.raises(NotFittedError):
        ReferenceClassifier().predict(Xte)
    clf = ReferenceClassifier(hidden=4, epochs=1).fit(Xtr, ytr)
    with pytest.raises(ValueError):
        clf.predict(Xte[:, :3])
    with pytest.raises(ValueError):
        ReferenceClassifier().fit(Xtr, np.zeros(len(Xtr)))


def test_params_round_trip():
    clf = NeuroGenClassifier(d_model=16, stage2_lr=0.02)
    params = clf.get_params()
    assert params["d_model"] == 16 and params["stage2_lr"] == 0.02
    assert clone(clf).get_params() == params


def test_neurogen_classifier_end_to_end(blobs_xy):
    Xtr, ytr, Xte, yte = blobs_xy
    clf = NeuroGenClassifier(hidden=16, d_model=16, n_layers=2, n_heads=2, corpus_size=2,
                             reference_epochs=10, reference_lr=0.05, stage1_epochs=3, stage2_epochs=1,
                             stage2_lr=0.01, m=16, dataset_name="Blobs")
    clf.fit(Xtr, ytr)
    assert len(clf.stage1_curve_) == 3 and len(clf.stage2_curve_) == 1
    assert len(clf.weights_) == clf.arch_.num_params
    acc = accuracy_score(yte, clf.predict(Xte))
    assert acc == pytest.approx(clf.score(Xte, yte))
    w = clf.generate_for(Xtr[:16])
    assert len(w) == clf.arch_.num_params

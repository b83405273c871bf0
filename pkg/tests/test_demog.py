import numpy as np
import pytest

from gaclab.data import SynthConfig, generate_synthetic
from gaclab.demog import GroupClassifier, LabelMode, LabelProvider, provide_labels, train_group_classifier
from gaclab.tensor import Param


@pytest.fixture(scope="module")
def easy():
    return generate_synthetic(SynthConfig(nd=4, subjects_per_group=10, images_per_subject=4, image_size=16,
                                          group_signature_strength=3.0, noise_std=0.0, seed=4))


@pytest.fixture(scope="module")
def trained(easy):
    return train_group_classifier(easy, epochs=8, lr=0.05, seed=0)


def test_classifier_high_holdout_accuracy(trained):
    assert trained.accuracy >= 0.99
    assert len(trained.group_accuracy) == 4 and min(trained.group_accuracy) >= 0.99


def test_single_group_rejected():
    ds = generate_synthetic(SynthConfig(nd=1, subjects_per_group=6, images_per_subject=2, image_size=16))
    with pytest.raises(ValueError):
        train_group_classifier(ds)
    with pytest.raises(ValueError):
        GroupClassifier(1)


def test_ground_truth_labels(easy):
    assert np.array_equal(provide_labels(LabelProvider("ground_truth", 4), easy), easy.groups)


def test_estimated_with_perfect_classifier_equals_ground_truth(easy, trained, tmp_path):
    trained.classifier.save(tmp_path / "clf")
    prov = LabelProvider.from_checkpoint(tmp_path / "clf", 4)
    assert np.array_equal(trained.classifier.predict(easy.images), easy.groups)  # perfect on this set
    assert prov.mode is LabelMode.ESTIMATED
    assert np.array_equal(prov.labels(easy), easy.groups)


def test_estimated_needs_classifier():
    with pytest.raises(ValueError):
        LabelProvider("estimated", 4)


def test_classifier_checkpoint_kind_checked(tmp_path):
    from gaclab import tensor as T
    T.save_checkpoint(tmp_path / "x", {"a": np.ones(2)}, arch={"kind": "network"})
    with pytest.raises(ValueError):
        GroupClassifier.load(tmp_path / "x")


def test_random_labels_binomial_bound():
    ds = generate_synthetic(SynthConfig(nd=4, subjects_per_group=250, images_per_subject=10, image_size=8))
    labels = LabelProvider("random", 4, seed=11).labels(ds)
    n, p = len(labels), 0.25
    freq = np.bincount(labels, minlength=4) / n
    assert n == 10_000
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n))


def test_random_labels_stable(easy):
    a = LabelProvider("random", 4, seed=3)
    b = LabelProvider("random", 4, seed=3)
    assert np.array_equal(a.labels(easy), b.labels(easy))
    # a sample keeps its label whatever subset it is queried in
    idx = np.array([5, 17, 2])
    assert np.array_equal(a.labels(easy, idx), a.labels(easy)[idx])
    assert not np.array_equal(a.labels(easy), LabelProvider("random", 4, seed=4).labels(easy))


def test_estimated_labels_do_not_touch_classifier(easy, trained):
    prov = LabelProvider("estimated", 4, trained.classifier)
    params = trained.classifier.params()
    before = [(p.data.copy(), None if p.grad is None else p.grad.copy()) for p in params]
    prov.labels(easy)
    for p, (data, grad) in zip(params, before):
        assert np.array_equal(p.data, data)
        assert (p.grad is None and grad is None) or np.array_equal(p.grad, grad)

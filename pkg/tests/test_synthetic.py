import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from s2ifsl.synthetic import SyntheticSpec, class_centers, synthesize_dataset
from s2ifsl.types import ValidationError, load_bundle, save_bundle, validate_bundle


def test_zero_confusability_is_linearly_separable():
    spec = SyntheticSpec(n_base_classes=6, n_novel_train=4, n_novel_val=2, n_novel_test=2, input_dim=16,
                         base_train_per_class=40, novel_per_class=40, cluster_spread=0.1, confusability=0.0)
    b = synthesize_dataset(spec, seed=1)
    X = np.concatenate([b.base_train.X, b.novel_train.X])
    is_novel = np.r_[np.zeros(len(b.base_train)), np.ones(len(b.novel_train))]
    clf = LogisticRegression(max_iter=2000).fit(X, is_novel)
    assert clf.score(X, is_novel) >= 0.99


def test_same_seed_same_bundle():
    spec = SyntheticSpec(n_base_classes=3, n_novel_train=2, n_novel_val=1, n_novel_test=1, input_dim=4,
                         base_train_per_class=5, novel_per_class=5)
    a, b = synthesize_dataset(spec, 7), synthesize_dataset(spec, 7)
    for name, split in a.splits().items():
        np.testing.assert_array_equal(split.X, b.splits()[name].X)
        np.testing.assert_array_equal(split.y, b.splits()[name].y)
    assert not np.array_equal(a.base_train.X, synthesize_dataset(spec, 8).base_train.X)


@pytest.mark.parametrize("fine_dims", [0, 3])
def test_full_confusability_places_every_novel_center_near_a_base_center(fine_dims):
    spec = SyntheticSpec(n_base_classes=5, n_novel_train=6, n_novel_val=3, n_novel_test=3, input_dim=8,
                         confusability=1.0, cluster_spread=0.5, fine_dims=fine_dims)
    base, novel, anchor = class_centers(spec, seed=2)
    dists = np.linalg.norm(novel[:, None, :] - base[None, :, :], axis=2)
    assert (dists.min(axis=1) <= 2 * spec.cluster_spread + 1e-12).all()
    assert (anchor > 0).all()


def test_splits_are_disjoint_and_valid(tiny_bundle):
    assert validate_bundle(tiny_bundle) == []
    classes = [s.classes for s in (tiny_bundle.novel_train, tiny_bundle.novel_val, tiny_bundle.novel_test)]
    assert not (classes[0] & classes[1]) and not (classes[1] & classes[2]) and not (classes[0] & classes[2])
    assert tiny_bundle.base_classes == set(range(1, tiny_bundle.n_base + 1))


def test_bundle_file_roundtrip(tmp_path, tiny_bundle):
    path = tmp_path / "b.csv"
    save_bundle(tiny_bundle, path, meta={"note": "x"})
    back = load_bundle(path)
    for name, split in tiny_bundle.splits().items():
        np.testing.assert_array_equal(split.X, back.splits()[name].X)
        np.testing.assert_array_equal(split.y, back.splits()[name].y)


@pytest.mark.parametrize("kw", [dict(confusability=1.5), dict(n_base_classes=0), dict(fine_dims=99),
                                dict(cluster_spread=0.0)])
def test_spec_validation(kw):
    with pytest.raises(ValidationError):
        SyntheticSpec(**kw)

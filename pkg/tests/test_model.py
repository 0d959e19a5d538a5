import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from s2ifsl.model import (IncrementalCosineModel, build_joint_weights, compute_prototypes, cosine_classify,
                          load_checkpoint, save_checkpoint)
from s2ifsl.training import cross_entropy_loss
from s2ifsl.types import ValidationError

from conftest import central_difference, relative_error

GOLDEN = Path(__file__).parent / "golden" / "features.json"


def test_identity_extractor_passes_input_through():
    m = IncrementalCosineModel(3, 2, hidden=(), d=None)
    v = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(m(v).detach().numpy(), v)


def test_empty_batch_gives_empty_features():
    m = IncrementalCosineModel(4, 2, hidden=(8,), d=5)
    assert tuple(m(np.zeros((0, 4))).shape) == (0, 5)


def test_input_dimension_mismatch_raises():
    m = IncrementalCosineModel(4, 2)
    with pytest.raises(ValidationError, match="shape"):
        m(np.zeros((2, 3)))


def test_golden_features():
    golden = json.loads(GOLDEN.read_text())
    m = IncrementalCosineModel(4, 3, hidden=(5,), d=3, seed=golden["seed"])
    out = m(np.array(golden["input"])).detach().numpy()
    np.testing.assert_allclose(out, golden["features"], rtol=0, atol=1e-12)


def test_two_class_closed_form():
    f = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    W = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    p = cosine_classify(f, W, 1.0)[0].numpy()
    np.testing.assert_allclose(p, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-12)
    np.testing.assert_allclose(p, [0.7311, 0.2689], atol=5e-5)


def test_orthogonal_feature_is_uniform():
    f = torch.tensor([[0.0, 0.0, 3.0]], dtype=torch.float64)
    W = torch.tensor([[1.0, 0.0, -1.0, 2.0], [0.0, 1.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
    np.testing.assert_allclose(cosine_classify(f, W, 7.0).numpy(), 0.25, atol=1e-12)


def test_zero_norm_feature_gives_no_nan():
    p = cosine_classify(torch.zeros(1, 2, dtype=torch.float64), torch.eye(2, dtype=torch.float64), 10.0)
    assert torch.isfinite(p).all()


def test_prototypes_examples():
    one = compute_prototypes(np.array([[1.0, 2.0], [3.0, 4.0]]), [3, 4], n_base=2, n_way=2)
    np.testing.assert_array_equal(one.numpy(), [[1.0, 3.0], [2.0, 4.0]])
    mean = compute_prototypes(np.array([[1.0, 0.0], [0.0, 1.0]]), [1, 1], n_base=0, n_way=1)
    np.testing.assert_array_equal(mean.numpy().ravel(), [0.5, 0.5])


def test_prototypes_match_summation_oracle():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(25, 6))
    labels = np.repeat(np.arange(11, 16), 5)
    rng.shuffle(labels)
    protos = compute_prototypes(feats, labels, n_base=10, n_way=5).numpy()
    for j in range(5):
        rows = [feats[i] for i in range(25) if labels[i] == 11 + j]
        acc = np.zeros(6)
        for r in rows:
            acc = acc + r
        np.testing.assert_allclose(protos[:, j], acc / len(rows), atol=1e-14)


def test_prototypes_name_the_empty_class():
    with pytest.raises(ValidationError, match="class 4"):
        compute_prototypes(np.ones((2, 2)), [3, 3], n_base=2, n_way=2)


def test_build_joint_weights():
    base = torch.randn(4, 2, dtype=torch.float64)
    assert torch.equal(build_joint_weights(base).joint, base)
    novel = torch.randn(4, 1, dtype=torch.float64)
    W = build_joint_weights(base, novel).joint
    assert W.shape == (4, 3)
    assert torch.equal(W[:, :2], base) and torch.equal(W[:, 2], novel[:, 0])
    with pytest.raises(ValidationError, match="dimension"):
        build_joint_weights(base, torch.zeros(3, 1, dtype=torch.float64))


def test_cross_entropy_gradients_match_finite_differences():
    m = IncrementalCosineModel(3, 3, hidden=(4,), d=3, gamma_init=2.0, seed=5)
    x = np.random.default_rng(1).normal(size=(6, 3))
    y = [0, 1, 2, 0, 1, 2]

    def loss():
        return cross_entropy_loss(cosine_classify(m(x), m.base_weight, m.gamma), y)

    params = list(m.parameters())
    analytic = torch.autograd.grad(loss(), params)
    numeric = central_difference(loss, params)
    for a, n in zip(analytic, numeric):
        assert relative_error(a.numpy(), n) <= 1e-4


def test_checkpoint_roundtrip_and_hash_refusal(tmp_path):
    m = IncrementalCosineModel(4, 3, hidden=(5,), d=3, seed=9)
    with torch.no_grad():
        m.gamma.fill_(7.5)
    path = tmp_path / "m.pt"
    save_checkpoint(m, path, "abc123")
    again, blob = load_checkpoint(path, expected_hash="abc123")
    assert blob["gamma"] == 7.5 and blob["d"] == 3
    for (k, a), (_, b) in zip(m.state_dict().items(), again.state_dict().items()):
        assert torch.equal(a, b), k
    with pytest.raises(ValidationError, match="hash"):
        load_checkpoint(path, expected_hash="other")


def test_snapshot_is_independent():
    m = IncrementalCosineModel(4, 3, seed=1)
    snap = m.snapshot()
    with torch.no_grad():
        m.base_weight.add_(1.0)
    assert not torch.equal(snap.base_weight, m.base_weight)

import numpy as np
import pytest
import torch

from s2ifsl.model import IncrementalCosineModel, compute_prototypes
from s2ifsl.refinement import (EmptyUnlabeledWarning, RefinementConfig, ema_update, reestimate_prototypes,
                               refine_loop, refine_prototypes, slice_novel_predictions)
from s2ifsl.types import ClassifierWeights, Episode, ValidationError

import oracles


def t(x):
    return torch.tensor(np.asarray(x, dtype=float), dtype=torch.float64)


def test_slicing_examples():
    preds = t([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.6, 0.0, 0.4, 0.0]])
    out = slice_novel_predictions(preds, 2).numpy()
    np.testing.assert_array_equal(out[0], [0, 0])
    np.testing.assert_array_equal(out[1], [0, 1])
    assert out[2].sum() == pytest.approx(0.4)
    with pytest.raises(ValidationError):
        slice_novel_predictions(preds, 4)


def test_reestimate_reduces_to_support_mean():
    sup = t([[1.0, 1.0], [3.0, 1.0], [0.0, 2.0]])
    labels = [3, 3, 4]
    p = reestimate_prototypes(t(np.zeros((2, 2))), t([[5.0, 5.0], [7.0, 7.0]]), sup, labels, n_base=2)
    torch.testing.assert_close(p, compute_prototypes(sup, labels, 2, 2), rtol=0, atol=1e-15)


def test_reestimate_single_unlabeled_and_support():
    p = reestimate_prototypes(t([[1.0]]), t([[2.0, 0.0]]), t([[0.0, 4.0]]), [1], n_base=0)
    np.testing.assert_allclose(p.numpy().ravel(), [1.0, 2.0])


def test_reestimate_matches_weighted_mean_loop():
    u = [[1.0, 2.0], [3.0, -1.0]]
    s = [0.5, 0.5]
    p = reestimate_prototypes(t([[0.5], [0.5]]), t(u), t([s]), [1], n_base=0).numpy().ravel()
    num = [0.0, 0.0]
    for row in u:
        for k in range(2):
            num[k] += 0.5 * row[k]
    expected = [(num[k] + s[k]) / 2.0 for k in range(2)]
    np.testing.assert_allclose(p, expected, atol=1e-15)


def test_ema_examples():
    old, new = t([[0.0], [0.0]]), t([[2.0], [4.0]])
    assert torch.equal(ema_update(old, new, 1.0), new)
    np.testing.assert_array_equal(ema_update(old, new, 0.5).numpy().ravel(), [1.0, 2.0])
    with pytest.raises(ValidationError):
        ema_update(old, new, 0.0)
    with pytest.raises(ValidationError):
        RefinementConfig(alpha=1.5)


def test_ema_stays_on_segment():
    rng = np.random.default_rng(0)
    old, new = t(rng.normal(size=(3, 4))), t(rng.normal(size=(3, 4)))
    for alpha in (0.1, 0.37, 0.9):
        mid = ema_update(old, new, alpha)
        lam = (mid - old) / (new - old)
        torch.testing.assert_close(lam, torch.full_like(lam, alpha), rtol=0, atol=1e-12)


def _tiny():
    rng = np.random.default_rng(4)
    base = t(rng.normal(size=(2, 2)))
    protos = t(rng.normal(size=(2, 2)))
    unl = t(rng.normal(size=(3, 2)))
    sup = protos.T.clone()
    return base, protos, unl, sup, [3, 4]


def test_refine_matches_straight_line_oracle():
    base, protos, unl, sup, labels = _tiny()
    for steps, alpha in ((1, 1.0), (3, 0.6)):
        got = refine_prototypes(base, protos, unl, sup, labels, 2.0, RefinementConfig(steps, alpha))
        want = oracles.refine(base.T.tolist(), protos.T.tolist(), unl.tolist(), sup.tolist(), labels,
                              2.0, steps, alpha, 2)
        np.testing.assert_allclose(got.numpy().T, want, atol=1e-10)


def test_two_steps_equal_one_step_twice():
    base, protos, unl, sup, labels = _tiny()
    one = RefinementConfig(1, 0.7)
    twice = refine_prototypes(base, refine_prototypes(base, protos, unl, sup, labels, 3.0, one),
                              unl, sup, labels, 3.0, one)
    both = refine_prototypes(base, protos, unl, sup, labels, 3.0, RefinementConfig(2, 0.7))
    torch.testing.assert_close(both, twice, rtol=0, atol=0)


def _episode(unlabeled):
    return Episode.from_arrays(2, np.array([[0.0, 1.0], [0.0, -1.0]]), [3, 4], np.zeros((0, 2)), [],
                               unlabeled)


def test_unlabeled_all_on_base_leaves_novel_unchanged():
    m = IncrementalCosineModel(2, 2, hidden=(), d=None, gamma_init=1e4)
    with torch.no_grad():
        m.base_weight.copy_(t([[1.0, -1.0], [0.0, 0.0]]))
    ep = _episode(np.array([[1.0, 0.0], [-2.0, 0.0]]))
    W = ClassifierWeights(m.base_weight.detach().clone(), t([[0.0, 0.0], [1.0, -1.0]]))
    out = refine_loop(m, W, ep, RefinementConfig())
    torch.testing.assert_close(out.novel, W.novel, rtol=0, atol=1e-12)
    assert torch.equal(out.base, W.base)


def test_empty_unlabeled_warns_and_returns_input():
    m = IncrementalCosineModel(2, 2, hidden=(), d=None)
    W = ClassifierWeights(m.base_weight.detach().clone(), t([[0.0, 0.0], [1.0, -1.0]]))
    with pytest.warns(EmptyUnlabeledWarning):
        out = refine_loop(m, W, _episode(np.zeros((0, 2))), RefinementConfig())
    assert out is W


def test_config_validation():
    with pytest.raises(ValidationError):
        RefinementConfig(n_steps=0)

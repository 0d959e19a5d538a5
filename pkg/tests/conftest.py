import numpy as np
import pytest
import torch

from s2ifsl.synthetic import SyntheticSpec, synthesize_dataset

torch.set_num_threads(1)


TINY_SPEC = SyntheticSpec(
    n_base_classes=4, n_novel_train=6, n_novel_val=3, n_novel_test=3, input_dim=6,
    base_train_per_class=30, base_val_per_class=10, base_test_per_class=40, novel_per_class=40,
    confusability=0.5,
)


@pytest.fixture(scope="session")
def tiny_bundle():
    return synthesize_dataset(TINY_SPEC, seed=3)


@pytest.fixture(scope="session")
def full_size_bundle():
    """Large enough for the 5-way 1/5-shot counts used by the evaluation protocol."""
    spec = SyntheticSpec(n_base_classes=20, n_novel_train=10, n_novel_val=5, n_novel_test=10,
                         input_dim=8, base_train_per_class=20, base_val_per_class=10,
                         base_test_per_class=30, novel_per_class=100)
    return synthesize_dataset(spec, seed=0)


def central_difference(fn, tensors, step=1e-5):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor, perturbing in place."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = np.zeros(t.shape)
            flat = t.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                fp = float(fn())
                flat[i] = orig - step
                fm = float(fn())
                flat[i] = orig
                g.reshape(-1)[i] = (fp - fm) / (2 * step)
            grads.append(g)
    return grads


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)

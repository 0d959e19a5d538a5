"""Straight-line reference implementations used as test oracles.

Written with explicit Python loops and the ``math`` module so they share no
code path with the vectorised package implementations.
"""
import math

import numpy as np


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _norm(a):
    return max(math.sqrt(_dot(a, a)), 1e-12)


def _cos(a, b):
    return _dot(a, b) / (_norm(a) * _norm(b))


def _softmax(logits):
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    s = sum(e)
    return [v / s for v in e]


def cosine_probs(features, columns, gamma):
    """Rows of softmax(gamma * cos) for a list of feature vectors and weight columns."""
    return [_softmax([gamma * _cos(f, w) for w in columns]) for f in features]


def refine(base_cols, protos, unlabeled, support, support_labels, gamma, n_steps, alpha, n_base):
    """Brute-force refinement; vectors are plain lists, ``protos`` a list of columns."""
    protos = [list(p) for p in protos]
    d = len(protos[0])
    for _ in range(n_steps):
        probs = cosine_probs(unlabeled, list(base_cols) + protos, gamma)
        new = []
        for j in range(len(protos)):
            num = [0.0] * d
            den = 0.0
            for u, row in zip(unlabeled, probs):
                w = row[n_base + j]
                for t in range(d):
                    num[t] += w * u[t]
                den += w
            for s, lab in zip(support, support_labels):
                if lab == n_base + 1 + j:
                    for t in range(d):
                        num[t] += s[t]
                    den += 1.0
            new.append([v / den for v in num])
        protos = [[alpha * a + (1 - alpha) * b for a, b in zip(pn, po)] for pn, po in zip(new, protos)]
    return protos


def label_propagation(columns, unlabeled, queries, bandwidth, damping, iterations):
    """Loop-based damped label spreading over [columns, unlabeled, queries]."""
    V = list(columns) + list(unlabeled) + list(queries)
    n, C = len(V), len(columns)
    A = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j:
                dist = 1.0 - _cos(V[i], V[j])
                A[i][j] = math.exp(-dist * dist / (2 * bandwidth * bandwidth))
    deg = [sum(r) for r in A]
    S = [[A[i][j] / math.sqrt(deg[i] * deg[j]) for j in range(n)] for i in range(n)]
    Y = [[1.0 if (i < C and k == i) else 0.0 for k in range(C)] for i in range(n)]
    F = [r[:] for r in Y]
    for _ in range(iterations):
        F = [[damping * sum(S[i][m] * F[m][k] for m in range(n)) + (1 - damping) * Y[i][k]
              for k in range(C)] for i in range(n)]
    out = []
    for row in F[n - len(queries):]:
        s = sum(row)
        out.append([v / s for v in row])
    return out


def label_propagation_fixed_point(columns, unlabeled, queries, bandwidth, damping):
    """Closed form ``(I - damping * S)^-1 Y`` by a direct linear solve, rows normalised."""
    V = np.array(list(columns) + list(unlabeled) + list(queries), dtype=float)
    Vn = V / np.linalg.norm(V, axis=1, keepdims=True)
    A = np.exp(-((1 - Vn @ Vn.T) ** 2) / (2 * bandwidth ** 2))
    np.fill_diagonal(A, 0)
    dinv = 1 / np.sqrt(A.sum(1))
    S = dinv[:, None] * A * dinv[None, :]
    C = len(columns)
    Y = np.zeros((len(V), C))
    Y[:C, :C] = np.eye(C)
    F = np.linalg.solve(np.eye(len(V)) - damping * S, Y)[-len(queries):]
    return F / F.sum(1, keepdims=True)


def count_accuracies(pj, pb, pn, labels, n_base):
    """Five accuracies by explicit counting, argmax ties to the lowest index."""
    def argmax(row):
        best = 0
        for k in range(1, len(row)):
            if row[k] > row[best]:
                best = k
        return best

    hits = {"all": [0, 0], "b_all": [0, 0], "n_all": [0, 0], "b_b": [0, 0], "n_n": [0, 0]}
    for i, y in enumerate(labels):
        joint_ok = argmax(pj[i]) + 1 == y
        hits["all"][0] += joint_ok
        hits["all"][1] += 1
        if y <= n_base:
            hits["b_all"][0] += joint_ok
            hits["b_all"][1] += 1
            hits["b_b"][0] += argmax(pb[i]) + 1 == y
            hits["b_b"][1] += 1
        else:
            hits["n_all"][0] += joint_ok
            hits["n_all"][1] += 1
            hits["n_n"][0] += argmax(pn[i]) + n_base + 1 == y
            hits["n_n"][1] += 1
    return {k: (h / t if t else float("nan")) for k, (h, t) in hits.items()}


def ntxent(views, tau):
    """Contrastive loss over 2B views with partner ``i <-> i + B``."""
    n = len(views)
    B = n // 2
    total = 0.0
    for i in range(n):
        j = (i + B) % n
        denom = sum(math.exp(_cos(views[i], views[k]) / tau) for k in range(n) if k != i)
        total += -math.log(math.exp(_cos(views[i], views[j]) / tau) / denom)
    return total / n

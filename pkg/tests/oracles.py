"""Independent reference implementations used as test oracles.

These deliberately avoid the library code paths they check: finite
differences instead of backprop, an unweighted Lloyd loop instead of the
weighted one, plain logistic regression instead of the net harness.
"""

import numpy as np

from bqkit.container import TensorRecord
from bqkit.harness import forward


def loss_of(model, x, y):
    """Mean cross-entropy from forward probabilities only."""
    probs = forward(model, x)
    p = probs[np.arange(len(y)), y]
    return -float(np.log(np.maximum(p, 1e-300)).mean())


def fd_gradient_check(model, x, y, grads, rtol=1e-3, h=1e-4, samples=6, seed=0):
    """Central-difference check of sampled weight entries per tensor.

    Returns the worst relative error seen. Entries with both analytic and
    numeric gradient below an absolute floor are skipped (relative error is
    meaningless at zero).
    """
    gen = np.random.default_rng(seed)
    worst = 0.0
    for name, g in grads.items():
        t = model.tensors[name]
        g = np.asarray(g).reshape(-1)
        idx = gen.choice(t.size, size=min(samples, t.size), replace=False)
        for i in idx:
            base = t.data.astype(np.float64).copy()
            plus = base.copy()
            plus[i] += h
            minus = base.copy()
            minus[i] -= h
            m_plus = model.replace_tensor(TensorRecord(name, t.dtype, t.shape, plus.astype(np.float32)))
            m_minus = model.replace_tensor(TensorRecord(name, t.dtype, t.shape, minus.astype(np.float32)))
            fd = (loss_of(m_plus, x, y) - loss_of(m_minus, x, y)) / (2 * h)
            an = float(g[i])
            if abs(fd) < 1e-7 and abs(an) < 1e-7:
                continue
            rel = abs(fd - an) / max(abs(fd), abs(an))
            worst = max(worst, rel)
            assert rel <= rtol, f"{name}[{i}]: analytic {an} vs fd {fd} (rel {rel})"
    return worst


def unweighted_lloyd(points, init_centroids, max_iter=100, tol=1e-6):
    """Plain k-means with the same tie/stop conventions as weighted_kmeans."""
    centroids = init_centroids.copy()
    b = centroids.shape[0]
    trace = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        sqd = d2[np.arange(len(points)), labels]
        empties = np.flatnonzero(np.bincount(labels, minlength=b) == 0)
        if empties.size:
            order = np.argsort(-(sqd / len(points)), kind="stable")
            for taken, j in enumerate(empties):
                centroids[j] = points[order[taken]]
            d2 = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
            labels = np.argmin(d2, axis=1)
            sqd = d2[np.arange(len(points)), labels]
        obj = float((sqd / len(points)).sum())
        trace.append(obj)
        if len(trace) > 1 and trace[-2] - obj < tol:
            break
        for j in range(b):
            members = labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
    d2 = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return centroids, labels


def logistic_regression_accuracy(x, y, classes, lr=0.5, steps=300):
    """Multinomial logistic regression by full-batch gradient descent."""
    n, d = x.shape
    w = np.zeros((d, classes))
    b = np.zeros(classes)
    onehot = np.eye(classes)[y]
    for _ in range(steps):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return float(((x @ w + b).argmax(axis=1) == y).mean())


def within_bin_variance(values, edges):
    """Sum of squared deviation from each bin's mean, by direct enumeration."""
    total = 0.0
    for i in range(len(edges) - 1):
        members = values[(values >= edges[i]) & (values < edges[i + 1])]
        if members.size:
            total += float(((members - members.mean()) ** 2).sum())
    return total

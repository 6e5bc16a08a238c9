"""Pure-numpy kernels for the synthetic task models.

These are the reference semantics; the optional Cython backend in
``_fastkern.pyx`` implements the same signatures. Weight layouts:

  linear-softmax: [W (C*s), b (C)]
  mlp-1hidden:    [W1 (h*s), b1 (h), W2 (C*h), b2 (C)]
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def _softmax_ce(logits: np.ndarray, y: np.ndarray):
    """Row-stable softmax probabilities and mean cross-entropy."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    p = ez / denom
    rows = np.arange(y.shape[0])
    loss = float(np.mean(np.log(denom[:, 0]) - z[rows, y]))
    return p, loss


def linear_loss_grad(w, X, y, n_classes):
    n, s = X.shape
    W = w[: n_classes * s].reshape(n_classes, s)
    b = w[n_classes * s :]
    p, loss = _softmax_ce(X @ W.T + b, y)
    g = p
    g[np.arange(n), y] -= 1.0
    g /= n
    grad = np.empty_like(w)
    grad[: n_classes * s] = (g.T @ X).ravel()
    grad[n_classes * s :] = g.sum(axis=0)
    return loss, grad


def mlp_loss_grad(w, X, y, n_classes, hidden):
    n, s = X.shape
    o1 = hidden * s
    o2 = o1 + hidden
    o3 = o2 + n_classes * hidden
    W1 = w[:o1].reshape(hidden, s)
    b1 = w[o1:o2]
    W2 = w[o2:o3].reshape(n_classes, hidden)
    b2 = w[o3:]
    h1 = np.tanh(X @ W1.T + b1)
    p, loss = _softmax_ce(h1 @ W2.T + b2, y)
    g = p
    g[np.arange(n), y] -= 1.0
    g /= n
    da1 = (g @ W2) * (1.0 - h1 * h1)
    grad = np.empty_like(w)
    grad[:o1] = (da1.T @ X).ravel()
    grad[o1:o2] = da1.sum(axis=0)
    grad[o2:o3] = (g.T @ h1).ravel()
    grad[o3:] = g.sum(axis=0)
    return loss, grad


def _epoch(loss_grad, w, X, y, eta, order, batch_size):
    w = w.copy()
    n = order.shape[0]
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        _, grad = loss_grad(w, X[idx], y[idx])
        w -= eta * grad
    return w


def linear_sgd_epoch(w, X, y, n_classes, eta, order, batch_size):
    return _epoch(
        lambda wv, Xb, yb: linear_loss_grad(wv, Xb, yb, n_classes),
        w, X, y, eta, order, batch_size,
    )


def mlp_sgd_epoch(w, X, y, n_classes, hidden, eta, order, batch_size):
    return _epoch(
        lambda wv, Xb, yb: mlp_loss_grad(wv, Xb, yb, n_classes, hidden),
        w, X, y, eta, order, batch_size,
    )

"""Downstream probes on frozen features: 1-NN (cosine) and a linear probe.

Feature extraction always runs uncompressed (identity strategy, no
augmentation) on class-token backbone outputs; a module-level assertion
hook lets tests verify no compression code ran.

The linear probe is multinomial logistic regression with L2 weight decay,
optimized by deterministic full-batch gradient descent with backtracking
line search from a zero initialization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import compression, vit


@dataclass
class FeatureBank:
    features: np.ndarray  # (N, d)
    labels: np.ndarray    # (N,)

    def normalized(self):
        n = np.linalg.norm(self.features, axis=1, keepdims=True)
        return self.features / np.maximum(n, 1e-12)

    def __len__(self):
        return len(self.labels)


def extract_features(params, cfg, dataset, batch_size=64, dtype=np.float32):
    """Backbone class-token features for every image; deterministic,
    no augmentation, identity strategy."""
    comp_calls = compression.calls
    feats = []
    n = len(dataset)
    for start in range(0, n, batch_size):
        imgs = dataset.images[start:start + batch_size]
        views = compression.stack_views(
            [compression.make_view(img, cfg.patch) for img in imgs], dtype=dtype)
        feats.append(vit.encode(params, views, cfg, head="backbone"))
    assert compression.calls == comp_calls, "probes must not compress sequences"
    return FeatureBank(np.concatenate(feats, axis=0), np.array(dataset.labels))


def nn_accuracy(train_bank: FeatureBank, test_bank: FeatureBank, exclude_self=False):
    """1-nearest-neighbor accuracy under cosine similarity."""
    if train_bank.features.shape[1] != test_bank.features.shape[1]:
        raise ValueError("feature dimensions differ")
    if len(train_bank) == 0 or len(test_bank) == 0:
        raise ValueError("empty feature bank")
    sims = test_bank.normalized() @ train_bank.normalized().T
    if exclude_self:
        if len(train_bank) != len(test_bank):
            raise ValueError("self-exclusion requires banks over the same samples")
        np.fill_diagonal(sims, -np.inf)
    pred = train_bank.labels[np.argmax(sims, axis=1)]
    return float(np.mean(pred == test_bank.labels))


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _probe_objective(w, b, x, y_onehot, reg):
    logits = x @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=1))
    nll = np.mean(lse - logits[np.arange(len(x)), np.argmax(y_onehot, axis=1)])
    return nll + 0.5 * reg * np.sum(w * w)


def linear_probe(train_bank: FeatureBank, test_bank: FeatureBank,
                 reg_strength=1e-3, tol=1e-6, max_iter=5000):
    """Multinomial logistic regression accuracy on frozen features.

    Objective: mean cross-entropy + 0.5 * reg * ||W||^2 (bias unpenalized),
    minimized by full-batch gradient descent with backtracking line search.
    Non-convergence returns the best iterate with a warning.
    """
    x = np.asarray(train_bank.features, dtype=np.float64)
    y = np.asarray(train_bank.labels)
    n_classes = int(max(y.max(), test_bank.labels.max())) + 1
    if n_classes < 2:
        raise ValueError("linear probe needs at least two classes")
    n, d = x.shape
    y_onehot = np.zeros((n, n_classes))
    y_onehot[np.arange(n), y] = 1.0

    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    yw, yb = w, b
    obj = _probe_objective(w, b, x, y_onehot, reg_strength)
    step = 1.0
    t_mom = 1.0
    converged = False
    for _ in range(max_iter):
        # Nesterov acceleration with function-value restarts
        p = _softmax_rows(x @ yw + yb)
        delta = (p - y_onehot) / n
        gw = x.T @ delta + reg_strength * yw
        gb = delta.sum(axis=0)
        gnorm = np.sqrt(np.sum(gw * gw) + np.sum(gb * gb))
        if gnorm <= tol:
            converged = True
            break
        step = min(step * 2.0, 1e4)
        while step > 1e-12:
            w2, b2 = yw - step * gw, yb - step * gb
            obj2 = _probe_objective(w2, b2, x, y_onehot, reg_strength)
            if obj2 <= obj + 1e-12:
                break
            step *= 0.5
        if obj2 > obj:  # restart momentum from the best point
            yw, yb, t_mom = w, b, 1.0
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        beta = (t_mom - 1.0) / t_next
        yw, yb = w2 + beta * (w2 - w), b2 + beta * (b2 - b)
        w, b, obj, t_mom = w2, b2, obj2, t_next
    if not converged:
        warnings.warn(f"linear probe stopped at max_iter with |grad|={gnorm:.2e}")

    logits = np.asarray(test_bank.features, dtype=np.float64) @ w + b
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == test_bank.labels))

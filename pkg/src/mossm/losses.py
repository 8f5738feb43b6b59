"""Cross-entropy + Lovasz-Softmax joint loss."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import RowNotNormalized

__all__ = ["cross_entropy", "lovasz_grad", "lovasz_softmax", "joint_loss", "class_frequency_weights"]

IGNORE = -1


def cross_entropy(logits, targets, ignore_id: int = IGNORE, class_weights=None) -> T.Tensor:
    """Mean negative log-likelihood over non-ignored rows (0 when all are ignored)."""
    logits = T._as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    valid = targets != ignore_id
    onehot = np.zeros((n, k))
    onehot[np.nonzero(valid)[0], targets[valid]] = 1.0
    if class_weights is not None:
        onehot *= np.asarray(class_weights, dtype=np.float64)
    denom = onehot.sum()
    if denom == 0:
        return T.mul(T.sum(logits), 0.0)
    return T.mul(T.sum(T.mul(T.log_softmax(logits), onehot)), -1.0 / denom)


def class_frequency_weights(targets, num_classes: int, ignore_id: int = IGNORE) -> np.ndarray:
    """Inverse-sqrt frequency weights, normalized to mean 1 over present classes."""
    t = np.asarray(targets)
    counts = np.bincount(t[t != ignore_id], minlength=num_classes).astype(np.float64)
    w = np.where(counts > 0, 1.0 / np.sqrt(np.maximum(counts, 1.0)), 0.0)
    present = counts > 0
    return w / w[present].mean() if present.any() else np.ones(num_classes)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, targets, ignore_id: int = IGNORE, classes: str | list = "present",
                   tol: float = 1e-5) -> T.Tensor:
    """Mean over classes of <errors sorted descending, Lovasz gradient>.

    ``classes="present"`` averages only over classes that occur in ``targets``.
    """
    probs = T._as_tensor(probs)
    targets = np.asarray(targets, dtype=np.int64)
    valid = np.nonzero(targets != ignore_id)[0]
    if np.abs(probs.data[valid].sum(axis=1) - 1.0).max(initial=0.0) > tol:
        raise RowNotNormalized("probability rows must sum to 1")
    if len(valid) == 0:
        return T.mul(T.sum(probs), 0.0)
    if len(valid) < len(targets):
        probs = T.take(probs, valid)
        targets = targets[valid]
    k = probs.shape[1]
    class_list = range(k) if classes in ("all", "present") else classes
    terms = []
    for c in class_list:
        fg = (targets == c).astype(np.float64)
        if classes == "present" and fg.sum() == 0:
            continue
        sel = np.zeros((k, 1))
        sel[c, 0] = 1.0
        p_c = T.reshape(T.linear(probs, sel), (-1,))
        errors = T.abs(T.add(p_c, -fg))
        order = np.argsort(-errors.data, kind="stable")
        terms.append(T.sum(T.mul(T.take(errors, order, permutation=True), lovasz_grad(fg[order]))))
    if not terms:
        return T.mul(T.sum(probs), 0.0)
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return T.mul(total, 1.0 / len(terms))


def joint_loss(logits, targets, ignore_id: int = IGNORE, class_weights=None):
    """Returns (total, cross_entropy, lovasz) tensors."""
    ce = cross_entropy(logits, targets, ignore_id, class_weights)
    ls = lovasz_softmax(T.softmax(logits), targets, ignore_id)
    return T.add(ce, ls), ce, ls

"""Label embeddings: map a class label and a forward output vector to a
reconstructed output vector whose argmax is the label.

Three variants are provided.  ``max_assignment`` is optimal under the L1
distance, ``nearest_embedding`` under the L2 distance, and
``one_hot_embedding`` is the trivial baseline used for ablations.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import LabelOutOfRange

__all__ = [
    "EmbeddingResult",
    "max_assignment",
    "nearest_embedding",
    "one_hot_embedding",
    "embed",
    "EMBEDDING_METHODS",
]


@dataclass(frozen=True)
class EmbeddingResult:
    """Reconstructed output vector plus the solve's bookkeeping.

    ``active_set`` holds the indices whose constraints are active at the
    optimum (always empty for the L1 and one-hot variants).  ``theta`` is
    the common shift applied to the label entry; the multiplier for an
    active index ``i`` is recoverable as ``2 * (d_i - theta)`` where
    ``d_i`` is the entry's initial excess over the label entry.
    """

    a_star: np.ndarray
    method: str
    active_set: frozenset = field(default_factory=frozenset)
    theta: float = 0.0


def _check_label(scores, label):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise LabelOutOfRange(f"expected a vector of scores, got shape {scores.shape}")
    label = int(label)
    if not 0 <= label < scores.shape[0]:
        raise LabelOutOfRange(f"label {label} outside [0, {scores.shape[0]})")
    return scores, label


def max_assignment(scores, label):
    """L1-optimal embedding: raise the label entry to the current maximum.

    Every other entry is left unchanged, so the L1 distance to ``scores``
    equals ``max(scores) - scores[label]``.
    """
    scores, label = _check_label(scores, label)
    out = scores.copy()
    out[label] = scores.max()
    return EmbeddingResult(a_star=out, method="ma")


def nearest_embedding(scores, label):
    """L2-optimal embedding via the sorted-threshold active-set rule.

    Let ``d_i = scores[i] - scores[label]`` and sort the positive excesses
    decreasingly as ``d_1 >= d_2 >= ...``.  The active set is the largest
    prefix of size ``w`` whose last element still exceeds the threshold
    ``theta_w = (d_1 + ... + d_w) / (w + 1)``.  The label entry and every
    active entry are moved to the common value ``scores[label] + theta_w``;
    all other entries stay put.  Ties with the threshold are left inactive,
    which lands on the same (unique) minimizer.

    Returns the projection of ``scores`` onto the cone of vectors whose
    ``label`` entry is a maximum.
    """
    scores, label = _check_label(scores, label)
    d = scores - scores[label]
    d[label] = 0.0
    positive = np.flatnonzero(d > 0.0)
    if positive.size == 0:
        return EmbeddingResult(a_star=scores.copy(), method="ne")
    order = positive[np.argsort(-d[positive], kind="stable")]
    excess = d[order]
    cumsum = np.cumsum(excess)
    thresholds = cumsum / (np.arange(1, excess.size + 1) + 1.0)
    above = np.flatnonzero(excess > thresholds)
    w = above[-1] + 1
    theta = float(thresholds[w - 1])
    active = order[:w]
    out = scores.copy()
    out[label] += theta
    out[active] = out[label]
    return EmbeddingResult(
        a_star=out, method="ne", active_set=frozenset(int(i) for i in active), theta=theta
    )


def one_hot_embedding(scores, label):
    """Indicator vector of the label; retained as the ablation baseline."""
    scores, label = _check_label(scores, label)
    out = np.zeros_like(scores)
    out[label] = 1.0
    return EmbeddingResult(a_star=out, method="onehot")


EMBEDDING_METHODS = {
    "ma": max_assignment,
    "ne": nearest_embedding,
    "onehot": one_hot_embedding,
}


def embed(scores, label, method):
    """Dispatch to one of the registered embeddings by name."""
    try:
        fn = EMBEDDING_METHODS[method]
    except KeyError:
        raise ValueError(f"unknown embedding method {method!r}") from None
    return fn(scores, label)

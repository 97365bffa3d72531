"""Class regularization losses and metric-learning baselines.

Features ``X`` are (n, p) rows with integer labels (0 = live, 1 = fake). All
three log-sum-exp penalties below are nonnegative and use the stable form
``max + log(sum(exp(x - max)))``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DegenerateBatchError

DM_THRESHOLD = 0.5
TRIPLET_MARGIN = 0.3
SUPCON_TEMPERATURE = 0.1
_BIG = 1e9


@dataclass
class ClassCenters:
    centers: Tensor  # (classes, p)
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


@dataclass
class RelationMatrix:
    r_c: Tensor
    r_or: Tensor
    q: Tensor
    t: float


@dataclass
class LossBundle:
    l_ce: float
    l_dm: float
    l_att: float
    l_rep: float
    l_cdm: float
    l_total: float

    def as_dict(self) -> dict:
        return dict(vars(self))


def one_hot(labels, num_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    return np.eye(num_classes)[labels]


def class_centers(x: Tensor, labels, num_classes: int = 2) -> ClassCenters:
    """Per-class feature means, R_s / N, through a (classes, n) mask."""
    mask = one_hot(labels, num_classes).T
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise DegenerateBatchError(f"batch has no samples of class(es) {missing}")
    return ClassCenters(dc.matmul(mask / counts[:, None], x), counts)


def center_relation(c: ClassCenters, t: float = DM_THRESHOLD) -> RelationMatrix:
    centers = c.centers
    width = centers.shape[1]
    r_c = (centers @ dc.transpose(centers)) * (1.0 / np.sqrt(width))
    r_or = r_c * (1.0 - np.eye(c.num_classes))
    return RelationMatrix(r_c, r_or, dc.hinge(r_or, t), t)


def _off_label_index(labels, num_classes: int):
    """Row/column indices that pick, for every row i, the classes j != labels[i]."""
    labels = np.asarray(labels, dtype=int)
    cols = np.array([[j for j in range(num_classes) if j != y] for y in labels], dtype=int)
    rows = np.repeat(np.arange(labels.size)[:, None], num_classes - 1, axis=1)
    return rows, cols


def dm_loss(rel: RelationMatrix) -> Tensor:
    """Mean over classes of the squared log-sum-exp of Q over the other classes."""
    k = rel.q.shape[0]
    off = rel.q[_off_label_index(np.arange(k), k)]
    return dc.mean(dc.square(dc.logsumexp(off, axis=1)))


def _check_labels(x: Tensor, labels):
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (x.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match features {x.shape}")
    return labels


def attraction_loss(x: Tensor, c: ClassCenters, labels) -> Tensor:
    """Squared log-sum-exp over feature dims of |x_i - center(label_i)|, averaged."""
    labels = _check_labels(x, labels)
    own = dc.matmul(one_hot(labels, c.num_classes), c.centers)
    dist = dc.tabs(x - own)
    return dc.mean(dc.square(dc.logsumexp(dist, axis=1)))


def repulsion_from_logits(logits: Tensor, labels) -> Tensor:
    probs = dc.softmax(logits, axis=1)
    wrong = probs[_off_label_index(labels, logits.shape[1])]
    return dc.mean(dc.square(dc.logsumexp(wrong, axis=1)))


def repulsion_loss(x: Tensor, c: ClassCenters, labels) -> Tensor:
    """Squared log-sum-exp of the wrong-class probabilities of softmax(X C^T)."""
    labels = _check_labels(x, labels)
    return repulsion_from_logits(x @ dc.transpose(c.centers), labels)


def cdm_loss(x: Tensor, c: ClassCenters, labels) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (l_cdm, l_att, l_rep)."""
    att = attraction_loss(x, c, labels)
    rep = repulsion_loss(x, c, labels)
    return att + rep, att, rep


def total_loss(l_ce, l_dm, l_cdm, l_att=None, l_rep=None):
    """Unweighted sum of the three terms, plus a float snapshot of every part."""
    total = dc.as_tensor(l_ce) + l_dm + l_cdm
    val = lambda v: 0.0 if v is None else float(dc.as_tensor(v).data)  # noqa: E731
    bundle = LossBundle(val(l_ce), val(l_dm), val(l_att), val(l_rep), val(l_cdm), float(total.data))
    return total, bundle


def class_regularization(x: Tensor, labels, t: float = DM_THRESHOLD,
                         use_dm: bool = True, use_cdm: bool = True) -> dict[str, Tensor]:
    """The DM and CDM terms for one batch of features (disabled terms are 0)."""
    zero = Tensor(0.0)
    out = {"l_dm": zero, "l_cdm": zero, "l_att": zero, "l_rep": zero}
    if not (use_dm or use_cdm):
        return out
    centers = class_centers(x, labels)
    if use_dm:
        out["l_dm"] = dm_loss(center_relation(centers, t))
    if use_cdm:
        out["l_cdm"], out["l_att"], out["l_rep"] = cdm_loss(x, centers, labels)
    return out


# ----------------------------------------------------------------- baselines


def pairwise_sq_dists(x: Tensor) -> Tensor:
    sq = dc.tsum(dc.square(x), axis=1, keepdims=True)
    return sq + dc.transpose(sq) - (x @ dc.transpose(x)) * 2.0


def _warn_empty(name: str) -> Tensor:
    warnings.warn(f"{name}: no valid triplets or pairs in batch, returning 0", RuntimeWarning,
                  stacklevel=3)
    return Tensor(0.0)


def triplet_loss(x: Tensor, labels, margin: float = TRIPLET_MARGIN) -> Tensor:
    """Mean of max(d(a,p) - d(a,n) + margin, 0) over every (a, p != a, n) triplet.

    d is squared Euclidean distance.
    """
    labels = _check_labels(x, labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(labels.size, dtype=bool)
    valid = pos[:, :, None] & ~same[:, None, :]
    if not valid.any():
        return _warn_empty("triplet_loss")
    dist = pairwise_sq_dists(x)
    a, p, n = np.nonzero(valid)
    return dc.mean(dc.hinge(dist[a, p] - dist[a, n] + margin))


def hard_triplet_loss(x: Tensor, labels, margin: float = TRIPLET_MARGIN) -> Tensor:
    """Batch-hard: per anchor, farthest same-class point vs nearest other-class point.

    The anchor itself counts as a (zero-distance) positive.
    """
    labels = _check_labels(x, labels)
    same = labels[:, None] == labels[None, :]
    has_neg = (~same).any(axis=1)
    if not has_neg.any():
        return _warn_empty("hard_triplet_loss")
    dist = pairwise_sq_dists(x)
    hardest_pos = dc.tmax(dist * same.astype(float), axis=1)
    nearest_neg = -dc.tmax(-dist - _BIG * same.astype(float), axis=1)
    terms = dc.hinge(hardest_pos - nearest_neg + margin)
    return dc.mean(terms[np.flatnonzero(has_neg)])


def npair_loss(x: Tensor, labels) -> Tensor:
    """log(1 + sum_neg exp(<a, neg> - <a, pos>)) averaged over anchors.

    Each anchor's positive is the next sample of its class (cyclically); one
    negative is drawn per other class, at the anchor's within-class rank
    modulo that class's size.
    """
    labels = _check_labels(x, labels)
    classes = np.unique(labels)
    members = {c: np.flatnonzero(labels == c) for c in classes}
    anchors, positives, negatives = [], [], []
    for c in classes:
        idx = members[c]
        if idx.size < 2 or classes.size < 2:
            continue
        for rank, i in enumerate(idx):
            anchors.append(i)
            positives.append(idx[(rank + 1) % idx.size])
            negatives.append([members[o][rank % members[o].size] for o in classes if o != c])
    if not anchors:
        return _warn_empty("npair_loss")
    anchors, positives, negatives = map(np.asarray, (anchors, positives, negatives))
    sim = x @ dc.transpose(x)
    pos_sim = dc.reshape(sim[anchors, positives], (anchors.size, 1))
    neg_sim = sim[anchors[:, None], negatives]
    margins = dc.concat([Tensor(np.zeros((anchors.size, 1))), neg_sim - pos_sim], axis=1)
    return dc.mean(dc.logsumexp(margins, axis=1))


def supcon_loss(x: Tensor, labels, temperature: float = SUPCON_TEMPERATURE) -> Tensor:
    """Supervised contrastive loss on L2-normalised features.

    For anchor i with positives P(i) (same label, not i):
    -1/|P(i)| sum_p log(exp(z_i.z_p / T) / sum_{a != i} exp(z_i.z_a / T)),
    averaged over anchors that have at least one positive.
    """
    labels = _check_labels(x, labels)
    n = labels.size
    pos = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    n_pos = pos.sum(axis=1)
    keep = np.flatnonzero(n_pos > 0)
    if keep.size == 0:
        return _warn_empty("supcon_loss")
    z = dc.l2_normalize(x, axis=1)
    logits = (z @ dc.transpose(z)) * (1.0 / temperature) - _BIG * np.eye(n)
    log_prob = logits - dc.logsumexp(logits, axis=1, keepdims=True)
    per_anchor = dc.tsum(log_prob * pos.astype(float), axis=1) / np.maximum(n_pos, 1)
    return -dc.mean(per_anchor[keep])


BASELINES = {
    "triplet": triplet_loss,
    "hard_triplet": hard_triplet_loss,
    "npair": npair_loss,
    "supcon": supcon_loss,
}

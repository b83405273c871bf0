"""Cosine-margin classification loss and the intra-class distance de-biasing term."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)


class MarginConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scale: float = Field(64.0, gt=0)
    margin: float = Field(0.5, ge=0, lt=1)
    lam: float = Field(0.1, ge=0)


@dataclass
class EmbeddingBatch:
    embeddings: Tensor  # B x d
    identities: np.ndarray
    groups: np.ndarray

    def __post_init__(self):
        self.identities = np.asarray(self.identities, dtype=np.intp)
        self.groups = np.asarray(self.groups, dtype=np.intp)
        b = self.embeddings.shape[0]
        if len(self.identities) != b or len(self.groups) != b:
            raise ValueError("embeddings, identities and groups must be aligned")


@dataclass
class DebiasTerms:
    loss: Tensor
    subject_dist: Tensor  # Dist_jg per retained subject
    group_dist: dict  # group -> Dist_g value
    retained_subjects: int


def cosface_logits(embedding: Tensor, class_weights: Tensor, labels, cfg: MarginConfig) -> Tensor:
    """s * (cos(e, w_c) - m * [c == label]) for (d,) or (B, d) embeddings."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels.max() >= class_weights.shape[0] or labels.min() < 0:
        raise IndexError(f"label out of range [0, {class_weights.shape[0]})")
    e = T.l2_normalize(embedding)
    w = T.l2_normalize(class_weights)
    cos = T.linear(e, w)
    onehot = np.zeros(cos.shape)
    if cos.data.ndim == 1:
        onehot[labels[0]] = 1.0
    else:
        onehot[np.arange(len(labels)), labels] = 1.0
    return T.mul(T.sub(cos, cfg.margin * onehot), cfg.scale)


def cosface_loss(embeddings: Tensor, class_weights: Tensor, labels, cfg: MarginConfig) -> Tensor:
    logits = cosface_logits(embeddings, class_weights, labels, cfg)
    if logits.data.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    return T.cross_entropy(logits, np.atleast_1d(labels))


def _retained(identities: np.ndarray, min_images: int = 2):
    ids, counts = np.unique(identities, return_counts=True)
    return ids[counts >= min_images]


def subject_centers(batch: EmbeddingBatch) -> dict:
    """Mean embedding for every (identity, group) with at least two images in the batch."""
    out = {}
    for j in _retained(batch.identities):
        rows = np.flatnonzero(batch.identities == j)
        g = int(batch.groups[rows[0]])
        out[(int(j), g)] = batch.embeddings.data[rows].mean(axis=0)
    return out


def subject_intra_distance(embeddings, center) -> float:
    diff = np.asarray(embeddings, dtype=float) - np.asarray(center, dtype=float)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def group_intra_distance(subject_distances) -> float:
    subject_distances = list(subject_distances)
    if not subject_distances:
        raise ValueError("group has no retained subjects")
    return float(np.mean(subject_distances))


def debias_loss(subject_dist, subject_group, lam: float):
    """(lam / T) * sum_j |Dist_j - mean_g Dist_g| over retained subjects.

    Works on plain arrays or on a Tensor of per-subject distances; returns a
    Tensor in the latter case.
    """
    subject_group = np.asarray(subject_group, dtype=np.intp)
    as_tensor = isinstance(subject_dist, Tensor)
    dist = subject_dist if as_tensor else Tensor(subject_dist)
    present, seg = np.unique(subject_group, return_inverse=True)
    if len(present) < 2:
        logger.warning("de-biasing term needs at least two groups in the batch; contributing 0")
        zero = T.mul(T.tsum(dist), 0.0)
        return zero if as_tensor else 0.0
    dist_g = T.segment_mean(dist, seg, len(present))
    overall = T.mean(dist_g)
    loss = T.mul(T.mean(T.absolute(T.sub(dist, overall))), lam)
    return loss if as_tensor else float(loss.data)


def debias_terms(batch: EmbeddingBatch, lam: float) -> DebiasTerms:
    """Differentiable de-biasing term computed from the subjects in one batch."""
    keep_ids = _retained(batch.identities)
    mask = np.isin(batch.identities, keep_ids)
    if len(keep_ids) == 0:
        logger.warning("no subject has two images in this batch; de-biasing term is empty")
        zero = T.mul(T.tsum(batch.embeddings), 0.0)
        return DebiasTerms(zero, Tensor(np.zeros(0)), {}, 0)
    rows = np.flatnonzero(mask)
    _, seg = np.unique(batch.identities[rows], return_inverse=True)
    n_subj = len(keep_ids)
    emb = T.take(batch.embeddings, rows)
    centers = T.segment_mean(emb, seg, n_subj)
    diff = T.sub(emb, T.take(centers, seg))
    sq = T.tsum(T.mul(diff, diff), axis=1)
    dist_j = T.segment_mean(sq, seg, n_subj)
    subj_group = np.zeros(n_subj, dtype=np.intp)
    subj_group[seg] = batch.groups[rows]
    loss = debias_loss(dist_j, subj_group, lam)
    group_dist = {int(g): float(dist_j.data[subj_group == g].mean()) for g in np.unique(subj_group)}
    return DebiasTerms(loss, dist_j, group_dist, n_subj)


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float
    bias: float
    group_dist: dict


def total_loss(batch: EmbeddingBatch, class_weights: Tensor, cfg: MarginConfig,
               normalize_for_debias: bool = True) -> LossBreakdown:
    """Cosine-margin cross-entropy (batch mean) plus the de-biasing term.

    The de-biasing statistics are taken on L2-normalised embeddings by
    default; the margin loss is invariant to embedding scale, so on raw
    embeddings the term could be driven to zero by shrinking every feature.
    """
    ce = cosface_loss(batch.embeddings, class_weights, batch.identities, cfg)
    emb = T.l2_normalize(batch.embeddings) if normalize_for_debias else batch.embeddings
    terms = debias_terms(EmbeddingBatch(emb, batch.identities, batch.groups), cfg.lam)
    total = T.add(ce, terms.loss)
    return LossBreakdown(total, float(ce.data), float(terms.loss.data), terms.group_dist)

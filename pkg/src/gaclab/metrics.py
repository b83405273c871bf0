"""Fairness audit: per-group verification accuracy, biasness, local-geometry ratios, KL, correlations."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SMOOTHING = 1e-8


def best_threshold_accuracy(scores, genuine) -> tuple[float, float]:
    """Exact best accuracy over thresholds at score midpoints (predict genuine iff score > t)."""
    scores = np.asarray(scores, dtype=float)
    genuine = np.asarray(genuine, dtype=bool)
    n = len(scores)
    if n == 0:
        raise ValueError("no scores")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], genuine[order]
    # accepting the top-k scores: correct = genuine among top-k + impostors outside it
    tp = np.concatenate([[0], np.cumsum(y)])
    fp = np.concatenate([[0], np.cumsum(~y)])
    correct = tp + (np.sum(~y) - fp)
    # a cut between positions k-1 and k is only realisable where the scores differ
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = s[:-1] != s[1:]
    k = int(np.argmax(np.where(valid, correct, -1)))
    if k == 0:
        thr = s[0] + 1.0
    elif k == n:
        thr = s[-1] - 1.0
    else:
        thr = 0.5 * (s[k - 1] + s[k])
    return correct[k] / n, float(thr)


def verification_accuracy(pairs, embeddings) -> dict:
    """Per-group accuracy of cosine-similarity verification with a per-group optimal threshold."""
    emb = np.asarray(embeddings, dtype=float)
    by_group: dict = {}
    for p in pairs:
        by_group.setdefault(int(p.group), []).append(p)
    out = {}
    for g in sorted(by_group):
        ps = by_group[g]
        if not ps:
            logger.warning("group %d has no pairs; omitted", g)
            continue
        a = emb[[p.idx_a for p in ps]]
        b = emb[[p.idx_b for p in ps]]
        scores = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        acc, _ = best_threshold_accuracy(scores, [p.genuine for p in ps])
        out[g] = float(acc)
    return out


def biasness(accuracies: Sequence[float]) -> tuple[float, float]:
    """(population standard deviation, mean) of per-group accuracies."""
    acc = np.asarray(list(accuracies), dtype=float)
    if len(acc) < 2:
        raise ValueError("biasness needs at least two groups")
    return float(np.std(acc)), float(np.mean(acc))


def ratio_distribution(embeddings, identities, groups) -> dict:
    """Per group: list of min-inter-subject / max-intra-subject Euclidean distance ratios."""
    emb = np.asarray(embeddings, dtype=float)
    identities = np.asarray(identities)
    groups = np.asarray(groups)
    out = {}
    for g in np.unique(groups):
        rows = np.flatnonzero(groups == g)
        e, ids = emb[rows], identities[rows]
        d = np.sqrt(np.maximum(np.sum((e[:, None, :] - e[None, :, :]) ** 2, axis=-1), 0.0))
        ratios = []
        for j in np.unique(ids):
            mine = ids == j
            if mine.sum() < 2:
                continue
            if (~mine).sum() == 0:
                continue
            intra = d[np.ix_(mine, mine)].max()
            if intra <= 1e-12:
                logger.warning("subject %s has identical embeddings; excluded from ratios", j)
                continue
            ratios.append(float(d[np.ix_(mine, ~mine)].min() / intra))
        out[int(g)] = ratios
    return out


def ratio_stats(ratios: dict) -> dict:
    return {g: {"mean": float(np.mean(r)) if r else float("nan"),
                "stad": float(np.std(r)) if r else float("nan"),
                "n": len(r)} for g, r in ratios.items()}


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(np.sum(p * np.log(p / q)))


def smoothed_histogram(values, edges) -> np.ndarray:
    counts, _ = np.histogram(values, bins=edges)
    c = counts.astype(float) + SMOOTHING
    return c / c.sum()


def relative_entropy(sample_sets: dict, reference_group: int, bins: int = 64) -> dict:
    """KL(group || reference) in nats between smoothed histograms on a shared uniform grid."""
    sets = {g: np.asarray(v, dtype=float) for g, v in sample_sets.items() if len(v) > 0}
    if reference_group not in sets:
        raise ValueError(f"reference group {reference_group} has no samples")
    pooled = np.concatenate(list(sets.values()))
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    ref = smoothed_histogram(sets[reference_group], edges)
    return {g: (0.0 if g == reference_group else kl_divergence(smoothed_histogram(v, edges), ref))
            for g, v in sets.items()}


def correlation_histogram(embeddings, identities, bins: int = 40, max_subjects: Optional[int] = None):
    """Histogram over [-1, 1] of Pearson correlations between one embedding per subject (its first image)."""
    emb = np.asarray(embeddings, dtype=float)
    ids = np.asarray(identities)
    _, first = np.unique(ids, return_index=True)
    first = np.sort(first)
    if max_subjects is not None:
        first = first[:max_subjects]
    if len(first) < 2:
        raise ValueError("correlation histogram needs at least two subjects")
    x = emb[first]
    xc = x - x.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(xc, axis=1)
    corr = (xc @ xc.T) / np.outer(norms, norms)
    iu = np.triu_indices(len(first), k=1)
    vals = np.clip(corr[iu], -1.0, 1.0)
    counts, edges = np.histogram(vals, bins=bins, range=(-1.0, 1.0))
    return counts, edges


@dataclass
class FairnessReport:
    group_accuracy: dict
    average_accuracy: float
    biasness: float
    ratio_stats: dict
    relative_entropy: dict
    reference_group: int
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = asdict(self)
        doc["group_accuracy"] = {str(k): v for k, v in self.group_accuracy.items()}
        doc["ratio_stats"] = {str(k): v for k, v in self.ratio_stats.items()}
        doc["relative_entropy"] = {str(k): v for k, v in self.relative_entropy.items()}
        return json.dumps(doc, indent=2, sort_keys=True)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", "accuracy", "ratio_mean", "ratio_stad", "relative_entropy"])
            for g in sorted(self.group_accuracy):
                rs = self.ratio_stats.get(g, {})
                w.writerow([g, self.group_accuracy[g], rs.get("mean", ""), rs.get("stad", ""),
                            self.relative_entropy.get(g, "")])


def fairness_report(pairs, embeddings, identities, groups, reference_group: int = 0,
                    bins: int = 64, metadata: Optional[dict] = None) -> FairnessReport:
    # percentages, as in published bias tables
    acc = {g: 100.0 * a for g, a in verification_accuracy(pairs, embeddings).items()}
    std, avg = biasness(list(acc.values())) if len(acc) >= 2 else (0.0, float(np.mean(list(acc.values()))))
    ratios = ratio_distribution(embeddings, identities, groups)
    ref = reference_group if ratios.get(reference_group) else min(g for g, r in ratios.items() if r)
    if ref != reference_group:
        logger.warning("reference group %d has no ratios; using group %d", reference_group, ref)
    return FairnessReport(acc, avg, std, ratio_stats(ratios), relative_entropy(ratios, ref, bins), ref,
                          dict(metadata or {}))

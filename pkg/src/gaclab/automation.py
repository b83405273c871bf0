"""Per-layer adaptive/shared selection from the similarity of group masks.

For each adaptive layer the group rows of its bank are flattened, their
pairwise cosine similarities averaged, and the mean compared against the
threshold ``tau``.  A layer whose mean similarity is above ``tau`` stays
group-adaptive; at or below ``tau`` its rows are replaced by their average
and the layer is flagged shared.  Under this rule a lower ``tau`` keeps more
layers adaptive.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .tensor import NORM_EPS

logger = logging.getLogger(__name__)


class DegenerateMaskError(ValueError):
    pass


class Decision(str, Enum):
    KEEP_ADAPTIVE = "KeepAdaptive"
    MERGE = "Merge"


class AutomationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tau: float = Field(-0.2, ge=-1.0, le=1.0)
    check_period: int = Field(100, ge=1)
    stability_window: int = Field(5, ge=1)
    stability_eps: float = Field(1e-3, gt=0)
    allow_resplit: bool = True


@dataclass
class SimilarityReport:
    layer_id: int
    theta: np.ndarray
    mean_similarity: float
    step: int


def flatten_masks(bank) -> list[np.ndarray]:
    """Row-major flattening of each group's mask (or attention row)."""
    data = bank.masks.data if hasattr(bank, "masks") else bank.maps.data
    return [row.reshape(-1).copy() for row in data]


def pairwise_cosine(vectors) -> np.ndarray:
    v = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms <= NORM_EPS):
        raise DegenerateMaskError("cannot take cosine similarity of a zero-norm mask vector")
    u = v / norms[:, None]
    theta = np.clip(u @ u.T, -1.0, 1.0)
    np.fill_diagonal(theta, 1.0)
    return theta


def mean_pairwise_similarity(theta) -> float:
    theta = np.asarray(theta, dtype=float)
    nd = theta.shape[0]
    if nd < 2:
        raise ValueError("mean pairwise similarity needs at least two groups")
    iu = np.triu_indices(nd, k=1)
    return float(theta[iu].mean())


def similarity_report(bank, layer_id: int, step: int) -> SimilarityReport:
    theta = pairwise_cosine(flatten_masks(bank))
    return SimilarityReport(layer_id, theta, mean_pairwise_similarity(theta), step)


def decide(mean_similarity: float, tau: float) -> Decision:
    return Decision.KEEP_ADAPTIVE if mean_similarity > tau else Decision.MERGE


def merge_bank(bank):
    """Replace every group row by the mean over groups, in place."""
    data = bank.masks.data if hasattr(bank, "masks") else bank.maps.data
    data[...] = data.mean(axis=0, keepdims=True)


def adapt_decision(report: SimilarityReport, config: AutomationConfig, layer=None) -> Decision:
    """Decide for one layer; when ``layer`` is given, apply the outcome to it."""
    decision = decide(report.mean_similarity, config.tau)
    if layer is not None:
        if decision is Decision.MERGE:
            merge_bank(layer.bank)
            layer.state.shared_flag = True
        elif config.allow_resplit:
            layer.state.shared_flag = False
    return decision


def _stable(history, window: int, eps: float) -> bool:
    if len(history) < window + 1:
        return False
    vals = [v for _, v in history[-(window + 1):]]
    return all(abs(b - a) < eps for a, b in zip(vals, vals[1:]))


@dataclass
class TraceRow:
    step: int
    layer_id: int
    mean_similarity: float
    shared_flag: bool


class AutomationMonitor:
    """Runs the similarity check on a network every ``check_period`` steps.

    Once every layer's mean similarity has moved less than ``stability_eps``
    over ``stability_window`` consecutive checks the monitor is converged and
    stops taking decisions.
    """

    def __init__(self, network, config: AutomationConfig):
        self.network = network
        self.config = config
        self.trace: list[TraceRow] = []
        self.converged = False
        self.layers = [layer for layer in network.adaptive_layers() if layer.bank.nd >= 2]
        for layer in network.adaptive_layers():
            if layer.bank.nd < 2:
                layer.state.shared_flag = True  # a single group is shared by definition
        if not self.layers:
            self.converged = True

    def due(self, step: int) -> bool:
        return not self.converged and step > 0 and step % self.config.check_period == 0

    def check(self, step: int) -> list[SimilarityReport]:
        if self.converged:
            return []
        reports = []
        for layer_id, layer in enumerate(self.network.adaptive_layers()):
            if layer not in self.layers:
                continue
            try:
                report = similarity_report(layer.bank, layer_id, step)
            except DegenerateMaskError:
                # attention rows start at exactly zero; nothing to compare yet
                logger.debug("layer %d (%s) skipped: zero-norm rows", layer_id, layer.name)
                continue
            if self.config.allow_resplit or not layer.state.shared_flag:
                adapt_decision(report, self.config, layer)
            layer.state.record(step, report.mean_similarity)
            self.trace.append(TraceRow(step, layer_id, report.mean_similarity, layer.state.shared_flag))
            reports.append(report)
        self.converged = all(
            _stable(layer.state.similarity_history, self.config.stability_window, self.config.stability_eps)
            for layer in self.layers
        )
        return reports

    def retie(self):
        """Keep merged layers tied when re-splitting is disabled (call after each update)."""
        if self.config.allow_resplit:
            return
        for layer in self.layers:
            if layer.state.shared_flag:
                merge_bank(layer.bank)

    def merged_count(self) -> int:
        return sum(layer.state.shared_flag for layer in self.network.adaptive_layers())

    def write_trace(self, path):
        write_trace(self.trace, path)


def monitor(network, config: AutomationConfig, steps: Iterable[int]) -> list[SimilarityReport]:
    """Run the checks due at ``steps`` against ``network`` without training in between."""
    mon = AutomationMonitor(network, config)
    out = []
    for step in steps:
        if mon.due(step):
            out.extend(mon.check(step))
        if mon.converged:
            break
    return out


def write_trace(rows: list[TraceRow], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "layer_id", "mean_similarity", "shared_flag"])
        for r in rows:
            w.writerow([r.step, r.layer_id, repr(float(r.mean_similarity)), int(r.shared_flag)])


def read_trace(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        return [TraceRow(int(r["step"]), int(r["layer_id"]), float(r["mean_similarity"]), bool(int(r["shared_flag"])))
                for r in csv.DictReader(fh)]


def replay(trajectory: list[TraceRow], tau: float, allow_resplit: bool = True) -> dict[int, set]:
    """Merged-layer set after each check of a recorded (frozen) similarity trajectory."""
    merged: set = set()
    out = {}
    for step in sorted({r.step for r in trajectory}):
        for r in (r for r in trajectory if r.step == step):
            if decide(r.mean_similarity, tau) is Decision.MERGE:
                merged.add(r.layer_id)
            elif allow_resplit:
                merged.discard(r.layer_id)
        out[step] = set(merged)
    return out


def similarity_grid(trajectory: list[TraceRow]) -> tuple[list[int], list[int], np.ndarray]:
    """(layer ids, steps, layers x steps matrix of mean similarity; NaN where absent)."""
    layers = sorted({r.layer_id for r in trajectory})
    steps = sorted({r.step for r in trajectory})
    grid = np.full((len(layers), len(steps)), np.nan)
    li = {l: i for i, l in enumerate(layers)}
    si = {s: i for i, s in enumerate(steps)}
    for r in trajectory:
        grid[li[r.layer_id], si[r.step]] = r.mean_similarity
    return layers, steps, grid

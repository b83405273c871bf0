"""Deterministic training loop for group-adaptive and baseline networks."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import tensor as T
from .automation import AutomationConfig, AutomationMonitor
from .data import Dataset
from .demog import LabelProvider
from .layers import Network, NetworkConfig, build_network, param_count
from .losses import EmbeddingBatch, MarginConfig, total_loss
from .optim import SGD, step_decay_lr

logger = logging.getLogger(__name__)

# variant -> (network overrides, lambda override)
VARIANTS = {
    "baseline": ({"placement": "none", "kernel_masks": False, "channel_attention": False, "spatial_attention": False}, 0.0),
    "gac": ({"placement": "automatic", "kernel_masks": True, "channel_attention": True, "spatial_attention": False}, None),
    "gac-channel": ({"placement": "automatic", "kernel_masks": False, "channel_attention": True, "spatial_attention": False}, None),
    "gac-kernel": ({"placement": "automatic", "kernel_masks": True, "channel_attention": False, "spatial_attention": False}, None),
    "gac-spatial": ({"placement": "none", "kernel_masks": False, "channel_attention": False, "spatial_attention": True}, None),
    "gac-cs": ({"placement": "automatic", "kernel_masks": False, "channel_attention": True, "spatial_attention": True}, None),
    "gac-csk": ({"placement": "automatic", "kernel_masks": True, "channel_attention": True, "spatial_attention": True}, None),
    "al-manual": ({"placement": "manual", "kernel_masks": True, "channel_attention": True, "spatial_attention": False}, None),
}


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variant: str = "gac"
    batch_size: int = Field(64, ge=2)
    images_per_subject: int = Field(4, ge=2)
    base_lr: float = Field(0.1, gt=0)
    decay_epochs: list[int] = Field(default_factory=lambda: [10, 16])
    decay_factor: float = Field(0.1, gt=0, lt=1)
    lr_floor: float = Field(1e-4, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    grad_clip: Optional[float] = Field(5.0, gt=0)
    epochs: int = Field(20, ge=1)
    seed: int = 0
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    margin: MarginConfig = Field(default_factory=MarginConfig)
    automation: AutomationConfig = Field(default_factory=AutomationConfig)

    @field_validator("variant")
    @classmethod
    def _known_variant(cls, v):
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; valid variants: {', '.join(VARIANTS)}")
        return v

    @field_validator("decay_epochs")
    @classmethod
    def _sorted(cls, v):
        if list(v) != sorted(v):
            raise ValueError("decay_epochs must be increasing")
        return v


def resolve_variant(cfg: TrainConfig) -> TrainConfig:
    """Apply the variant's structural switches (and the baseline's lambda = 0)."""
    net_over, lam = VARIANTS[cfg.variant]
    network = cfg.network.model_copy(update=net_over)
    margin = cfg.margin if lam is None else cfg.margin.model_copy(update={"lam": lam})
    return cfg.model_copy(update={"network": network, "margin": margin})


@dataclass
class RunArtifacts:
    checkpoint: Path
    train_log: Path
    automation_trace: Path
    manifest: Path


@dataclass
class TrainResult:
    network: Network
    log: list
    monitor: AutomationMonitor
    class_ids: np.ndarray
    final_group_dist: dict
    artifacts: Optional[RunArtifacts] = None

    @property
    def group_dist_std(self) -> float:
        return float(np.std(list(self.final_group_dist.values())))


class GroupBatchSampler:
    """S subjects x P images from every present group per batch (so every subject has >= 2 images)."""

    def __init__(self, dataset: Dataset, batch_size: int, images_per_subject: int, rng: np.random.Generator):
        self.rng = rng
        self.p = images_per_subject
        self.rows_of = {int(j): np.flatnonzero(dataset.identities == j) for j in dataset.subjects()}
        self.by_group = {g: [int(j) for j in dataset.subjects(g)] for g in range(dataset.nd)}
        self.by_group = {g: s for g, s in self.by_group.items() if s}
        per_group = max(1, batch_size // (len(self.by_group) * self.p))
        self.s = per_group
        self._queues = {g: [] for g in self.by_group}

    def _next_subject(self, g):
        q = self._queues[g]
        if not q:
            q.extend(self.rng.permutation(self.by_group[g]).tolist())
        return q.pop()

    def sample(self) -> np.ndarray:
        rows = []
        for g in sorted(self.by_group):
            for _ in range(min(self.s, len(self.by_group[g]))):
                j = self._next_subject(g)
                avail = self.rows_of[j]
                rows.extend(self.rng.choice(avail, size=self.p, replace=len(avail) < self.p).tolist())
        return np.asarray(rows, dtype=np.intp)


def _clip_gradients(params, max_norm: float):
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def dataset_group_distances(embeddings: np.ndarray, identities, groups) -> dict:
    """Dist_g over a whole set: mean over subjects of their mean squared distance to the centroid."""
    identities = np.asarray(identities)
    groups = np.asarray(groups)
    per_group: dict = {}
    for j in np.unique(identities):
        rows = identities == j
        if rows.sum() < 2:
            continue
        e = embeddings[rows]
        d = float(np.mean(np.sum((e - e.mean(axis=0)) ** 2, axis=1)))
        per_group.setdefault(int(groups[rows][0]), []).append(d)
    return {g: float(np.mean(v)) for g, v in sorted(per_group.items())}


def train_run(cfg: TrainConfig, dataset: Dataset, provider: LabelProvider, out_dir=None) -> TrainResult:
    cfg = resolve_variant(cfg)
    if provider.nd != cfg.network.nd or dataset.nd != cfg.network.nd:
        raise ValueError(f"group count mismatch: network nd={cfg.network.nd}, provider nd={provider.nd}, "
                         f"dataset nd={dataset.nd}")
    class_ids = np.unique(dataset.identities)
    targets = np.searchsorted(class_ids, dataset.identities)
    net_cfg = cfg.network.model_copy(update={
        "num_classes": len(class_ids),
        "image_size": dataset.images.shape[-1],
        "in_channels": dataset.images.shape[1],
        "seed": cfg.seed,
    })
    net = build_network(net_cfg)
    params = net.params()
    opt = SGD(params, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    mon = AutomationMonitor(net, cfg.automation)
    group_labels = provider.labels(dataset)
    rng = np.random.default_rng([cfg.seed, 7])
    sampler = GroupBatchSampler(dataset, cfg.batch_size, cfg.images_per_subject, rng)
    steps_per_epoch = max(1, math.ceil(len(dataset) / cfg.batch_size))

    log = []
    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = step_decay_lr(epoch, cfg.base_lr, cfg.decay_epochs, cfg.decay_factor, cfg.lr_floor)
        for _ in range(steps_per_epoch):
            idx = sampler.sample()
            opt.zero_grad()
            emb = net(dataset.images[idx], group_labels[idx])
            parts = total_loss(EmbeddingBatch(emb, targets[idx], group_labels[idx]), net.head, cfg.margin)
            if not np.isfinite(parts.total.data).all():
                raise FloatingPointError(f"non-finite loss at step {step}")
            parts.total.backward()
            if cfg.grad_clip:
                _clip_gradients(params, cfg.grad_clip)
            opt.step()
            mon.retie()
            step += 1
            if mon.due(step):
                mon.check(step)
            log.append({"step": step, "epoch": epoch, "lr": opt.lr, "ce_loss": parts.ce,
                        "bias_loss": parts.bias, "group_dist": parts.group_dist})
        logger.info("epoch %d lr %.4g ce %.4f bias %.5f", epoch, opt.lr, log[-1]["ce_loss"], log[-1]["bias_loss"])

    emb_all = net.embed(dataset.images, group_labels)
    final = dataset_group_distances(emb_all, dataset.identities, group_labels)
    result = TrainResult(net, log, mon, class_ids, final)
    if out_dir is not None:
        result.artifacts = write_artifacts(result, cfg, dataset, provider, Path(out_dir))
    return result


def write_train_log(log: list, nd: int, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "ce_loss", "bias_loss"] + [f"dist_g{g}" for g in range(nd)])
        for row in log:
            gd = row["group_dist"]
            w.writerow([row["step"], repr(row["lr"]), repr(row["ce_loss"]), repr(row["bias_loss"])]
                       + [repr(gd[g]) if g in gd else "" for g in range(nd)])


def write_artifacts(result: TrainResult, cfg: TrainConfig, dataset: Dataset, provider: LabelProvider,
                    out: Path) -> RunArtifacts:
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint"
    result.network.save(ckpt)
    log_path = out / "train_log.csv"
    write_train_log(result.log, cfg.network.nd, log_path)
    trace_path = out / "automation_trace.csv"
    result.monitor.write_trace(trace_path)
    counts = param_count(result.network)
    counts.pop("per_layer")
    manifest = {
        "config": cfg.model_dump(),
        "label_mode": provider.mode.value,
        "label_seed": provider.seed,
        "num_classes": int(len(result.class_ids)),
        "train_subjects": [int(j) for j in result.class_ids],
        "train_counts": dataset.counts(),
        "steps": len(result.log),
        "merged_layers": result.monitor.merged_count(),
        "final_group_dist": {str(g): v for g, v in result.final_group_dist.items()},
        "final_group_dist_std": result.group_dist_std,
        "param_count": counts,
    }
    man_path = out / "run.json"
    man_path.write_text(json.dumps(manifest, indent=2))
    return RunArtifacts(ckpt, log_path, trace_path, man_path)


def extract_embeddings(checkpoint, dataset: Dataset, provider: LabelProvider,
                       indices=None) -> EmbeddingBatch:
    """L2-normalised embeddings routed by the provider's group labels."""
    net = checkpoint if isinstance(checkpoint, Network) else Network.load(checkpoint)
    if net.config.nd != provider.nd:
        raise ValueError(f"architecture mismatch: checkpoint nd={net.config.nd}, provider nd={provider.nd}")
    if tuple(dataset.images.shape[1:]) != (net.config.in_channels, net.config.image_size, net.config.image_size):
        raise ValueError(f"architecture mismatch: checkpoint expects {net.config.in_channels}x"
                         f"{net.config.image_size}x{net.config.image_size} images, got {dataset.images.shape[1:]}")
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.intp)
    labels = provider.labels(dataset, idx)
    emb = net.embed(dataset.images[idx], labels)
    return EmbeddingBatch(T.Tensor(emb), dataset.identities[idx], labels)

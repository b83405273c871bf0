"""Group-label providers: ground truth, a trained group classifier, or seeded random labels."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import tensor as T
from .data import Dataset, fold_split, make_folds
from .optim import SGD
from .tensor import Param, Tensor

logger = logging.getLogger(__name__)


class LabelMode(str, Enum):
    GROUND_TRUTH = "ground_truth"
    ESTIMATED = "estimated"
    RANDOM = "random"


class GroupClassifier:
    """Two stride-2 conv blocks and a linear head over ``nd`` groups."""

    def __init__(self, nd: int, image_size: int = 32, in_channels: int = 1, width: int = 8, seed: int = 0):
        if nd < 2:
            raise ValueError("a group classifier needs at least two groups")
        rng = np.random.default_rng(seed)
        self.nd, self.image_size, self.in_channels, self.width = nd, image_size, in_channels, width
        self.conv1 = Param(rng.normal(0, np.sqrt(2 / (in_channels * 9)), (width, in_channels, 3, 3)), "conv1")
        self.conv2 = Param(rng.normal(0, np.sqrt(2 / (width * 9)), (2 * width, width, 3, 3)), "conv2")
        s = T.conv_output_size(T.conv_output_size(image_size, 3, 2, 1), 3, 2, 1)
        self.flat = 2 * width * s * s
        self.head_w = Param(rng.normal(0, np.sqrt(1 / self.flat), (nd, self.flat)), "head.weight")
        self.head_b = Param(np.zeros(nd), "head.bias")

    def params(self):
        return [self.conv1, self.conv2, self.head_w, self.head_b]

    def logits(self, images) -> Tensor:
        x = Tensor(np.asarray(images, dtype=float))
        h = T.relu(T.conv2d(x, self.conv1, 2, 1))
        h = T.relu(T.conv2d(h, self.conv2, 2, 1))
        return T.linear(T.reshape(h, (h.shape[0], self.flat)), self.head_w, self.head_b)

    def predict(self, images, batch_size: int = 512) -> np.ndarray:
        out = [np.argmax(self.logits(images[s:s + batch_size]).data, axis=1)
               for s in range(0, len(images), batch_size)]
        return np.concatenate(out).astype(np.intp) if out else np.zeros(0, dtype=np.intp)

    def arch(self) -> dict:
        return {"kind": "group_classifier", "nd": self.nd, "image_size": self.image_size,
                "in_channels": self.in_channels, "width": self.width}

    def save(self, path):
        T.save_checkpoint(path, {p.name: p.data for p in self.params()}, arch=self.arch())

    @classmethod
    def load(cls, path) -> "GroupClassifier":
        tensors, arch = T.load_checkpoint(path)
        if not arch or arch.get("kind") != "group_classifier":
            raise ValueError(f"{path} is not a group classifier checkpoint")
        clf = cls(arch["nd"], arch["image_size"], arch["in_channels"], arch["width"])
        for p in clf.params():
            p.data[...] = tensors[p.name]
        return clf


@dataclass
class ClassifierResult:
    classifier: GroupClassifier
    accuracy: float
    group_accuracy: list


def train_group_classifier(dataset: Dataset, epochs: int = 5, lr: float = 0.05, batch_size: int = 32,
                           seed: int = 0, holdout_folds: int = 5) -> ClassifierResult:
    """Fit a group classifier on all but one subject fold; report accuracy on the held-out fold."""
    present = np.unique(dataset.groups)
    if dataset.nd < 2 or len(present) < 2:
        raise ValueError("group classifier needs a dataset with at least two groups")
    train, test = fold_split(dataset, make_folds(dataset, holdout_folds, seed), 0)
    clf = GroupClassifier(dataset.nd, dataset.images.shape[-1], dataset.images.shape[1], seed=seed)
    opt = SGD(clf.params(), lr=lr, momentum=0.9)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            opt.zero_grad()
            loss = T.cross_entropy(clf.logits(train.images[idx]), train.groups[idx])
            loss.backward()
            opt.step()
    pred = clf.predict(test.images)
    per_group = [float(np.mean(pred[test.groups == g] == g)) if np.any(test.groups == g) else float("nan")
                 for g in range(dataset.nd)]
    acc = float(np.mean(pred == test.groups))
    logger.info("group classifier held-out accuracy %.4f per group %s", acc, per_group)
    return ClassifierResult(clf, acc, per_group)


class LabelProvider:
    def __init__(self, mode, nd: int, classifier: Optional[GroupClassifier] = None, seed: int = 0):
        self.mode = LabelMode(mode)
        self.nd = nd
        self.classifier = classifier
        self.seed = seed
        if self.mode is LabelMode.ESTIMATED and classifier is None:
            raise ValueError("estimated labels need a trained group classifier checkpoint")
        if classifier is not None and classifier.nd != nd:
            raise ValueError(f"classifier predicts {classifier.nd} groups, provider expects {nd}")

    @classmethod
    def from_checkpoint(cls, path, nd: int) -> "LabelProvider":
        return cls(LabelMode.ESTIMATED, nd, GroupClassifier.load(path))

    def random_label(self, sample_id: int) -> int:
        return int(np.random.default_rng([self.seed, int(sample_id)]).integers(self.nd))

    def labels(self, dataset: Dataset, indices=None) -> np.ndarray:
        idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.intp)
        if self.mode is LabelMode.GROUND_TRUTH:
            return dataset.groups[idx].copy()
        if self.mode is LabelMode.RANDOM:
            return np.array([self.random_label(s) for s in dataset.sample_ids[idx]], dtype=np.intp)
        # the classifier is frozen: predictions are plain arrays, never part of the training graph
        return self.classifier.predict(dataset.images[idx])


def provide_labels(provider: LabelProvider, dataset: Dataset, indices=None) -> np.ndarray:
    return provider.labels(dataset, indices)

"""Synthetic grouped identity data, ratio subsampling, subject folds and verification pairs."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    nd: int = Field(4, ge=1)
    subjects_per_group: int = Field(16, ge=1)
    images_per_subject: int = Field(8, ge=1)
    group_signature_strength: float = Field(1.0, ge=0)
    identity_signature_strength: float = Field(1.0, ge=0)
    # per-group override of identity_signature_strength (e.g. one "harder" group)
    identity_strength_per_group: Optional[list[float]] = None
    noise_std: float = Field(0.1, ge=0)
    jitter: int = Field(1, ge=0)
    image_size: int = Field(32, ge=8)
    components: int = Field(4, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_overrides(self):
        per = self.identity_strength_per_group
        if per is not None:
            if len(per) != self.nd:
                raise ValueError("identity_strength_per_group needs one entry per group")
            if any(v < 0 for v in per):
                raise ValueError("identity strengths must be non-negative")
        return self


@dataclass
class Dataset:
    images: np.ndarray  # N x 1 x H x W, values in [0, 1]
    identities: np.ndarray
    groups: np.ndarray
    sample_ids: np.ndarray
    nd: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.identities)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.images[idx], self.identities[idx], self.groups[idx], self.sample_ids[idx],
                       self.nd, dict(self.meta))

    def subjects(self, group: Optional[int] = None) -> np.ndarray:
        ids = self.identities if group is None else self.identities[self.groups == group]
        return np.unique(ids)

    def subject_group(self) -> dict:
        return {int(j): int(g) for j, g in zip(self.identities, self.groups)}

    def counts(self) -> dict:
        return {
            "samples": len(self),
            "subjects_per_group": [int(len(self.subjects(g))) for g in range(self.nd)],
            "samples_per_group": [int(np.sum(self.groups == g)) for g in range(self.nd)],
        }

    # disk format ----------------------------------------------------------------

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "images.bin", "wb") as fh:
            fh.write(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        manifest = {
            "nd": self.nd,
            "counts": self.counts(),
            "shape": list(self.images.shape[1:]),
            "seed": self.meta.get("seed"),
            "meta": self.meta,
            "samples": [
                {"file": "images.bin", "index": i, "sample_id": int(s), "identity": int(j), "group": int(g)}
                for i, (s, j, g) in enumerate(zip(self.sample_ids, self.identities, self.groups))
            ],
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        shape = tuple(manifest["shape"])
        n = len(manifest["samples"])
        images = np.frombuffer((path / "images.bin").read_bytes(), dtype="<f8").astype(np.float64)
        images = images.reshape((n,) + shape)
        recs = manifest["samples"]
        return cls(
            images,
            np.array([r["identity"] for r in recs], dtype=np.intp),
            np.array([r["group"] for r in recs], dtype=np.intp),
            np.array([r["sample_id"] for r in recs], dtype=np.intp),
            int(manifest["nd"]),
            manifest.get("meta", {}),
        )


def _wave(xx, yy, freq, angle, phase):
    return np.cos(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)


def group_pattern(g: int, nd: int, size: int) -> np.ndarray:
    """Fixed low-frequency oriented grating for group ``g`` (unit amplitude)."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    return _wave(xx, yy, 1.0 + 0.5 * g, np.pi * g / max(nd, 1), 0.0)


def identity_band(g: int) -> tuple[float, float]:
    # overlapping bands: groups differ in which frequencies identify a person, but at
    # equal strength no group is intrinsically harder (steeper offsets push the top
    # group to where 1px jitter is a quarter period and held-out verification collapses)
    return 2.0 + 0.5 * g, 3.5 + 0.5 * g


def identity_pattern(rng: np.random.Generator, g: int, size: int, components: int) -> np.ndarray:
    """Sum of random-phase gratings in the group's frequency band, unit RMS."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    lo, hi = identity_band(g)
    out = np.zeros((size, size))
    for _ in range(components):
        out += _wave(xx, yy, rng.uniform(lo, hi), rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi))
    return out / np.sqrt(components / 2.0)


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic, group-balanced dataset.  Identity ``j`` of group ``g`` is ``g * subjects_per_group + j``."""
    size = cfg.image_size
    strengths = cfg.identity_strength_per_group or [cfg.identity_signature_strength] * cfg.nd
    images, identities, groups = [], [], []
    for g in range(cfg.nd):
        gp = group_pattern(g, cfg.nd, size) * cfg.group_signature_strength
        for j in range(cfg.subjects_per_group):
            subj_rng = np.random.default_rng([cfg.seed, 1, g, j])
            base = gp + strengths[g] * identity_pattern(subj_rng, g, size, cfg.components)
            for i in range(cfg.images_per_subject):
                img_rng = np.random.default_rng([cfg.seed, 2, g, j, i])
                img = base
                if cfg.jitter:
                    dy, dx = img_rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
                    img = np.roll(img, (int(dy), int(dx)), axis=(0, 1))
                img = 0.5 + 0.15 * img
                if cfg.noise_std:
                    img = img + img_rng.normal(0.0, cfg.noise_std, size=img.shape)
                images.append(np.clip(img, 0.0, 1.0))
                identities.append(g * cfg.subjects_per_group + j)
                groups.append(g)
    images = np.stack(images)[:, None].astype(np.float64)
    n = len(identities)
    return Dataset(images, np.array(identities, dtype=np.intp), np.array(groups, dtype=np.intp),
                   np.arange(n, dtype=np.intp), cfg.nd, {"seed": cfg.seed, "synth": cfg.model_dump()})


def _parse_ratio(r) -> Fraction:
    return Fraction(str(r)) if not isinstance(r, Fraction) else r


def ratio_subsample(dataset: Dataset, ratios: Sequence, seed: int = 0) -> Dataset:
    """Keep floor(ratio_k / max(ratios) * subjects_k) random subjects of each group k."""
    if len(ratios) != dataset.nd:
        raise ValueError(f"need {dataset.nd} ratios, got {len(ratios)}")
    fr = [_parse_ratio(r) for r in ratios]
    if any(r < 0 for r in fr):
        raise ValueError("ratios must be non-negative")
    top = max(fr)
    if top == 0:
        raise ValueError("at least one ratio must be positive")
    keep_subjects = []
    for g in range(dataset.nd):
        subjects = dataset.subjects(g)
        n_keep = math.floor(fr[g] / top * len(subjects))
        if n_keep >= len(subjects):
            keep_subjects.extend(subjects.tolist())
            continue
        rng = np.random.default_rng([seed, g])
        keep_subjects.extend(sorted(rng.choice(subjects, size=n_keep, replace=False).tolist()))
    out = dataset.subset(np.flatnonzero(np.isin(dataset.identities, keep_subjects)))
    out.meta["ratios"] = [str(r) for r in ratios]
    return out


@dataclass
class FoldSpec:
    index: int
    subjects: list


def make_folds(dataset: Dataset, k: int, seed: int = 0) -> list[FoldSpec]:
    """Partition subjects of every group into ``k`` near-equal folds; earlier folds take the remainder."""
    if k < 2:
        raise ValueError("k must be at least 2")
    folds = [[] for _ in range(k)]
    for g in range(dataset.nd):
        subjects = dataset.subjects(g)
        if len(subjects) == 0:
            continue
        if len(subjects) < k:
            raise ValueError(f"group {g} has {len(subjects)} subjects, fewer than k={k}")
        perm = np.random.default_rng([seed, g]).permutation(subjects)
        for i, part in enumerate(np.array_split(perm, k)):
            folds[i].extend(sorted(int(s) for s in part))
    return [FoldSpec(i, sorted(f)) for i, f in enumerate(folds)]


def fold_split(dataset: Dataset, folds: list[FoldSpec], test_index: int) -> tuple[Dataset, Dataset]:
    test_subjects = folds[test_index].subjects
    is_test = np.isin(dataset.identities, test_subjects)
    return dataset.subset(np.flatnonzero(~is_test)), dataset.subset(np.flatnonzero(is_test))


class Pair(NamedTuple):
    idx_a: int
    idx_b: int
    genuine: bool
    group: int


def _sample_pairs(rng, candidates: np.ndarray, n: int) -> np.ndarray:
    if len(candidates) == 0:
        return candidates
    replace = len(candidates) < n
    pick = rng.choice(len(candidates), size=n, replace=replace)
    return candidates[np.sort(pick)]


def generate_pairs(dataset: Dataset, pairs_per_group: int, seed: int = 0) -> list[Pair]:
    """Within-group genuine/impostor pairs, half of each; indices are positions in ``dataset``."""
    if pairs_per_group < 2:
        raise ValueError("pairs_per_group must be at least 2")
    n_gen = pairs_per_group // 2
    n_imp = pairs_per_group - n_gen
    out: list[Pair] = []
    for g in range(dataset.nd):
        rows = np.flatnonzero(dataset.groups == g)
        if len(rows) == 0:
            continue
        ids = dataset.identities[rows]
        uniq, counts = np.unique(ids, return_counts=True)
        if len(uniq) < 2 or not np.any(counts >= 2):
            raise ValueError(f"group {g} needs at least two subjects and one subject with two images")
        ia, ib = np.triu_indices(len(rows), k=1)
        same = ids[ia] == ids[ib]
        cand = np.stack([rows[ia], rows[ib]], axis=1)
        rng = np.random.default_rng([seed, g])
        gen = _sample_pairs(rng, cand[same], n_gen)
        imp = _sample_pairs(rng, cand[~same], n_imp)
        out.extend(Pair(int(a), int(b), True, g) for a, b in gen)
        out.extend(Pair(int(a), int(b), False, g) for a, b in imp)
    return out


def write_pairs(pairs: Sequence[Pair], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["idx_a", "idx_b", "genuine", "group"])
        for p in pairs:
            w.writerow([p.idx_a, p.idx_b, int(p.genuine), p.group])


def read_pairs(path) -> list[Pair]:
    with open(path, newline="") as fh:
        return [Pair(int(r["idx_a"]), int(r["idx_b"]), bool(int(r["genuine"])), int(r["group"]))
                for r in csv.DictReader(fh)]

"""Experiment configuration: one JSON document, validated before any work starts."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from .data import SynthConfig
from .demog import LabelMode
from .trainer import TrainConfig

SEED_ENV = "GACLAB_SEED"


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pairs_per_group: int = Field(200, ge=2, description="verification pairs per group, half genuine")
    pair_seed: int = 0
    reference_group: int = Field(0, ge=0, description="reference distribution for relative entropy")
    bins: int = Field(64, ge=2, description="histogram bins for relative entropy")
    correlation_bins: int = Field(40, ge=2)
    folds: int = Field(5, ge=2, description="subject-disjoint folds used by sweeps and --folds training")
    fold_index: int = Field(0, ge=0, description="held-out fold")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    synth: SynthConfig = Field(default_factory=SynthConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    label_mode: LabelMode = LabelMode.GROUND_TRUTH
    label_seed: int = Field(0, description="seed of the random label mode")
    classifier: Optional[str] = Field(None, description="group classifier checkpoint for estimated labels")
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={
            "synth": self.synth.model_copy(update={"seed": seed}),
            "train": self.train.model_copy(update={"seed": seed}),
        })


def load_config(path=None, env=None) -> ExperimentConfig:
    """Parse and validate; ``GACLAB_SEED`` replaces both the data and the training seed."""
    env = os.environ if env is None else env
    raw = json.loads(Path(path).read_text()) if path else {}
    cfg = ExperimentConfig.model_validate(raw)
    if env.get(SEED_ENV):
        cfg = cfg.with_seed(int(env[SEED_ENV]))
    return cfg


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()

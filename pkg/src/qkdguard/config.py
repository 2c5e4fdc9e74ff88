"""Experiment configuration: one versioned JSON document.

The file nests the channel, decoy, security-budget, feasible-set, and
training sections; a SHA-256 digest of the canonical serialization stamps
every output artifact so datasets and models can be traced to the exact
configuration that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .adversary import FAMILIES
from .attacks import FeasibleSet
from .finite_key import EpsilonBudget
from .physics import ChannelParams, DecoyConfig
from .training import TrainConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class TrainSettings:
    """Scalar training hyperparameters (model sections live alongside)."""

    rounds: int = 6
    generations: int = 40
    population: int = 16
    far_target: float = 0.01
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1000.0
    window: int = 8
    block_size: int = 50_000
    honest_blocks_per_round: int = 667
    hard_negative_cap: int = 2000
    hard_negatives_per_round: int = 160
    eval_blocks_per_candidate: int = 4
    miss_eval_blocks: int = 200
    families: tuple[str, ...] = FAMILIES
    dro: bool = True
    eta_dro: float = 1.0
    tv_budget: float = 0.5
    lambda_cost: float = 0.0
    temporal_epochs: int = 8
    temporal_lr: float = 0.05
    temporal_hidden: int = 32
    shrinkage: float = 0.1
    randomize: bool = True
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    channel: ChannelParams = field(default_factory=ChannelParams)
    decoy: DecoyConfig = field(default_factory=DecoyConfig)
    budget: EpsilonBudget = field(default_factory=EpsilonBudget)
    feasible: FeasibleSet | None = None
    train: TrainSettings = field(default_factory=TrainSettings)
    version: int = CONFIG_VERSION

    def resolved_feasible(self) -> FeasibleSet:
        if self.feasible is not None:
            return self.feasible
        return FeasibleSet.from_channel(
            self.channel,
            n_pulses=self.train.block_size,
            eps_decoy=self.budget.eps_decoy,
        )

    def to_train_config(self, seed: int | None = None) -> TrainConfig:
        kwargs = dataclasses.asdict(self.train)
        kwargs["families"] = tuple(kwargs["families"])
        if seed is not None:
            kwargs["seed"] = seed
        return TrainConfig(
            channel=self.channel,
            decoy=self.decoy,
            budget=self.budget,
            feasible=self.resolved_feasible(),
            **kwargs,
        )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = {
        "version": cfg.version,
        "channel": dataclasses.asdict(cfg.channel),
        "decoy": dataclasses.asdict(cfg.decoy),
        "budget": dataclasses.asdict(cfg.budget),
        "train": dataclasses.asdict(cfg.train),
    }
    d["train"]["families"] = list(cfg.train.families)
    if cfg.feasible is not None:
        d["feasible"] = dataclasses.asdict(cfg.feasible)
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    version = int(d.get("version", -1))
    if version != CONFIG_VERSION:
        raise ValueError(f"unsupported config version {version!r}")
    train = dict(d.get("train", {}))
    if "families" in train:
        train["families"] = tuple(train["families"])
    return ExperimentConfig(
        channel=ChannelParams(**d.get("channel", {})),
        decoy=DecoyConfig(**d.get("decoy", {})),
        budget=EpsilonBudget(**d.get("budget", {})),
        feasible=FeasibleSet(**d["feasible"]) if "feasible" in d else None,
        train=TrainSettings(**train),
        version=version,
    )


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_config(path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def config_digest(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

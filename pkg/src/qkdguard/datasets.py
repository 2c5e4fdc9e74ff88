"""Newline-delimited dataset persistence for block streams.

One self-describing JSON record per line: a header row carrying the format
version and configuration digest, followed by one row per block holding
the raw counts, the extracted feature vector, and the ground-truth label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .simulator import BlockRecord, block_from_dict, block_to_dict
from .telemetry import extract_features

DATASET_FORMAT = "qkdguard-dataset"
DATASET_VERSION = 1


@dataclass
class Dataset:
    digest: str
    blocks: list[BlockRecord]
    features: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(b.truth.attacked) for b in self.blocks])

    @property
    def families(self) -> list[str]:
        return [b.truth.attack.family for b in self.blocks]

    @property
    def leaks(self) -> np.ndarray:
        return np.array([b.truth.leak for b in self.blocks])


def write_dataset(path, blocks: list[BlockRecord], digest: str) -> None:
    """Write header plus one row per block, features included."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "type": "header",
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "config_digest": digest,
            "count": len(blocks),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for t, block in enumerate(blocks):
            row = {"type": "block", "t": t}
            row.update(block_to_dict(block))
            row["features"] = [float(v) for v in extract_features(block)]
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_dataset(path) -> Dataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"dataset {path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset header: {lines[0][:80]!r}")
    blocks, feats = [], []
    for line in lines[1:]:
        row = json.loads(line)
        if row.get("type") != "block":
            raise ValueError("unexpected row type in dataset")
        blocks.append(block_from_dict(row))
        feats.append(row["features"])
    if not blocks:
        raise ValueError(f"dataset {path} has no block rows")
    return Dataset(
        digest=header.get("config_digest", ""),
        blocks=blocks,
        features=np.array(feats, dtype=float),
    )

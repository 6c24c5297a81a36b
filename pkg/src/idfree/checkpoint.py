from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import formats
from .model import PARAM_ORDER


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    text_dim: int
    visual_dim: int
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    # where the training data came from, e.g. {"data_dir": ...}
    source: dict = field(default_factory=dict)

    def save(self, path) -> None:
        meta = {
            "format": "idfree-checkpoint",
            "config": self.config,
            "config_hash": formats.config_hash(self.config),
            "text_dim": self.text_dim,
            "visual_dim": self.visual_dim,
            "epoch": self.epoch,
            "metrics": self.metrics,
            "source": self.source,
        }
        formats.write_checkpoint(path, {k: self.params[k] for k in PARAM_ORDER}, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = formats.read_checkpoint(path)
        missing = set(PARAM_ORDER) - set(arrays)
        if missing:
            raise formats.FormatError(f"{path}: checkpoint lacks {sorted(missing)}")
        return cls(arrays, meta["config"], meta["text_dim"], meta["visual_dim"],
                   meta.get("epoch", 0), meta.get("metrics", {}), meta.get("source", {}))

    @property
    def config_hash(self) -> str:
        return formats.config_hash(self.config)

"""Confusion-matrix accumulation and mean intersection-over-union."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np


@dataclass
class MIoUAccumulator:
    num_classes: int
    ignore_index: int = 255
    matrix: np.ndarray = field(init=False)

    def __post_init__(self):
        self.matrix = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def update(self, prediction: np.ndarray, labels: np.ndarray) -> None:
        valid = labels != self.ignore_index
        np.add.at(self.matrix, (labels[valid], prediction[valid]), 1)

    def result(self) -> Tuple[Dict[int, float], float]:
        """Per-class IoU and their mean; classes absent from both sides excluded."""
        tp = np.diag(self.matrix).astype(np.float64)
        fp = self.matrix.sum(axis=0) - tp
        fn = self.matrix.sum(axis=1) - tp
        denom = tp + fp + fn
        per_class = {int(k): float(tp[k] / denom[k]) for k in range(self.num_classes) if denom[k] > 0}
        miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
        return per_class, miou

"""The dataset carrier shared by every stage of the pipeline."""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class SampleSet:
    """Rows of states, with an optional scalar label and per-row weights.

    ``labels`` holds the conditioning value of each row (the slow coordinate
    a generator was trained on, or the umbrella target a biased run was
    restrained to).  ``weights`` defaults to uniform.
    """

    points: np.ndarray
    labels: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ValueError(f"points must be 2-D, got shape {pts.shape}")
        object.__setattr__(self, "points", pts)
        for name in ("labels", "weights"):
            val = getattr(self, name)
            if val is None:
                continue
            arr = np.asarray(val, dtype=float).reshape(-1)
            if arr.shape[0] != pts.shape[0]:
                raise ValueError(f"{name} has {arr.shape[0]} rows, points has {pts.shape[0]}")
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def with_points(self, points) -> "SampleSet":
        return replace(self, points=points)

    def column(self, j: int) -> np.ndarray:
        return self.points[:, j]

    @classmethod
    def concat(cls, sets) -> "SampleSet":
        sets = list(sets)
        if not sets:
            raise ValueError("nothing to concatenate")
        pts = np.concatenate([s.points for s in sets])
        labels = None
        if all(s.labels is not None for s in sets):
            labels = np.concatenate([s.labels for s in sets])
        weights = None
        if any(s.weights is not None for s in sets):
            weights = np.concatenate(
                [s.weights if s.weights is not None else np.ones(len(s)) for s in sets]
            )
        return cls(pts, labels, weights)

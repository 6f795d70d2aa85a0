"""
Label mask definition & helpers.

Both fine and coarse annotations are LabelMasks: a 2D grid of class
indices in [0, C) plus the IGNORE value.
"""

from __future__ import annotations
from dataclasses import dataclass

import numpy as np

from errors import DataError, ShapeError

IGNORE = 255


@dataclass(eq=False)
class LabelMask:

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeError(f"label mask must be 2D, got shape {labels.shape}")
        self.labels = labels.astype(np.uint8, copy=False)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def labeled(self) -> np.ndarray:
        """ Boolean grid, True where the pixel carries a real class. """
        return self.labels != IGNORE

    def coverage(self) -> float:
        return float(self.labeled().mean())

    def classes(self) -> set[int]:
        return {int(k) for k in np.unique(self.labels) if k != IGNORE}

    def validate(self, num_classes: int) -> None:
        """
        Check every entry is a valid class or IGNORE.

        Raises:
            - DataError: naming the first offending pixel (row, col) and value
        """
        bad = (self.labels >= num_classes) & (self.labels != IGNORE)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise DataError(
                f"class {int(self.labels[row, col])} at pixel ({row}, {col}) "
                f"outside [0, {num_classes}) and not ignore ({IGNORE})"
            )

    def copy(self) -> LabelMask:
        return LabelMask(self.labels.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelMask):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)


def stack_masks(masks: list[LabelMask]) -> np.ndarray:
    """ Stack masks of identical shape into an (n, h, w) uint8 batch. """
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise ShapeError(f"cannot batch masks of differing shapes {sorted(shapes)}")
    return np.stack([m.labels for m in masks])


def labeled_precision(coarse: LabelMask, fine: LabelMask) -> float:
    """
    Fraction of labeled coarse pixels that agree with the fine mask.
    1.0 for a coarse mask without labeled pixels.
    """
    if coarse.shape != fine.shape:
        raise ShapeError(f"coarse {coarse.shape} vs fine {fine.shape}")
    labeled = coarse.labeled()
    total = int(labeled.sum())
    if total == 0:
        return 1.0
    return int((coarse.labels[labeled] == fine.labels[labeled]).sum()) / total

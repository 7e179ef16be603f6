"""Joint classification/segmentation objective.

Segmentation targets are read from the mask at the receptive-field center of
every output-grid location; each head is scored by mean cross-entropy over
the grid, the image head by cross-entropy on its GAP logits, and the total is
the lambda-weighted sum of the terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .model import ReceptiveFieldInfo
from .tensor import Tensor, add, cross_entropy, scale

WEIGHT_SUM_TOL = 1e-9


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_seg: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.lambda_seg)

    @classmethod
    def single(cls, lambda_seg: float) -> "LossWeights":
        """One segmentation objective with the remainder on classification."""
        return cls(1.0 - lambda_seg, [lambda_seg])


def validate_weights(weights: LossWeights) -> None:
    values = [weights.lambda_cls, *weights.lambda_seg]
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"loss weight {v} outside [0, 1]")
    total = sum(values)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise ConfigError(f"loss weights must sum to 1, got {total:.12g}")


def extract_seg_labels(mask: np.ndarray, rf: ReceptiveFieldInfo, grid: tuple[int, int]) -> np.ndarray:
    """label[i, j] = mask[c + jump*i, c + jump*j] with c the RF center offset."""
    mask = np.asarray(mask)
    gh, gw = grid
    c, jump = rf.center_offset, rf.jump
    if not float(c).is_integer():
        raise DimensionError(f"receptive-field center {c} is not on the pixel grid")
    c = int(c)
    last_r, last_c = c + jump * (gh - 1), c + jump * (gw - 1)
    if mask.ndim < 2 or last_r >= mask.shape[-2] or last_c >= mask.shape[-1]:
        raise DimensionError(
            f"mask of shape {mask.shape} does not cover sampled range up to ({last_r}, {last_c})"
        )
    rows = c + jump * np.arange(gh)
    cols = c + jump * np.arange(gw)
    return mask[..., rows[:, None], cols[None, :]].astype(np.int64)


def seg_loss(seg_logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over batch and all G_h x G_w locations."""
    labels = np.asarray(labels)
    if seg_logits.data.ndim != 4 or labels.shape != (seg_logits.shape[0],) + seg_logits.shape[2:]:
        raise DimensionError(f"seg labels {labels.shape} do not match logits {seg_logits.shape}")
    return cross_entropy(seg_logits, labels, axis=1)


def cls_loss(image_logits: Tensor, labels) -> Tensor:
    return cross_entropy(image_logits, np.asarray(labels), axis=1)


def joint_loss(weights: LossWeights, cls: Tensor, segs: list[Tensor]) -> Tensor:
    if len(segs) != len(weights.lambda_seg):
        raise ConfigError(f"{len(segs)} segmentation losses for {len(weights.lambda_seg)} weights")
    total = scale(cls, weights.lambda_cls)
    for lam, s in zip(weights.lambda_seg, segs):
        total = add(total, scale(s, lam))
    return total

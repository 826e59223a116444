"""Channel-group scoring and keep-mask selection under a budget ratio.

Scores always attach to the input-channel groups of a consuming matrix
(rows of the attention output projection, grouped per head, or rows of the
FFN down projection, one per neuron).  Higher score means more worth
keeping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import ValidationError
from .model import SITE_ATTN, SITES, ChannelMask, ToyTransformer, loss_and_mask_grads

CRITERIA = ("magnitude", "snip", "fluctuation")


@dataclass
class GroupScores:
    scores: np.ndarray  # one entry per channel group
    group_size: int
    criterion: str
    site: str = ""
    layer: int = 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1 or self.scores.size < 1:
            raise ValidationError("scores must be a nonempty 1-D vector")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("scores must be finite")

    @property
    def num_groups(self) -> int:
        return self.scores.size


def _grouped_row_sumsq(w: np.ndarray, group_size: int) -> np.ndarray:
    w = linalg.as_matrix(w, "weight")
    if group_size < 1 or w.shape[0] % group_size != 0:
        raise ValidationError(
            f"group size {group_size} does not divide {w.shape[0]} weight rows"
        )
    per_channel = np.sum(w * w, axis=1)
    return per_channel.reshape(-1, group_size).sum(axis=1)


def magnitude_scores(w, group_size: int, site: str = "", layer: int = 0) -> GroupScores:
    """Squared-l2 row magnitude of the consuming matrix, summed per group."""
    return GroupScores(_grouped_row_sumsq(w, group_size), group_size, "magnitude", site, layer)


def snip_scores(
    model: ToyTransformer, tokens, targets, site: str, layer: int, group_size: int
) -> GroupScores:
    """Normalized absolute gate gradients; sums to 1 (uniform if all zero)."""
    expected = model.head_dim if site == SITE_ATTN else 1
    if group_size != expected:
        raise ValidationError(f"site {site!r} uses group_size {expected}, got {group_size}")
    _, grads = loss_and_mask_grads(model, tokens, targets, site, layer)
    mags = np.abs(grads)
    total = mags.sum()
    if total == 0.0:
        scores = np.full(mags.size, 1.0 / mags.size)
    else:
        scores = mags / total
    return GroupScores(scores, group_size, "snip", site, layer)


def fluctuation_scores(x, w, group_size: int, site: str = "", layer: int = 0) -> GroupScores:
    """Per-channel activation variance times squared row norm, summed per group."""
    flat = linalg.flatten_batch(x)
    w = linalg.as_matrix(w, "weight")
    if flat.shape[1] != w.shape[0]:
        raise ValidationError(
            f"activation channels {flat.shape[1]} != weight rows {w.shape[0]}"
        )
    if group_size < 1 or w.shape[0] % group_size != 0:
        raise ValidationError(
            f"group size {group_size} does not divide {w.shape[0]} channels"
        )
    per_channel = linalg.column_variances(flat)[0] * np.sum(w * w, axis=1)
    scores = per_channel.reshape(-1, group_size).sum(axis=1)
    return GroupScores(scores, group_size, "fluctuation", site, layer)


def kept_group_count(num_groups: int, keep_ratio: float) -> int:
    """Ceiling of ratio * groups, so small layers never lose everything."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ValidationError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    return max(1, min(num_groups, math.ceil(keep_ratio * num_groups)))


def _top_groups(scores: np.ndarray, count: int) -> np.ndarray:
    # stable argsort on negated scores: ties resolve to the lower group index
    order = np.argsort(-scores, kind="stable")
    keep = np.zeros(scores.size, dtype=bool)
    keep[order[:count]] = True
    return keep


def select_mask(scores: GroupScores, keep_ratio: float) -> ChannelMask:
    """Keep the ceil(ratio * groups) highest-scoring groups of one layer/site."""
    count = kept_group_count(scores.num_groups, keep_ratio)
    group_keep = _top_groups(scores.scores, count)
    return ChannelMask(
        keep=np.repeat(group_keep, scores.group_size),
        group_size=scores.group_size,
        layer=scores.layer,
        site=scores.site,
    )


def select_masks_global(all_scores: list[GroupScores], keep_ratio: float) -> list[ChannelMask]:
    """Rank the groups of one site type across all layers at once.

    Keeps the top ceil(ratio * total) groups model-wide, then re-adds the
    best group of any layer the global cut emptied (a layer must keep at
    least one group for its matrices to stay well-formed).
    """
    if not all_scores:
        raise ValidationError("no scores to rank")
    flat = np.concatenate([s.scores for s in all_scores])
    count = kept_group_count(flat.size, keep_ratio)
    keep_flat = _top_groups(flat, count)

    masks = []
    offset = 0
    for s in all_scores:
        group_keep = keep_flat[offset : offset + s.num_groups].copy()
        offset += s.num_groups
        if not group_keep.any():
            group_keep[int(np.argmax(s.scores))] = True
        masks.append(
            ChannelMask(
                keep=np.repeat(group_keep, s.group_size),
                group_size=s.group_size,
                layer=s.layer,
                site=s.site,
            )
        )
    return masks

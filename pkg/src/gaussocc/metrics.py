"""Scene-completion and temporal-consistency evaluation.

Occupancy IoU treats all non-empty classes as one occupied class. Mean IoU
averages per-class IoU over the non-empty classes present in either grid.
STCV (spatio-temporal classification variability) is the fraction of voxels,
non-empty in both of two consecutive frames, whose label changes, averaged
over adjacent pairs; lower means a temporally steadier prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import EMPTY_LABEL, RigidTransform, VoxelGrid, point_to_index


@dataclass
class ConfusionCounts:
    """Per-class true positives, false positives, false negatives, indexed by
    class id. Additive over any partition of the voxel lattice."""

    n_classes: int
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            v = getattr(self, name)
            v = np.zeros(self.n_classes, dtype=np.int64) if v is None else np.asarray(v, dtype=np.int64)
            if v.shape != (self.n_classes,) or np.any(v < 0):
                raise ValueError(f"{name} must be {self.n_classes} non-negative counts")
            setattr(self, name, v)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot add counts over different class sets")
        return ConfusionCounts(self.n_classes, self.tp + other.tp,
                               self.fp + other.fp, self.fn + other.fn)


def _labels(grid) -> np.ndarray:
    if isinstance(grid, VoxelGrid):
        if not grid.is_labels:
            raise ValueError("expected a label grid")
        return grid.payload
    return np.asarray(grid)


def confusion(pred, gt, n_classes: int | None = None) -> ConfusionCounts:
    """Count per-class TP/FP/FN between two label grids. The empty label is
    never a counted class but does count as a mismatch."""
    p = _labels(pred)
    g = _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"grid shapes differ: {p.shape} vs {g.shape}")
    if n_classes is None:
        n_classes = pred.spec.n_classes if isinstance(pred, VoxelGrid) else int(
            max(p[p != EMPTY_LABEL].max(initial=0), g[g != EMPTY_LABEL].max(initial=0)) + 1
        )
    counts = ConfusionCounts(n_classes)
    for c in range(n_classes):
        pi = p == c
        gi = g == c
        counts.tp[c] = np.count_nonzero(pi & gi)
        counts.fp[c] = np.count_nonzero(pi & ~gi)
        counts.fn[c] = np.count_nonzero(~pi & gi)
    return counts


def occupancy_iou(pred, gt) -> float:
    """Class-agnostic IoU: every non-empty class merges into one occupied
    class first. Two fully empty grids agree perfectly (1.0); an empty
    intersection with a non-empty union is 0.0."""
    p = _labels(pred) != EMPTY_LABEL
    g = _labels(gt) != EMPTY_LABEL
    if p.shape != g.shape:
        raise ValueError(f"grid shapes differ: {p.shape} vs {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def per_class_iou(counts: ConfusionCounts) -> dict[int, float]:
    """IoU per class that is present anywhere (TP + FP + FN > 0)."""
    out = {}
    for c in range(counts.n_classes):
        denom = counts.tp[c] + counts.fp[c] + counts.fn[c]
        if denom > 0:
            out[c] = float(counts.tp[c] / denom)
    return out


def mean_iou(counts: ConfusionCounts) -> float:
    """Mean per-class IoU over present classes; absent classes are excluded."""
    ious = per_class_iou(counts)
    if not ious:
        raise ValueError("no class present in either grid")
    return float(np.mean(list(ious.values())))


@dataclass(frozen=True)
class StcvResult:
    """STCV of one scene: the averaged value, the per-pair change fractions,
    and the indices of pairs with no shared non-empty voxel (those contribute
    zero and are flagged rather than silently dropped)."""

    value: float
    pair_fractions: tuple[float, ...]
    degenerate_pairs: tuple[int, ...]


def _resample_into(frame_next: VoxelGrid, pose_cur: RigidTransform,
                   pose_next: RigidTransform) -> np.ndarray:
    """Nearest-voxel lookup of the next frame's labels on the current frame's
    lattice after rigid ego alignment; out-of-range voxels read as empty."""
    spec = frame_next.spec
    centers = spec.center_lattice()
    moved = pose_next.invert().compose(pose_cur).apply(centers.reshape(-1, 3))
    idx = point_to_index(spec, moved)
    inside = np.all((idx >= 0) & (idx < np.array(spec.dims)), axis=1)
    labels = np.full(idx.shape[0], EMPTY_LABEL, dtype=np.uint8)
    ii = idx[inside]
    labels[inside] = frame_next.payload[ii[:, 0], ii[:, 1], ii[:, 2]]
    return labels.reshape(spec.dims)


def stcv(frames: list, poses: list[RigidTransform] | None = None) -> StcvResult:
    """Average over adjacent frame pairs of the label-change fraction on
    voxels non-empty in both frames. With poses supplied, each next frame is
    first resampled into the current frame's lattice by nearest-voxel lookup
    after rigid alignment."""
    if len(frames) < 2:
        raise ValueError("STCV needs at least two frames")
    if poses is not None and len(poses) != len(frames):
        raise ValueError("one pose per frame required")
    fractions = []
    degenerate = []
    for t in range(len(frames) - 1):
        cur = _labels(frames[t])
        if poses is not None:
            nxt = _resample_into(frames[t + 1], poses[t], poses[t + 1])
        else:
            nxt = _labels(frames[t + 1])
        if cur.shape != nxt.shape:
            raise ValueError(f"frame {t} and {t + 1} have different dims")
        shared = (cur != EMPTY_LABEL) & (nxt != EMPTY_LABEL)
        n_shared = np.count_nonzero(shared)
        if n_shared == 0:
            degenerate.append(t)
            fractions.append(0.0)
        else:
            fractions.append(np.count_nonzero(cur[shared] != nxt[shared]) / n_shared)
    value = float(np.mean(fractions))
    return StcvResult(value, tuple(fractions), tuple(degenerate))


@dataclass(frozen=True)
class StcvReport:
    """Scene aggregates of STCV values: mean, min, max."""

    per_scene: tuple[float, ...]
    mean: float
    min: float
    max: float


def stcv_aggregate(per_scene) -> StcvReport:
    values = [float(v.value) if isinstance(v, StcvResult) else float(v) for v in per_scene]
    if not values:
        raise ValueError("no scenes to aggregate")
    return StcvReport(tuple(values), float(np.mean(values)), min(values), max(values))

"""Anchor grids, IoU k-means for anchor sizing, and match simulation.

Anchors are placed on a feature pyramid: level l has a pixel stride and
a feature-map size, and every cell gets one anchor per (size, ratio,
effective angle) combination. Rotation is restricted to multiples of 90
degrees, which reduces to an exact width/height swap, so +90 and -90
collapse to the same rectangle and are deduplicated.

``cluster_anchor_sizes`` runs k-means over ground-truth (w, h) pairs
with distance 1 - IoU, the standard way to pick anchor sizes from data
without training. ``match_anchors`` scores an anchor configuration by
simulating threshold matching against annotated instances.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .annotations import Instance
from .errors import TooFewBoxes, ValidationError
from .geometry import BoxWH, iou_matrix, wh_iou_matrix


@dataclass(frozen=True)
class AnchorSpec:
    """Anchor layout: sizes, h/w ratios, angle grid, strides, cell offset.

    With ``shared_sizes`` every level gets the full size list; otherwise
    sizes pair with strides one to one. ``offset`` is the fraction of a
    stride added to the cell origin to get the anchor center.
    """

    sizes: tuple = (16.0, 32.0, 64.0, 128.0, 256.0)
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    angles: tuple = (-90.0, 0.0, 90.0)
    strides: tuple = (4, 8, 16, 32, 64)
    offset: float = 0.5
    shared_sizes: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(float(s) for s in self.sizes))
        object.__setattr__(self, "aspect_ratios", tuple(float(r) for r in self.aspect_ratios))
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if not self.sizes or any(s <= 0 for s in self.sizes):
            raise ValidationError("sizes must be positive")
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ValidationError("aspect ratios must be positive")
        if not self.strides or any(s <= 0 for s in self.strides):
            raise ValidationError("strides must be positive")
        if any(a % 90.0 != 0 for a in self.angles):
            raise ValidationError("angles must be multiples of 90 degrees")
        if not self.angles:
            raise ValidationError("at least one angle required")
        if not 0.0 <= self.offset < 1.0:
            raise ValidationError(f"offset must be in [0, 1), got {self.offset}")
        if not self.shared_sizes and len(self.sizes) != len(self.strides):
            raise ValidationError(
                f"{len(self.sizes)} sizes for {len(self.strides)} levels; "
                "set shared_sizes to reuse one list everywhere"
            )

    @property
    def effective_angles(self) -> tuple:
        """Angles folded mod 180 and deduplicated, sorted ascending."""
        return tuple(sorted({a % 180.0 for a in self.angles}))

    def sizes_at(self, level: int) -> tuple:
        return self.sizes if self.shared_sizes else (self.sizes[level],)


@dataclass(frozen=True, eq=False)
class LevelAnchors:
    """All anchors of one pyramid level with per-anchor provenance."""

    level: int
    stride: int
    fmap_w: int
    fmap_h: int
    boxes: np.ndarray  # (n, 4) corner form
    cells: np.ndarray  # (n, 2) cell (i, j)
    sizes: np.ndarray
    ratios: np.ndarray
    angles: np.ndarray

    @property
    def count(self) -> int:
        return self.boxes.shape[0]


@dataclass(frozen=True, eq=False)
class AnchorSet:
    levels: tuple

    @property
    def total(self) -> int:
        return sum(lv.count for lv in self.levels)

    def all_boxes(self) -> np.ndarray:
        return np.concatenate([lv.boxes for lv in self.levels], axis=0)


def generate_anchors(spec: AnchorSpec, fmap_dims: Sequence) -> AnchorSet:
    """Place anchors at every feature-map cell of every level.

    ``fmap_dims`` is one (width, height) pair per stride. The anchor for
    size s and ratio r has h = s*sqrt(r), w = s/sqrt(r), so its area is
    s^2 and h/w = r; a 90-degree angle swaps the two. Cells are walked
    row-major (y outer), combinations size-major within each cell.
    """
    if len(fmap_dims) != len(spec.strides):
        raise ValidationError(
            f"{len(fmap_dims)} feature maps for {len(spec.strides)} strides"
        )
    eff_angles = spec.effective_angles
    levels = []
    for level, (stride, (fw, fh)) in enumerate(zip(spec.strides, fmap_dims)):
        fw, fh = int(fw), int(fh)
        if fw <= 0 or fh <= 0:
            raise ValidationError(f"feature map {fw}x{fh} at level {level}")
        combos = [
            (
                (s / np.sqrt(r), s * np.sqrt(r)) if a == 0.0 else (s * np.sqrt(r), s / np.sqrt(r)),
                s,
                r,
                a,
            )
            for s in spec.sizes_at(level)
            for r in spec.aspect_ratios
            for a in eff_angles
        ]
        n_combo = len(combos)
        half_wh = np.array([c[0] for c in combos], dtype=np.float64) / 2.0
        ix, iy = np.meshgrid(np.arange(fw), np.arange(fh))  # row-major: y outer
        cells = np.stack([ix.ravel(), iy.ravel()], axis=1)
        centers = (cells + spec.offset) * stride
        centers = np.repeat(centers, n_combo, axis=0)
        half = np.tile(half_wh, (fw * fh, 1))
        boxes = np.concatenate([centers - half, centers + half], axis=1)
        levels.append(
            LevelAnchors(
                level=level,
                stride=stride,
                fmap_w=fw,
                fmap_h=fh,
                boxes=boxes,
                cells=np.repeat(cells, n_combo, axis=0),
                sizes=np.tile(np.array([c[1] for c in combos]), fw * fh),
                ratios=np.tile(np.array([c[2] for c in combos]), fw * fh),
                angles=np.tile(np.array([c[3] for c in combos]), fw * fh),
            )
        )
    return AnchorSet(levels=tuple(levels))


@dataclass(frozen=True, eq=False)
class ClusterResult:
    """Outcome of one IoU k-means clustering run."""

    k: int
    centroids: tuple  # BoxWH, sorted by area ascending
    assignments: np.ndarray
    mean_iou: float
    iterations: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "centroids": [[c.w, c.h] for c in self.centroids],
            "assignments": [int(a) for a in self.assignments],
            "mean_iou": self.mean_iou,
            "iterations": self.iterations,
            "seed": self.seed,
        }


def _as_wh_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        wh = np.asarray(boxes, dtype=np.float64)
    else:
        boxes = list(boxes)
        if boxes and isinstance(boxes[0], BoxWH):
            wh = np.array([[b.w, b.h] for b in boxes], dtype=np.float64)
        else:
            wh = np.asarray(boxes, dtype=np.float64)
    if wh.ndim != 2 or wh.shape[1] != 2:
        raise ValidationError(f"expected (n, 2) width/height data, got {wh.shape}")
    if wh.size and wh.min() <= 0:
        raise ValidationError("widths and heights must be positive")
    return wh


def _plus_plus_init(wh: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding with weight proportional to d = 1 - IoU."""
    n = wh.shape[0]
    chosen = [int(rng.integers(n))]
    best_iou = wh_iou_matrix(wh, wh[chosen[-1]][None, :])[:, 0]
    for _ in range(k - 1):
        d = 1.0 - best_iou
        total = d.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        best_iou = np.maximum(best_iou, wh_iou_matrix(wh, wh[idx][None, :])[:, 0])
    return wh[chosen].copy()


def _lloyd(wh: np.ndarray, centroids: np.ndarray, max_iters: int):
    """Assignment/update loop; returns (centroids, assignments, iterations)."""
    k = centroids.shape[0]
    assignment = np.argmax(wh_iou_matrix(wh, centroids), axis=1)
    iterations = 1
    for _ in range(max_iters):
        for c in range(k):
            mask = assignment == c
            if mask.any():
                centroids[c] = wh[mask].mean(axis=0)
        # re-seed empty clusters to the currently worst-fit boxes
        iou = wh_iou_matrix(wh, centroids)
        occupied = np.bincount(assignment, minlength=k) > 0
        if not occupied.all():
            dist = 1.0 - iou[np.arange(len(wh)), assignment]
            for c in np.flatnonzero(~occupied):
                worst = int(np.argmax(dist))
                centroids[c] = wh[worst]
                dist[worst] = -1.0
            iou = wh_iou_matrix(wh, centroids)
        new_assignment = np.argmax(iou, axis=1)
        iterations += 1
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    return centroids, assignment, iterations


def cluster_anchor_sizes(
    boxes,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    restarts: int = 10,
    init: str = "kmeans++",
) -> ClusterResult:
    """k-means over (w, h) with distance 1 - IoU; best of seeded restarts.

    Assignment sends each box to its max-IoU centroid (ties to the lowest
    index); the update step is the per-coordinate mean; clusters that end
    up empty are re-seeded to the boxes farthest from their centroids.
    Restart r uses the stream seeded by (seed, r), and the restart with
    the highest mean IoU wins, earliest on ties. Centroids are returned
    sorted by area ascending with assignments remapped to match.
    """
    wh = _as_wh_array(boxes)
    if k < 1:
        raise ValidationError(f"k must be at least 1, got {k}")
    if wh.shape[0] < k:
        raise TooFewBoxes(f"{wh.shape[0]} boxes for k={k}")
    if max_iters < 0:
        raise ValidationError("max_iters must be non-negative")
    if restarts < 1:
        raise ValidationError("restarts must be at least 1")
    if init not in ("kmeans++", "random"):
        raise ValidationError(f"unknown init {init!r}")

    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        if init == "kmeans++":
            centroids = _plus_plus_init(wh, k, rng)
        else:
            centroids = wh[rng.choice(wh.shape[0], size=k, replace=False)].copy()
        centroids, assignment, iterations = _lloyd(wh, centroids, max_iters)
        mean_iou = float(
            wh_iou_matrix(wh, centroids)[np.arange(len(wh)), assignment].mean()
        )
        if best is None or mean_iou > best[0]:
            best = (mean_iou, centroids, assignment, iterations)

    mean_iou, centroids, assignment, iterations = best
    order = np.lexsort((centroids[:, 1], centroids[:, 0], centroids.prod(axis=1)))
    centroids = centroids[order]
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    assignment = remap[assignment]
    mean_iou = float(
        wh_iou_matrix(wh, centroids)[np.arange(len(wh)), assignment].mean()
    )
    return ClusterResult(
        k=k,
        centroids=tuple(BoxWH(float(w), float(h)) for w, h in centroids),
        assignments=assignment,
        mean_iou=mean_iou,
        iterations=iterations,
        seed=seed,
    )


def sweep_k(boxes, k_range: Iterable[int], seed: int = 0, restarts: int = 10):
    """Cluster at each k and report (k, mean_iou) sorted by k."""
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValidationError("empty k range")
    return [
        (k, cluster_anchor_sizes(boxes, k, seed=seed, restarts=restarts).mean_iou)
        for k in ks
    ]


@dataclass(frozen=True, eq=False)
class MatchReport:
    """Counts and recall from simulated anchor-to-GT threshold matching."""

    pos_iou: float
    neg_iou: float
    force_match: bool
    n_anchors: int
    n_positive: int
    n_negative: int
    n_ignored: int
    n_gt: int
    recall: float
    per_class_recall: dict
    matched_per_gt: dict  # matched-anchor count -> number of GTs
    unmatched_gt_ids: tuple
    zero_gt_denominator: bool

    def to_dict(self) -> dict:
        return {
            "pos_iou": self.pos_iou,
            "neg_iou": self.neg_iou,
            "force_match": self.force_match,
            "n_anchors": self.n_anchors,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "n_ignored": self.n_ignored,
            "n_gt": self.n_gt,
            "recall": self.recall,
            "per_class_recall": {
                str(c): v for c, v in sorted(self.per_class_recall.items())
            },
            "matched_per_gt": {
                str(c): v for c, v in sorted(self.matched_per_gt.items())
            },
            "unmatched_gt_ids": list(self.unmatched_gt_ids),
            "zero_gt_denominator": self.zero_gt_denominator,
        }


def match_anchors(
    anchors: AnchorSet,
    gts: Sequence[Instance],
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
    force_match: bool = False,
) -> MatchReport:
    """Label anchors positive/negative/ignored against ground truth.

    An anchor is positive when its best IoU over non-ignore GTs reaches
    ``pos_iou``, negative when below ``neg_iou``, ignored in between. An
    anchor that would be negative but overlaps an ignore-flagged GT at
    ``neg_iou`` or more is ignored instead of negative. With
    ``force_match`` each GT claims its single best anchor (ties to the
    lowest anchor index) as positive even below the threshold.

    GTs are grouped by image id and each group is matched against the
    same anchor geometry, so the reported anchor counts total
    per-image anchors times the number of images (one pass when there
    are no GTs at all). A GT counts as recalled when at least one
    positive anchor reaches ``pos_iou`` with it (or claims it via
    force matching); ignore-flagged GTs never enter the recall
    denominator.
    """
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise ValidationError(
            f"need 0 <= neg_iou <= pos_iou <= 1, got {neg_iou}, {pos_iou}"
        )
    anchor_boxes = anchors.all_boxes()
    n_per_image = anchor_boxes.shape[0]

    groups = {}
    for inst in gts:
        groups.setdefault(inst.image_id, []).append(inst)

    n_positive = n_negative = n_ignored = 0
    recalled_by_class = Counter()
    total_by_class = Counter()
    per_gt_counts = []
    unmatched = []

    for image_id in sorted(groups) if groups else [None]:
        insts = groups.get(image_id, [])
        live = [i for i in insts if not i.ignore]
        ignored_insts = [i for i in insts if i.ignore]

        if live:
            gt_arr = np.array([i.bbox.as_tuple() for i in live])
            iou = iou_matrix(anchor_boxes, gt_arr)  # (A, G)
            max_iou = iou.max(axis=1)
        else:
            iou = np.zeros((n_per_image, 0))
            max_iou = np.zeros(n_per_image)

        positive = max_iou >= pos_iou
        matched_counts = (iou >= pos_iou).sum(axis=0) if live else np.zeros(0, dtype=int)

        if force_match and live:
            for g in range(len(live)):
                a = int(np.argmax(iou[:, g]))
                if not positive[a]:
                    positive[a] = True
                if iou[a, g] < pos_iou:
                    matched_counts[g] += 1

        negative = ~positive & (max_iou < neg_iou)
        if ignored_insts and negative.any():
            ign_arr = np.array([i.bbox.as_tuple() for i in ignored_insts])
            ign_max = iou_matrix(anchor_boxes, ign_arr).max(axis=1)
            negative &= ign_max < neg_iou

        n_positive += int(positive.sum())
        n_negative += int(negative.sum())
        n_ignored += n_per_image - int(positive.sum()) - int(negative.sum())

        for inst, count in zip(live, matched_counts):
            per_gt_counts.append(int(count))
            total_by_class[inst.category_id] += 1
            if count >= 1:
                recalled_by_class[inst.category_id] += 1
            else:
                unmatched.append(inst.id)

    n_gt = sum(total_by_class.values())
    zero_denom = n_gt == 0
    recall = 1.0 if zero_denom else sum(recalled_by_class.values()) / n_gt
    per_class_recall = {
        c: recalled_by_class[c] / total_by_class[c] for c in sorted(total_by_class)
    }
    n_images = max(1, len(groups))
    return MatchReport(
        pos_iou=pos_iou,
        neg_iou=neg_iou,
        force_match=force_match,
        n_anchors=n_per_image * n_images,
        n_positive=n_positive,
        n_negative=n_negative,
        n_ignored=n_ignored,
        n_gt=n_gt,
        recall=recall,
        per_class_recall=per_class_recall,
        matched_per_gt=dict(sorted(Counter(per_gt_counts).items())),
        unmatched_gt_ids=tuple(sorted(unmatched)),
        zero_gt_denominator=zero_denom,
    )

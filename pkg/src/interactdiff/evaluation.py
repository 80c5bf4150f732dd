"""Oracle detection, detection-score (mAP) protocol and kernel-MMD metric.

The detector inverts the renderer: nearest-palette classification per
pixel, connected components per entity colour, boxes from component
extents, and action labels from the scene module's relation predicates.
On ground-truth renders it recovers the interaction set exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .geometry import BoundingBox, iou
from .scenes import (
    BACKGROUND_COLOR,
    PALETTE,
    STRIPE_COLOR,
    VOCAB,
    classify_action_px,
    rare_triplet_classes,
)

# ---------------------------------------------------------------------------
# Detector
# ---------------------------------------------------------------------------

_ENTITY_LABELS = list(PALETTE)
_ALL_COLORS = np.array(
    [PALETTE[l] for l in _ENTITY_LABELS] + [STRIPE_COLOR, BACKGROUND_COLOR],
    dtype=np.float64,
) / 127.5 - 1.0  # same [-1, 1] space as rendered images


@dataclass
class DetectorConfig:
    color_tol: float = 0.55  # max RGB distance (in [-1,1] space) to count a pixel pure
    min_area: int = 4
    min_confidence: float = 0.35


@dataclass
class DetectedInteraction:
    s: int
    a: int
    o: int
    b_s: BoundingBox
    b_o: BoundingBox
    confidence: float


def _find_entities(image: np.ndarray, config: DetectorConfig):
    """Connected colour blobs -> (label_id, box, confidence) candidates."""
    _, h, w = image.shape
    pix = image.reshape(3, -1).T  # (HW, 3)
    d2 = ((pix[:, None, :] - _ALL_COLORS[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1).reshape(h, w)
    near_dist = np.sqrt(d2.min(axis=1)).reshape(h, w)
    entities = []
    for ci, label in enumerate(_ENTITY_LABELS):
        mask = nearest == ci
        if not mask.any():
            continue
        comp, n_comp = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
        for k in range(1, n_comp + 1):
            rows, cols = np.nonzero(comp == k)
            if rows.size < config.min_area:
                continue
            conf = float(np.mean(near_dist[rows, cols] <= config.color_tol))
            if conf < config.min_confidence:
                continue
            box_px = (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
            box = BoundingBox(box_px[0] / w, box_px[1] / h, box_px[2] / w, box_px[3] / h)
            entities.append((VOCAB.id_of[label], box_px, box, conf))
    return entities


def detect(image: np.ndarray, config: DetectorConfig | None = None) -> list[DetectedInteraction]:
    """Recover interaction instances from a rendered or generated image."""
    config = config or DetectorConfig()
    entities = _find_entities(image, config)
    subjects = [e for e in entities if e[0] in VOCAB.subject_ids]
    objects = [e for e in entities if e[0] in VOCAB.object_ids]
    out = []
    for s_id, s_px, s_box, s_conf in subjects:
        for o_id, o_px, o_box, o_conf in objects:
            action = classify_action_px(s_px, o_px)
            if action is None:
                continue
            out.append(
                DetectedInteraction(
                    s=s_id,
                    a=VOCAB.id_of[action],
                    o=o_id,
                    b_s=s_box,
                    b_o=o_box,
                    confidence=min(s_conf, o_conf),
                )
            )
    return out


# ---------------------------------------------------------------------------
# Detection score (mAP)
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    map_full: float
    map_rare: float
    per_class_ap: dict
    kid: float | None
    sample_count: int
    config_echo: dict = field(default_factory=dict)

    def to_json(self) -> str:
        obj = {
            "map_full": self.map_full,
            "map_rare": self.map_rare,
            "kid": self.kid,
            "sample_count": self.sample_count,
            "config": self.config_echo,
            "per_class_ap": {"/".join(map(str, k)): v for k, v in self.per_class_ap.items()},
        }
        return json.dumps(obj, sort_keys=True, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject", "action", "object", "ap"])
            for (s, a, o), ap in sorted(self.per_class_ap.items()):
                writer.writerow([VOCAB.token(s), VOCAB.token(a), VOCAB.token(o), f"{ap:.6f}"])


def _ap_from_matches(tp_flags: list[bool], n_gt: int) -> float:
    """All-points interpolated area under the precision-recall curve."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(np.array(tp_flags, dtype=np.float64)) if tp_flags else np.array([])
    if tp.size == 0:
        return 0.0
    fp = np.arange(1, tp.size + 1) - tp
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope, then area
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def detection_map(
    detections_per_image: list[list[DetectedInteraction]],
    ground_truth_per_image: list,
    iou_thresh: float = 0.5,
) -> EvalReport:
    """HOI-style AP: a detection matches an unmatched ground truth with the
    same triplet class when both subject and object IoU clear the threshold.

    ground_truth_per_image holds lists of InteractionInstance.
    """
    if len(detections_per_image) != len(ground_truth_per_image):
        raise ContractError(
            f"got {len(detections_per_image)} detection lists vs "
            f"{len(ground_truth_per_image)} ground-truth lists"
        )
    gt_count: dict = {}
    per_class_dets: dict = {}
    for img_idx, gts in enumerate(ground_truth_per_image):
        for gt in gts:
            gt_count[(gt.s, gt.a, gt.o)] = gt_count.get((gt.s, gt.a, gt.o), 0) + 1
    for img_idx, dets in enumerate(detections_per_image):
        for det in dets:
            key = (det.s, det.a, det.o)
            per_class_dets.setdefault(key, []).append((img_idx, det))
    per_class_ap = {}
    for cls in sorted(gt_count):
        dets = per_class_dets.get(cls, [])
        # confidence-ordered, deterministic tie-break by class id then boxes
        dets.sort(
            key=lambda item: (
                -item[1].confidence,
                item[0],
                tuple(item[1].b_s.as_list()),
                tuple(item[1].b_o.as_list()),
            )
        )
        matched: set = set()
        tp_flags = []
        for img_idx, det in dets:
            best = None
            best_iou = iou_thresh
            for gi, gt in enumerate(ground_truth_per_image[img_idx]):
                if (gt.s, gt.a, gt.o) != cls or (img_idx, gi) in matched:
                    continue
                pair_iou = min(iou(det.b_s, gt.b_s), iou(det.b_o, gt.b_o))
                if pair_iou >= best_iou:
                    best_iou = pair_iou
                    best = gi
            if best is not None:
                matched.add((img_idx, best))
                tp_flags.append(True)
            else:
                tp_flags.append(False)
        per_class_ap[cls] = _ap_from_matches(tp_flags, gt_count[cls])
    rare = rare_triplet_classes()
    present = list(per_class_ap)
    rare_present = [c for c in present if c in rare]
    map_full = float(np.mean([per_class_ap[c] for c in present])) if present else 0.0
    map_rare = float(np.mean([per_class_ap[c] for c in rare_present])) if rare_present else 0.0
    return EvalReport(
        map_full=map_full,
        map_rare=map_rare,
        per_class_ap=per_class_ap,
        kid=None,
        sample_count=len(detections_per_image),
    )


# ---------------------------------------------------------------------------
# Kernel-MMD image metric
# ---------------------------------------------------------------------------


def image_features(image: np.ndarray, detections=None, config: DetectorConfig | None = None) -> np.ndarray:
    """Handcrafted feature vector: per-palette pixel fractions plus mean
    detected-entity box statistics (cx, cy, w, h)."""
    _, h, w = image.shape
    pix = image.reshape(3, -1).T
    d2 = ((pix[:, None, :] - _ALL_COLORS[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    fracs = np.bincount(nearest, minlength=_ALL_COLORS.shape[0]) / pix.shape[0]
    if detections is None:
        detections = detect(image, config)
    boxes = [d.b_s for d in detections] + [d.b_o for d in detections]
    if boxes:
        stats = np.array(
            [
                np.mean([(b.x_min + b.x_max) / 2 for b in boxes]),
                np.mean([(b.y_min + b.y_max) / 2 for b in boxes]),
                np.mean([b.width for b in boxes]),
                np.mean([b.height for b in boxes]),
            ]
        )
    else:
        stats = np.zeros(4)
    return np.concatenate([fracs, stats])


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """k(x, y) = (x.y / d + 1)^3 over rows of x and y."""
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared-MMD U-statistic with the polynomial kernel.

    For equal sample sizes the cross term also excludes paired indices,
    so mmd2_unbiased(X, X) == 0 exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ContractError("need at least 2 samples per side")
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        sum_xy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        sum_xy = kxy.sum() / (m * n)
    return float(sum_xx + sum_yy - 2.0 * sum_xy)


def kid_analog(
    features_real: np.ndarray,
    features_gen: np.ndarray,
    subset_size: int = 50,
    n_subsets: int = 10,
    seed: int = 0,
) -> tuple[float, float]:
    """Subset-averaged unbiased MMD^2; returns (estimate, stderr).

    One index draw per round is shared by both sides when the sample counts
    match, so identical feature sets score exactly zero.
    """
    x = np.asarray(features_real, dtype=np.float64)
    y = np.asarray(features_gen, dtype=np.float64)
    if x.shape[0] < 100 or y.shape[0] < 100:
        raise ContractError("kid_analog needs at least 100 samples per side")
    rng = np.random.default_rng(seed)
    estimates = []
    for _ in range(n_subsets):
        if x.shape[0] == y.shape[0]:
            idx = rng.permutation(x.shape[0])[:subset_size]
            jdx = idx
        else:
            idx = rng.permutation(x.shape[0])[:subset_size]
            jdx = rng.permutation(y.shape[0])[:subset_size]
        estimates.append(mmd2_unbiased(x[idx], y[jdx]))
    estimates = np.array(estimates)
    stderr = float(estimates.std(ddof=1) / np.sqrt(n_subsets)) if n_subsets > 1 else 0.0
    return float(estimates.mean()), stderr

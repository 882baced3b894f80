"""Dense 3D detection head, target assignment, losses, decoding and mAP."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .geometry import GridSpec, voxel_centers
from .volume import flat_to_grid, grid_to_flat

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
REG_SCALE = 0.5
_LOG_CLAMP = 4.0


@dataclass
class Box3D:
    """Axis-aligned box; ``score`` is only meaningful for predictions."""

    center: np.ndarray
    size: np.ndarray
    label: int = 0
    score: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not np.all(self.size > 0):
            raise ValueError(f"box size must be positive, got {self.size}")

    @property
    def min(self) -> np.ndarray:
        return self.center - self.size / 2

    @property
    def max(self) -> np.ndarray:
        return self.center + self.size / 2

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    @classmethod
    def from_corners(cls, lo, hi, label: int = 0, score: float = 1.0) -> "Box3D":
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        return cls((lo + hi) / 2, hi - lo, label, score)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "size": self.size.tolist(),
                "label": int(self.label), "score": float(self.score)}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(d["center"], d["size"], int(d["label"]), float(d.get("score", 1.0)))


def boxes_to_json(boxes: Sequence[Box3D]) -> str:
    return json.dumps([b.to_dict() for b in boxes], indent=1)


def boxes_from_json(text: str) -> List[Box3D]:
    return [Box3D.from_dict(d) for d in json.loads(text)]


def iou3d(a: Box3D, b: Box3D) -> float:
    overlap = np.clip(np.minimum(a.max, b.max) - np.maximum(a.min, b.min), 0, None)
    inter = float(np.prod(overlap))
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(lo_a, hi_a, lo_b, hi_b) -> np.ndarray:
    """Pairwise IoU between two sets of corner-encoded boxes."""
    lo = np.maximum(lo_a[:, None], lo_b[None])
    hi = np.minimum(hi_a[:, None], hi_b[None])
    inter = np.prod(np.clip(hi - lo, 0, None), axis=-1)
    va = np.prod(hi_a - lo_a, axis=-1)
    vb = np.prod(hi_b - lo_b, axis=-1)
    return inter / (va[:, None] + vb[None] - inter)


@dataclass
class HeadOutput:
    cls_logits: torch.Tensor          # (nx, ny, nz, K)
    box_deltas: torch.Tensor          # (nx, ny, nz, 6) metres to the (-x, +x, -y, +y, -z, +z) faces
    centerness_logits: torch.Tensor   # (nx, ny, nz)


class DetectionHead(nn.Module):
    """Optional shared 3D conv neck followed by three parallel conv branches.

    Args:
        in_channels: feature channels of the input volume.
        n_classes: number of object classes.
        neck_layers: stride-1 3x3x3 conv+ReLU layers shared by the branches.
        neck_channels: width of the neck.
    """

    def __init__(self, in_channels: int, n_classes: int, neck_layers: int = 0,
                 neck_channels: int = 32):
        super().__init__()
        layers, c = [], in_channels
        for _ in range(neck_layers):
            layers += [nn.Conv3d(c, neck_channels, 3, padding=1), nn.ReLU()]
            c = neck_channels
        self.neck = nn.Sequential(*layers)
        self.cls = nn.Conv3d(c, n_classes, 3, padding=1)
        self.reg = nn.Conv3d(c, 6, 3, padding=1)
        self.centerness = nn.Conv3d(c, 1, 3, padding=1)
        self.n_classes = n_classes

    def init_prior(self, prior: float = 0.01) -> None:
        """Bias the classifier towards background, as usual with focal loss."""
        with torch.no_grad():
            self.cls.bias.fill_(-math.log((1 - prior) / prior))

    def forward(self, features: torch.Tensor) -> HeadOutput:
        x = self.neck(features.permute(3, 0, 1, 2).unsqueeze(0))
        # the three branches run as one convolution (single im2col pass on CPU)
        weight = torch.cat([self.cls.weight, self.reg.weight, self.centerness.weight])
        bias = torch.cat([self.cls.bias, self.reg.bias, self.centerness.bias])
        y = F.conv3d(x, weight, bias, padding=1)[0].permute(1, 2, 3, 0)
        k = self.n_classes
        cls, raw, cntr = y[..., :k], y[..., k:k + 6], y[..., k + 6]
        deltas = REG_SCALE * torch.exp(raw.clamp(-_LOG_CLAMP, _LOG_CLAMP))
        return HeadOutput(cls, deltas, cntr)


def head_forward(features: torch.Tensor, head: DetectionHead) -> HeadOutput:
    return head(features)


@dataclass
class Targets:
    labels: torch.Tensor      # (nx, ny, nz) int64, -1 for background
    offsets: torch.Tensor     # (nx, ny, nz, 6)
    centerness: torch.Tensor  # (nx, ny, nz)

    @property
    def positive(self) -> torch.Tensor:
        return self.labels >= 0


def assign_targets(grid: GridSpec, gt_boxes: Sequence[Box3D]) -> Targets:
    """Inside-box assignment; a voxel inside several boxes takes the smallest.

    Centerness is the geometric mean over axes of ``min(d-, d+) / max(d-, d+)``
    where ``d-``/``d+`` are the distances to the two faces on that axis.
    """
    centers = voxel_centers(grid)
    n = len(centers)
    labels = np.full(n, -1, dtype=np.int64)
    offsets = np.zeros((n, 6))
    cntr = np.zeros(n)
    best_volume = np.full(n, np.inf)
    for box in gt_boxes:
        if not np.all(box.size > 0):
            raise ValueError("degenerate ground-truth box")
        d_lo = centers - box.min
        d_hi = box.max - centers
        inside = np.all((d_lo >= 0) & (d_hi >= 0), axis=1)
        take = inside & (box.volume < best_volume)
        if not take.any():
            continue
        best_volume[take] = box.volume
        labels[take] = box.label
        off = np.stack([d_lo[:, 0], d_hi[:, 0], d_lo[:, 1], d_hi[:, 1], d_lo[:, 2], d_hi[:, 2]], 1)
        offsets[take] = off[take]
        lo = np.minimum(d_lo, d_hi)
        hi = np.maximum(d_lo, d_hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(hi > 0, lo / hi, 1.0)
        cntr[take] = np.cbrt(np.prod(ratio, axis=1))[take]
    to = lambda x: flat_to_grid(torch.from_numpy(x), grid)
    return Targets(to(labels), to(offsets), to(cntr))


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float = FOCAL_ALPHA,
               gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Element-wise sigmoid focal loss for binary ``targets``."""
    targets = targets.to(logits.dtype)
    p = torch.sigmoid(logits)
    p_t = p * targets + (1 - p) * (1 - targets)
    log_p_t = targets * F.logsigmoid(logits) + (1 - targets) * F.logsigmoid(-logits)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return -alpha_t * (1 - p_t) ** gamma * log_p_t


def face_iou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """IoU of boxes sharing an anchor point, given six face distances each."""
    inter = torch.ones_like(pred[..., 0])
    vol_p = torch.ones_like(inter)
    vol_t = torch.ones_like(inter)
    for a in range(3):
        lo, hi = 2 * a, 2 * a + 1
        inter = inter * (torch.minimum(pred[..., lo], target[..., lo])
                         + torch.minimum(pred[..., hi], target[..., hi]))
        vol_p = vol_p * (pred[..., lo] + pred[..., hi])
        vol_t = vol_t * (target[..., lo] + target[..., hi])
    return inter / (vol_p + vol_t - inter)


def detection_losses(out: HeadOutput, targets: Targets, alpha: float = FOCAL_ALPHA,
                     gamma: float = FOCAL_GAMMA):
    """Return ``(L_cls, L_cntr, L_loc)``.

    ``L_cls`` sums the focal loss over all voxels and classes and divides by
    the positive count (at least one). ``L_cntr`` is the binary cross-entropy
    minus the target entropy (zero at the optimum, same gradient) averaged
    over positives, and ``L_loc`` is the mean ``1 - IoU`` over positives.
    """
    pos = targets.positive
    n_pos = int(pos.sum())
    k = out.cls_logits.shape[-1]
    onehot = F.one_hot(targets.labels.clamp(min=0), k).to(out.cls_logits.dtype)
    onehot = onehot * pos.unsqueeze(-1).to(onehot.dtype)
    l_cls = focal_loss(out.cls_logits, onehot, alpha, gamma).sum() / max(n_pos, 1)
    if n_pos == 0:
        zero = out.centerness_logits.sum() * 0.0 + out.box_deltas.sum() * 0.0
        return l_cls, zero, zero
    logit = out.centerness_logits[pos]
    t = targets.centerness[pos].to(logit.dtype)
    bce = F.binary_cross_entropy_with_logits(logit, t, reduction="none")
    entropy = -(torch.xlogy(t, t) + torch.xlogy(1 - t, 1 - t))
    l_cntr = (bce - entropy).mean()
    iou = face_iou(out.box_deltas[pos], targets.offsets[pos].to(out.box_deltas.dtype))
    l_loc = (1 - iou).mean()
    return l_cls, l_cntr, l_loc


def nms(lo: np.ndarray, hi: np.ndarray, scores: np.ndarray, iou_thresh: float) -> List[int]:
    """Greedy NMS; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep: List[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        ious = iou_matrix(lo[idx:idx + 1], hi[idx:idx + 1], lo, hi)[0]
        suppressed |= ious >= iou_thresh
    return keep


def decode_and_nms(out: HeadOutput, grid: GridSpec, score_thresh: float = 0.05,
                   iou_thresh: float = 0.25, max_candidates: int = 500) -> List[Box3D]:
    """Decode voxel predictions into boxes and run per-class greedy NMS.

    Scores are ``sigmoid(cls) * sigmoid(centerness)``.
    """
    with torch.no_grad():
        scores = (torch.sigmoid(grid_to_flat(out.cls_logits))
                  * torch.sigmoid(grid_to_flat(out.centerness_logits)).unsqueeze(-1))
        deltas = grid_to_flat(out.box_deltas).double().numpy()
    scores = scores.double().numpy()
    centers = voxel_centers(grid)
    lo = centers - deltas[:, [0, 2, 4]]
    hi = centers + deltas[:, [1, 3, 5]]
    boxes: List[Box3D] = []
    for c in range(scores.shape[1]):
        s = scores[:, c]
        cand = np.nonzero(s > score_thresh)[0]
        if cand.size == 0:
            continue
        if cand.size > max_candidates:
            cand = cand[np.argsort(-s[cand], kind="stable")[:max_candidates]]
        for i in nms(lo[cand], hi[cand], s[cand], iou_thresh):
            j = cand[i]
            boxes.append(Box3D.from_corners(lo[j], hi[j], c, float(s[j])))
    return boxes


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def eval_map(preds: Sequence[Sequence[Box3D]], gts: Sequence[Sequence[Box3D]],
             iou_thresholds=(0.25, 0.5)) -> Dict[float, float]:
    """Mean AP over classes present in the ground truth, per IoU threshold.

    Predictions of a class are ranked by score across all scenes and greedily
    matched to the best-overlapping unmatched ground truth of the same scene.
    """
    if len(preds) != len(gts):
        raise ValueError("preds and gts must cover the same scenes")
    classes = sorted({b.label for scene in gts for b in scene})
    result: Dict[float, float] = {}
    for thr in iou_thresholds:
        aps = []
        for c in classes:
            gt_c = [[b for b in scene if b.label == c] for scene in gts]
            n_gt = sum(len(g) for g in gt_c)
            dets = [(b.score, s, b) for s, scene in enumerate(preds) for b in scene if b.label == c]
            dets.sort(key=lambda x: -x[0])
            matched = [np.zeros(len(g), dtype=bool) for g in gt_c]
            tp = np.zeros(len(dets))
            for i, (_, s, box) in enumerate(dets):
                best, best_iou = -1, thr
                for j, g in enumerate(gt_c[s]):
                    if matched[s][j]:
                        continue
                    iou = iou3d(box, g)
                    if iou >= best_iou:
                        best, best_iou = j, iou
                if best >= 0:
                    matched[s][best] = True
                    tp[i] = 1
            if len(dets) == 0:
                aps.append(0.0)
                continue
            ctp = np.cumsum(tp)
            recall = ctp / n_gt
            precision = ctp / np.arange(1, len(dets) + 1)
            aps.append(average_precision(recall, precision))
        result[thr] = float(np.mean(aps)) if aps else 0.0
    return result

"""Landmark-retraced detection head: single-anchor grid, target assignment,
score retracing, loss, decoding, and cross-scale NMS.

Every stride-8 map cell carries exactly one square anchor of side 64*sqrt(2)
centered on the cell. The regression head predicts, per cell, offsets of
five landmarks from their template positions in anchor-side units. Scoring
"retraces" those predictions: each predicted landmark location is looked up
in the matching per-landmark score map, and the face confidence is fused
from the anchor score and the five retraced landmark scores (max fusion by
default, mean behind a config switch). The background hypothesis is never
touched by retracing.

The spatial lookup rounds to the nearest cell and clamps to map bounds, and
is treated as non-differentiable in the offsets: gradients reach the
landmark maps at the looked-up cells, while offsets are trained only by the
smooth-L1 term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateBatchError, ShapeError
from .tensor import Tensor

ANCHOR_SIDE = 64.0 * math.sqrt(2.0)
ANCHOR_STRIDE = 8

# Face-relative landmark layout used when no dataset average is available:
# two eyes, nose tip, two mouth corners, as fractions of the face side
# measured from the face center.
DEFAULT_TEMPLATE = np.array(
    [
        [-0.20, -0.15],
        [0.20, -0.15],
        [0.00, 0.08],
        [-0.15, 0.28],
        [0.15, 0.28],
    ],
    dtype=np.float32,
)


@dataclass(frozen=True)
class AnchorGrid:
    stride: int = ANCHOR_STRIDE
    side: float = ANCHOR_SIDE

    def centers(self, h: int, w: int) -> np.ndarray:
        """(H,W,2) anchor centers in map-frame pixels, (x,y) order."""
        ys = (np.arange(h) + 0.5) * self.stride
        xs = (np.arange(w) + 0.5) * self.stride
        cx, cy = np.meshgrid(xs, ys)
        return np.stack([cx, cy], axis=-1).astype(np.float32)

    def boxes(self, h: int, w: int) -> np.ndarray:
        """(H,W,4) anchor boxes as (x, y, w, h)."""
        c = self.centers(h, w)
        out = np.empty((h, w, 4), dtype=np.float32)
        out[..., 0] = c[..., 0] - self.side / 2
        out[..., 1] = c[..., 1] - self.side / 2
        out[..., 2] = self.side
        out[..., 3] = self.side
        return out

    def template_absolute(self, template: np.ndarray, h: int, w: int) -> np.ndarray:
        """(H,W,5,2) template landmark positions in pixels."""
        return self.centers(h, w)[:, :, None, :] + template[None, None] * self.side


def landmark_template_from_faces(faces) -> np.ndarray:
    """Average landmark offsets over faces, as fractions of the face side.

    faces: iterable of (box (x,y,w,h), landmarks (5,2)); anchors sit at the
    geometric center of the positive size band, so face-side fractions
    double as anchor-side fractions.
    """
    acc = np.zeros((5, 2), dtype=np.float64)
    n = 0
    for box, lms in faces:
        x, y, w, h = box
        side = max(w, h)
        center = np.array([x + w / 2.0, y + h / 2.0])
        acc += (np.asarray(lms) - center) / side
        n += 1
    if n == 0:
        return DEFAULT_TEMPLATE.copy()
    return (acc / n).astype(np.float32)


# -- IoU / target assignment -------------------------------------------------


def iou_xywh(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def assign_targets(
    grid: AnchorGrid,
    map_shape: tuple[int, int],
    gt_faces,
    template: np.ndarray,
    pos_iou: float = 0.5,
    neg_iou: float = 0.3,
):
    """Label each anchor and compute landmark offset targets.

    Returns (labels (H,W) in {1: face, 0: background, -1: ignore},
    offsets (H,W,5,2) valid at positive cells, matched face index (H,W)).
    """
    h, w = map_shape
    boxes = grid.boxes(h, w).reshape(-1, 4)
    labels = np.zeros(h * w, dtype=np.int8)
    matched = np.full(h * w, -1, dtype=np.int32)
    tstar = np.zeros((h * w, 5, 2), dtype=np.float32)
    gt_faces = list(gt_faces)
    if gt_faces:
        best = np.zeros(h * w, dtype=np.float64)
        for fi, (box, _) in enumerate(gt_faces):
            if box[2] <= 0 or box[3] <= 0:
                raise ShapeError(f"degenerate ground-truth box {box}")
            bx, by, bw, bh = box
            ix = np.clip(np.minimum(boxes[:, 0] + boxes[:, 2], bx + bw) - np.maximum(boxes[:, 0], bx), 0, None)
            iy = np.clip(np.minimum(boxes[:, 1] + boxes[:, 3], by + bh) - np.maximum(boxes[:, 1], by), 0, None)
            inter = ix * iy
            union = boxes[:, 2] * boxes[:, 3] + bw * bh - inter
            iovu = np.where(union > 0, inter / union, 0.0)
            upd = iovu > best
            best = np.where(upd, iovu, best)
            matched = np.where(upd, fi, matched)
        labels = np.where(best >= pos_iou, 1, np.where(best < neg_iou, 0, -1)).astype(np.int8)
        tabs = grid.template_absolute(template, h, w).reshape(-1, 5, 2)
        for i in np.flatnonzero(labels == 1):
            _, lms = gt_faces[matched[i]]
            tstar[i] = (np.asarray(lms, dtype=np.float32) - tabs[i]) / grid.side
    return labels.reshape(h, w), tstar.reshape(h, w, 5, 2), matched.reshape(h, w)


# -- score retracing ----------------------------------------------------------


@dataclass
class RetraceResult:
    """Per-cell scores after retracing. Tensors keep the graph alive so the
    same structure serves both the loss and (under no_grad) inference."""

    p_bg: Tensor  # (H*W,) background branch, returned untouched
    p_face_raw: Tensor  # (H*W,) anchor face score before fusion
    p_face: Tensor  # (H*W,) fused face score
    p_land: list  # five Tensors (H*W,) of retraced landmark scores
    cells: np.ndarray  # (5,H*W) flat cells each landmark retraced to
    shape: tuple[int, int]


def retrace_cells(reg_data: np.ndarray, template: np.ndarray, grid: AnchorGrid) -> np.ndarray:
    """Offsets (10,H,W) -> flat map cell per landmark, rounded and clamped."""
    _, h, w = reg_data.shape
    tabs = grid.template_absolute(template, h, w)  # (H,W,5,2)
    off = reg_data.reshape(5, 2, h, w).transpose(2, 3, 0, 1)  # (H,W,5,2)
    pts = tabs + off * grid.side
    cx = np.clip(np.round(pts[..., 0] / grid.stride - 0.5), 0, w - 1).astype(np.int64)
    cy = np.clip(np.round(pts[..., 1] / grid.stride - 0.5), 0, h - 1).astype(np.int64)
    return (cy * w + cx).transpose(2, 0, 1).reshape(5, h * w)


def retrace_scores(
    cls: Tensor,
    reg: Tensor,
    landmark_maps: Tensor,
    template: np.ndarray,
    grid: AnchorGrid | None = None,
    fusion: str = "max",
) -> RetraceResult:
    """Fuse anchor scores with retraced landmark scores.

    cls (2,H,W) softmax scores, reg (10,H,W) offsets, landmark_maps (5,H,W).
    The lookup location comes from reg's values only (no gradient through
    the rounding); landmark map values at those cells join the fusion.
    """
    grid = grid or AnchorGrid()
    if cls.shape[-2:] != reg.shape[-2:] or cls.shape[-2:] != landmark_maps.shape[-2:]:
        raise ShapeError(
            f"map extents differ: cls {cls.shape}, reg {reg.shape}, landmarks {landmark_maps.shape}"
        )
    h, w = cls.shape[-2:]
    n = h * w
    cells = retrace_cells(reg.data, template, grid)
    p_bg = T.reshape(cls, (2, n))
    p_bg_flat = T.take_flat(p_bg, np.arange(n))
    p_face_raw = T.take_flat(p_bg, n + np.arange(n))
    p_land = [T.take_flat(landmark_maps, j * n + cells[j]) for j in range(5)]
    if fusion == "max":
        fused = p_face_raw
        for pl in p_land:
            fused = T.maximum(fused, pl)
    elif fusion == "mean":
        total = p_face_raw
        for pl in p_land:
            total = total + pl
        fused = total * (1.0 / 6.0)
    else:
        raise ValueError(f"unknown fusion rule {fusion!r}")
    return RetraceResult(p_bg_flat, p_face_raw, fused, p_land, cells, (h, w))


# -- loss ---------------------------------------------------------------------


def lrn_loss(
    retrace: RetraceResult,
    reg: Tensor,
    labels: np.ndarray,
    tstar: np.ndarray,
    rng: np.random.Generator,
    aux_weight: float = 1.0,
    max_unpaired_negatives: int = 8,
) -> Tensor:
    """Classification on retraced scores + smooth-L1 on offsets at positives.

    Negatives are sampled 1:1 against positives (after ignore removal). The
    aux term supervises the landmark maps directly at the retraced cells
    (positives toward 1, sampled negatives toward 0), which is what lets
    retraced scoring suppress landmark-free false positives.
    """
    h, w = retrace.shape
    flat = labels.reshape(-1)
    pos = np.flatnonzero(flat == 1)
    negpool = np.flatnonzero(flat == 0)
    if pos.size == 0 and negpool.size == 0:
        raise DegenerateBatchError("no positive and no negative anchors to sample")
    n_neg = pos.size if pos.size else min(max_unpaired_negatives, negpool.size)
    if negpool.size and n_neg:
        neg = np.sort(rng.choice(negpool, size=min(n_neg, negpool.size), replace=False))
    else:
        neg = np.empty(0, dtype=np.int64)

    eps = 1e-7
    terms = []
    if pos.size:
        p_face = T.clamp(T.take_flat(T.reshape(retrace.p_face, (h * w,)), pos), eps, 1.0)
        terms.append(-T.tsum(T.tlog(p_face)))
        toff = T.reshape(reg, (10, h * w))
        tgt = tstar.reshape(h * w, 10)[pos].T  # (10,npos) to match gather layout
        idx = (np.arange(10)[:, None] * (h * w) + pos[None, :]).reshape(-1)
        diff = T.take_flat(toff, idx) - Tensor(tgt.reshape(-1).astype(reg.data.dtype))
        terms.append(T.tsum(T.smooth_l1(diff)))
    if neg.size:
        p_bg = T.clamp(T.take_flat(T.reshape(retrace.p_bg, (h * w,)), neg), eps, 1.0)
        terms.append(-T.tsum(T.tlog(p_bg)))
    if aux_weight > 0:
        for pl in retrace.p_land:
            if pos.size:
                v = T.clamp(T.take_flat(pl, pos), eps, 1.0 - eps)
                terms.append(-T.tsum(T.tlog(v)) * (aux_weight / 5.0))
            if neg.size:
                v = T.clamp(T.take_flat(pl, neg), eps, 1.0 - eps)
                terms.append(-T.tsum(T.tlog(1.0 - v)) * (aux_weight / 5.0))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# -- decoding / NMS -----------------------------------------------------------


@dataclass
class Detection:
    score: float
    box: tuple[float, float, float, float]  # (x, y, w, h)
    landmarks: np.ndarray  # (5,2)
    level: int
    fallback: bool = False

    def scaled(self, factor: float) -> "Detection":
        x, y, w, h = self.box
        return Detection(
            self.score,
            (x * factor, y * factor, w * factor, h * factor),
            self.landmarks * factor,
            self.level,
            self.fallback,
        )


def similarity_fit(src: np.ndarray, dst: np.ndarray):
    """Least-squares scale+rotation+translation aligning src to dst points.

    Returns (scale, R (2,2), t (2,)) with dst ~= scale * R @ src + t,
    or None when the fit is degenerate.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    sc, dc = src - ms, dst - md
    var_src = (sc**2).sum() / len(src)
    if var_src < 1e-12:
        return None
    cov = dc.T @ sc / len(src)
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[1, 1] = -1.0
    rot = u @ s @ vt
    scale = float(np.trace(np.diag(d) @ s) / var_src)
    if not np.isfinite(scale) or scale <= 1e-9:
        return None
    t = md - scale * rot @ ms
    return scale, rot, t


def decode_detections(
    face_scores: np.ndarray,
    reg_data: np.ndarray,
    template: np.ndarray,
    threshold: float,
    level: int,
    grid: AnchorGrid | None = None,
) -> list[Detection]:
    """Cells scoring >= threshold become detections.

    Landmarks decode as template + offsets * anchor side; the box is the
    anchor square pushed through the similarity transform that aligns the
    template to the predicted landmarks (center moves with the transform,
    side scales with it; the output box stays axis-aligned). A degenerate
    fit falls back to the anchor box and flags the detection.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    grid = grid or AnchorGrid()
    h, w = face_scores.shape
    cells = np.flatnonzero(face_scores.reshape(-1) >= threshold)
    if cells.size == 0:
        return []
    tabs = grid.template_absolute(template, h, w).reshape(-1, 5, 2)
    centers = grid.centers(h, w).reshape(-1, 2)
    off = reg_data.reshape(5, 2, h * w)
    dets = []
    for i in cells:
        lms = tabs[i] + off[:, :, i] * grid.side
        fit = similarity_fit(tabs[i], lms)
        if fit is None:
            cx, cy = centers[i]
            side = grid.side
            dets.append(
                Detection(float(face_scores.reshape(-1)[i]), (cx - side / 2, cy - side / 2, side, side),
                          lms.astype(np.float32), level, fallback=True)
            )
            continue
        scale, rot, t = fit
        cx, cy = scale * rot @ centers[i] + t
        side = scale * grid.side
        dets.append(
            Detection(
                float(face_scores.reshape(-1)[i]),
                (float(cx - side / 2), float(cy - side / 2), float(side), float(side)),
                lms.astype(np.float32),
                level,
            )
        )
    return dets


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy descending-score suppression by IoU."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"IoU threshold must lie in (0,1), got {iou_threshold}")
    rest = sorted(dets, key=lambda d: -d.score)
    keep: list[Detection] = []
    for d in rest:
        if all(iou_xywh(d.box, k.box) <= iou_threshold for k in keep):
            keep.append(d)
    return keep

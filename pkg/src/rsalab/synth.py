"""Procedural synthetic scenes with face-like patterns.

A "face" is a bright head disc with five distinct landmark blobs (eyes dark
in the blue channel, a nose bump in green, mouth corners in red) placed at
template-consistent positions, so each landmark is locally distinguishable
and every blob center coincides exactly with its annotation coordinate.
Backgrounds are smooth low-frequency noise; hard negatives are head discs
without landmark structure, injected at a configurable rate. Everything is
deterministic under the scene seed; dataset-level seeds derive from the
master seed by counter.

Face sizes are tracked in a 2048-longer-side frame: the annotation's bin
index is computed from the face side scaled by 2048/max(canvas dims).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .lrn import DEFAULT_TEMPLATE, iou_xywh
from .scale_forecast import CONTEXT_DIM, scale_to_bin

_PLACEMENT_RETRIES = 60


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int] = (320, 320)
    face_count: tuple[int, int] = (1, 3)
    bin_range: tuple[int, int] = (20, 50)  # size bins in the 2048 frame
    noise: float = 0.08
    hard_negative_rate: float = 0.5
    seed: int = 0

    def face_size_px(self, b: float) -> float:
        """Bin position -> face side in canvas pixels."""
        return 2.0 ** (b / 10.0 + 5.0) * max(self.canvas) / CONTEXT_DIM


@dataclass
class Annotation:
    box: tuple[float, float, float, float]
    landmarks: np.ndarray  # (5,2) absolute pixels
    bin: int

    def to_json(self) -> dict:
        return {
            "box": [float(v) for v in self.box],
            "landmarks": [[float(x), float(y)] for x, y in self.landmarks],
        }


def _blob(img, cx, cy, sigma, amps):
    """Add a Gaussian bump centered exactly at (cx, cy); amps is per-channel."""
    _, h, w = img.shape
    r = max(1, int(3 * sigma))
    x0, x1 = max(0, int(cx - r)), min(w, int(cx + r + 2))
    y0, y1 = max(0, int(cy - r)), min(h, int(cy + r + 2))
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    g = np.exp(-((ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2) / (2 * sigma**2))
    for c, a in enumerate(amps):
        img[c, y0:y1, x0:x1] += a * g


def _head(img, cx, cy, radius, amp=0.55):
    _, h, w = img.shape
    x0, x1 = max(0, int(cx - radius - 2)), min(w, int(cx + radius + 3))
    y0, y1 = max(0, int(cy - radius - 2)), min(h, int(cy + radius + 3))
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    d = np.sqrt((ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2)
    edge = np.clip((radius - d) / max(radius * 0.15, 1.0), 0.0, 1.0)
    img[:, y0:y1, x0:x1] += amp * edge


def _render_face(img, box, landmarks):
    x, y, w, h = box
    cx, cy = x + w / 2, y + h / 2
    _head(img, cx, cy, 0.52 * w)
    s = w
    sig = max(0.035 * s, 0.9)
    amps = [
        (-0.05, -0.05, -0.45),  # left eye: dark in blue
        (-0.05, -0.05, -0.45),  # right eye
        (0.0, 0.5, -0.1),  # nose: green bump
        (0.5, -0.1, 0.0),  # left mouth corner: red bump
        (0.5, -0.1, 0.0),  # right mouth corner
    ]
    for (lx, ly), a in zip(landmarks, amps):
        _blob(img, lx, ly, sig, a)


def _render_hard_negative(img, box, rng):
    x, y, w, h = box
    _head(img, x + w / 2, y + h / 2, 0.52 * w, amp=0.55)
    # a couple of off-template speckles so it is not a pure disc
    for _ in range(2):
        _blob(
            img,
            x + rng.uniform(0.2, 0.8) * w,
            y + rng.uniform(0.2, 0.8) * h,
            max(0.02 * w, 0.8),
            (rng.uniform(-0.2, 0.2),) * 3,
        )


def _background(shape, rng, noise):
    c, h, w = shape
    img = np.full(shape, 0.25, dtype=np.float32)
    yy = np.linspace(0, 1, h)[:, None]
    xx = np.linspace(0, 1, w)[None, :]
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        wave = np.cos(2 * np.pi * fy * yy + ph[0]) * np.cos(2 * np.pi * fx * xx + ph[1])
        img += (noise * rng.uniform(0.3, 1.0)) * wave.astype(np.float32)
    img += (noise * 0.4) * rng.standard_normal((c, h, w)).astype(np.float32)
    return img


def generate_scene(spec: SceneSpec):
    """Render one scene: (image (3,H,W) float32 in [0,1], annotations)."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.canvas
    img = _background((3, h, w), rng, spec.noise)
    n_faces = int(rng.integers(spec.face_count[0], spec.face_count[1] + 1))
    placed_boxes: list[tuple[float, float, float, float]] = []
    annotations: list[Annotation] = []

    def try_place(side):
        for _ in range(_PLACEMENT_RETRIES):
            x = rng.uniform(1, w - side - 1)
            y = rng.uniform(1, h - side - 1)
            cand = (x, y, side, side)
            if all(iou_xywh(cand, b) < 0.1 for b in placed_boxes):
                return cand
        return None

    for _ in range(n_faces):
        b = rng.uniform(spec.bin_range[0], spec.bin_range[1])
        side = spec.face_size_px(b)
        if side > min(h, w) - 4:
            side = min(h, w) - 4
        if side < 6:
            side = 6.0
        box = try_place(side)
        if box is None:
            raise DataError(f"could not place a face of side {side:.0f} in canvas {spec.canvas}")
        x, y, s, _ = box
        lms = np.array([x + s / 2, y + s / 2], dtype=np.float32) + DEFAULT_TEMPLATE * s
        _render_face(img, box, lms)
        placed_boxes.append(box)
        norm_side = s * CONTEXT_DIM / max(h, w)
        annotations.append(Annotation(box, lms, scale_to_bin(norm_side)))

    n_hard = int(rng.random() < spec.hard_negative_rate) + int(rng.random() < spec.hard_negative_rate / 2)
    for _ in range(n_hard):
        side = spec.face_size_px(rng.uniform(spec.bin_range[0], spec.bin_range[1]))
        side = min(side, min(h, w) - 4)
        box = try_place(max(side, 6.0))
        if box is not None:
            _render_hard_negative(img, box, rng)
            placed_boxes.append(box)

    return np.clip(img, 0.0, 1.0), annotations


# -- dataset serialization -----------------------------------------------------


def child_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def save_image(path: Path, img: np.ndarray):
    arr = np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_dataset(root, records, splits: dict, master_seed: int):
    """records: list of (relpath, image, annotations). Writes PNGs, an
    annotations JSON Lines file, and a manifest with split membership."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)
    with open(root / "annotations.jsonl", "w") as f:
        for rel, img, anns in records:
            save_image(root / "images" / rel, img)
            rec = {"image": f"images/{rel}", "faces": [a.to_json() for a in anns]}
            f.write(json.dumps(rec) + "\n")
    manifest = {"master_seed": master_seed, "splits": splits}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(root):
    """-> (records: list of {image, faces:[(box, landmarks)]}, manifest dict)."""
    root = Path(root)
    ann_path = root / "annotations.jsonl"
    if not ann_path.exists():
        raise DataError(f"{ann_path} not found")
    records = []
    for lineno, line in enumerate(ann_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            faces = [
                (tuple(float(v) for v in f["box"]), np.asarray(f["landmarks"], dtype=np.float32))
                for f in rec["faces"]
            ]
            if any(len(f[0]) != 4 or f[1].shape != (5, 2) for f in faces):
                raise ValueError("bad face record")
            records.append({"image": rec["image"], "faces": faces})
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"{ann_path}: malformed record at line {lineno}: {e}") from e
    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    return records, manifest


def face_bin(box, canvas_dims) -> int:
    side = max(box[2], box[3]) * CONTEXT_DIM / max(canvas_dims)
    return scale_to_bin(side)

"""Landmark-driven face/eye/mouth crops with CLAHE illumination equalization."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np

from .dataset import FRAME_PATTERN, LANDMARK_SLACK, ClipRecord

CROP_SIZE = 96
EYE_IDX = np.arange(36, 48)
MOUTH_IDX = np.arange(48, 68)
REGION_MARGIN = 0.25
MIN_REGION_SIDE = 4.0
REGIONS = ("face", "eyes", "mouth")
MANIFEST = "manifest.json"


class CropError(ValueError):
    pass


@dataclass
class ClaheConfig:
    clip_limit: float = 2.0
    tile_grid: tuple[int, int] = (8, 8)

    def __post_init__(self):
        self.tile_grid = tuple(int(v) for v in self.tile_grid)
        if not self.clip_limit >= 1:
            raise ValueError("clip_limit must be >= 1")
        if len(self.tile_grid) != 2 or min(self.tile_grid) < 1:
            raise ValueError("tile_grid must be two positive integers")


@dataclass
class RegionCrop:
    region: str
    image: np.ndarray  # 96 x 96 x 3 uint8
    source_box: tuple[int, int, int, int]  # x0, y0, x1, y1 (x1/y1 exclusive)


# --- boxes ------------------------------------------------------------------


def landmark_box(points, margin: float, min_side: float = 0.0) -> tuple[float, float, float, float]:
    """Bounding box of ``points`` grown by ``margin`` of its width/height on each side.

    Sides shorter than ``min_side`` after the margin are widened symmetrically.
    No clamping is applied.
    """
    pts = np.asarray(points, dtype=np.float64)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    w, h = x1 - x0, y1 - y0
    x0, x1 = x0 - margin * w, x1 + margin * w
    y0, y1 = y0 - margin * h, y1 + margin * h
    if x1 - x0 < min_side:
        c = 0.5 * (x0 + x1)
        x0, x1 = c - min_side / 2, c + min_side / 2
    if y1 - y0 < min_side:
        c = 0.5 * (y0 + y1)
        y0, y1 = c - min_side / 2, c + min_side / 2
    return float(x0), float(y0), float(x1), float(y1)


def clamp_box(box, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer pixel box covering ``box``, clipped to the image; raises on zero area."""
    x0, y0, x1, y1 = box
    ix0 = min(max(math.floor(x0), 0), width)
    iy0 = min(max(math.floor(y0), 0), height)
    ix1 = min(max(math.ceil(x1), 0), width)
    iy1 = min(max(math.ceil(y1), 0), height)
    if ix1 <= ix0 or iy1 <= iy0:
        raise CropError(f"degenerate box {box} after clamping to {width}x{height}")
    return ix0, iy0, ix1, iy1


def _clamp_landmarks(landmarks, width, height):
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.shape != (68, 2):
        raise CropError(f"expected 68 landmarks, got shape {lm.shape}")
    lo = -LANDMARK_SLACK
    if lm.min() < lo or lm[:, 0].max() > width - 1 + LANDMARK_SLACK or lm[:, 1].max() > height - 1 + LANDMARK_SLACK:
        raise CropError("landmarks lie outside the frame")
    return np.stack([np.clip(lm[:, 0], 0, width - 1), np.clip(lm[:, 1], 0, height - 1)], axis=1)


def resize(image: np.ndarray, size: int = CROP_SIZE) -> np.ndarray:
    return cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR)


def _as_rgb(image):
    if image.ndim == 2:
        return np.repeat(image[..., None], 3, axis=2)
    return image


def crop_face(frame: np.ndarray, landmarks, margin: float = 0.2) -> RegionCrop:
    h, w = frame.shape[:2]
    lm = _clamp_landmarks(landmarks, w, h)
    x0, y0, x1, y1 = landmark_box(lm, margin)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise CropError("landmarks span a zero-area face box")
    box = clamp_box((x0, y0, x1, y1), w, h)
    crop = frame[box[1]:box[3], box[0]:box[2]]
    return RegionCrop("face", resize(_as_rgb(crop)), box)


def extract_regions(source: np.ndarray, landmarks) -> tuple[RegionCrop, RegionCrop]:
    """Eye and mouth crops of ``source``; ``landmarks`` are in ``source`` pixel coordinates."""
    h, w = source.shape[:2]
    lm = np.asarray(landmarks, dtype=np.float64)
    out = []
    for name, idx in (("eyes", EYE_IDX), ("mouth", MOUTH_IDX)):
        box = clamp_box(landmark_box(lm[idx], REGION_MARGIN, MIN_REGION_SIDE), w, h)
        crop = source[box[1]:box[3], box[0]:box[2]]
        out.append(RegionCrop(name, resize(_as_rgb(crop)), box))
    return out[0], out[1]


# --- CLAHE ------------------------------------------------------------------


def tile_mappings(gray: np.ndarray, clip_limit: float, tile_grid: tuple[int, int]):
    """Per-tile clipped-histogram equalization lookup tables.

    Returns ``(luts, tile_h, tile_w)`` with ``luts`` of shape
    ``(rows, cols, 256)`` holding float output levels.  ``clip_limit`` is in
    multiples of the uniform bin height; ``math.inf`` disables clipping.
    """
    rows, cols = tile_grid
    h, w = gray.shape
    if rows > h or cols > w:
        raise ValueError(f"tile grid {tile_grid} larger than image {w}x{h}")
    th, tw = -(-h // rows), -(-w // cols)
    padded = np.pad(gray, ((0, rows * th - h), (0, cols * tw - w)), mode="symmetric")
    tiles = padded.reshape(rows, th, cols, tw).transpose(0, 2, 1, 3).reshape(rows * cols, -1)
    offsets = (np.arange(rows * cols) * 256)[:, None]
    hist = np.bincount((tiles.astype(np.int64) + offsets).ravel(), minlength=rows * cols * 256)
    hist = hist.reshape(rows * cols, 256).astype(np.float64)

    area = th * tw
    if math.isfinite(clip_limit):
        limit = max(clip_limit * area / 256.0, 1.0)
        clipped = np.minimum(hist, limit)
        excess = (hist - clipped).sum(axis=1, keepdims=True)
        hist = clipped + excess / 256.0
    luts = np.cumsum(hist, axis=1) * (255.0 / area)
    return np.clip(luts, 0, 255).reshape(rows, cols, 256), th, tw


def _interp_axis(n: int, tile: int, count: int):
    pos = (np.arange(n) + 0.5) / tile - 0.5
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, count - 1)
    i1 = np.minimum(i0 + 1, count - 1)
    frac = np.clip(pos - i0, 0.0, 1.0)
    return i0, i1, frac


def equalize_luminance(gray: np.ndarray, clip_limit: float = 2.0, tile_grid=(8, 8)) -> np.ndarray:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.size == 0:
        raise ValueError("expected a nonempty 2-D uint8 image")
    gray = gray.astype(np.uint8)
    luts, th, tw = tile_mappings(gray, clip_limit, tile_grid)
    rows, cols = luts.shape[:2]
    h, w = gray.shape
    r0, r1, fy = _interp_axis(h, th, rows)
    c0, c1, fx = _interp_axis(w, tw, cols)
    g = gray.astype(np.int64)
    # bilinear blend of the four surrounding tile mappings
    top = (1 - fx)[None, :] * luts[r0[:, None], c0[None, :], g] + fx[None, :] * luts[r0[:, None], c1[None, :], g]
    bot = (1 - fx)[None, :] * luts[r1[:, None], c0[None, :], g] + fx[None, :] * luts[r1[:, None], c1[None, :], g]
    out = (1 - fy)[:, None] * top + fy[:, None] * bot
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def clahe(image: np.ndarray, cfg: ClaheConfig | None = None) -> np.ndarray:
    """CLAHE on a grayscale image, or on the luminance channel of an RGB image."""
    cfg = cfg or ClaheConfig()
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    if image.ndim == 2:
        return equalize_luminance(image, cfg.clip_limit, cfg.tile_grid)
    ycc = cv2.cvtColor(image.astype(np.uint8), cv2.COLOR_RGB2YCrCb)
    ycc[..., 0] = equalize_luminance(ycc[..., 0], cfg.clip_limit, cfg.tile_grid)
    return cv2.cvtColor(ycc, cv2.COLOR_YCrCb2RGB)


# --- per-frame pipeline and cache ------------------------------------------


def preprocess_frame(frame: np.ndarray, landmarks, cfg: ClaheConfig | None = None, margin: float = 0.2
                     ) -> dict[str, RegionCrop]:
    """Face box -> CLAHE on the raw-resolution face crop -> face, eyes and mouth crops.

    Eye and mouth boxes are reported in raw-frame pixels.
    """
    h, w = frame.shape[:2]
    lm = _clamp_landmarks(landmarks, w, h)
    face_box = crop_face(frame, lm, margin).source_box
    x0, y0, x1, y1 = face_box
    equalized = clahe(frame[y0:y1, x0:x1], cfg)
    eyes, mouth = extract_regions(equalized, lm - (x0, y0))
    for r in (eyes, mouth):
        bx0, by0, bx1, by1 = r.source_box
        r.source_box = (bx0 + x0, by0 + y0, bx1 + x0, by1 + y0)
    return {"face": RegionCrop("face", resize(equalized), face_box), "eyes": eyes, "mouth": mouth}


def clip_cache_dir(cache_root, clip_id: str) -> Path:
    return Path(cache_root) / clip_id


def is_preprocessed(cache_root, clip_id: str) -> bool:
    path = clip_cache_dir(cache_root, clip_id) / MANIFEST
    if not path.is_file():
        return False
    try:
        return bool(json.loads(path.read_text()).get("complete"))
    except json.JSONDecodeError:
        return False


def preprocess_clip(clip: ClipRecord, cache_root, cfg: ClaheConfig | None = None, margin: float = 0.2,
                    force: bool = False) -> bool:
    """Populate ``<cache>/<clip_id>/{face,eyes,mouth}/`` plus a manifest.

    Returns ``False`` without writing anything when the clip is already cached.
    """
    cfg = cfg or ClaheConfig()
    if not force and is_preprocessed(cache_root, clip.clip_id):
        return False
    out = clip_cache_dir(cache_root, clip.clip_id)
    for region in REGIONS:
        (out / region).mkdir(parents=True, exist_ok=True)
    boxes = {region: [] for region in REGIONS}
    for i, ann in enumerate(clip.annotations):
        crops = preprocess_frame(clip.read_frame(i), ann.landmarks, cfg, margin)
        for region, crop in crops.items():
            cv2.imwrite(str(out / region / FRAME_PATTERN.format(i)), cv2.cvtColor(crop.image, cv2.COLOR_RGB2BGR))
            boxes[region].append(list(crop.source_box))
    manifest = {
        "clip_id": clip.clip_id,
        "n_frames": len(clip),
        "clahe": asdict(cfg),
        "clahe_stage": "after face crop, before resize",
        "face_margin": margin,
        "region_margin": REGION_MARGIN,
        "boxes": boxes,
        "complete": True,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return True


def load_region(cache_root, clip_id: str, region: str, indices) -> np.ndarray:
    """``(n, 96, 96, 3)`` uint8 RGB crops of ``region`` for the given frame indices."""
    base = clip_cache_dir(cache_root, clip_id) / region
    out = []
    for i in indices:
        path = base / FRAME_PATTERN.format(int(i))
        bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if bgr is None:
            raise FileNotFoundError(f"missing cache entry {path}")
        out.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
    return np.stack(out)

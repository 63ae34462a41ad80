"""Parametric cartoon-face clips with analytically known valence/arousal.

Valence drives mouth curvature; arousal drives eye openness, mouth opening,
brow height and the per-frame jitter amplitude.  Landmarks follow the usual
68-point layout (jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, mouth 48-67)
and are computed from the same face parameters used for rendering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .dataset import (
    ANNOTATION_FILE,
    FRAME_PATTERN,
    DatasetIndex,
    FrameAnnotation,
    load_dataset,
    write_annotations,
)

FRAME_SIZE = 160
LANDMARK_DECIMALS = 3


@dataclass
class SyntheticFaceParams:
    """Geometry of one rendered frame.  Lengths are in pixels."""

    mouth_curvature: float  # in [-1, 1]; +1 = corners fully raised
    eye_openness: float  # eye half-height as a fraction of eye half-width
    motion_amplitude: float  # bound of the per-frame jitter, px
    head_center: tuple[float, float]
    head_scale: float  # face half-width
    mouth_opening: float = 0.1  # fraction of head_scale
    brow_raise: float = 0.0  # fraction of head_scale
    trajectory_smoothness: int = 1  # max label change per frame


def mouth_curvature_of(valence: float) -> float:
    return valence / 10.0


def eye_openness_of(arousal: float) -> float:
    return 0.38 + 0.24 * arousal / 10.0


def motion_amplitude_of(arousal: float) -> float:
    return 0.4 + 2.4 * (arousal + 10.0) / 20.0


def face_params(valence: float, arousal: float, center, scale: float, smoothness: int = 1
                ) -> SyntheticFaceParams:
    return SyntheticFaceParams(
        mouth_curvature=mouth_curvature_of(valence),
        eye_openness=eye_openness_of(arousal),
        motion_amplitude=motion_amplitude_of(arousal),
        head_center=(float(center[0]), float(center[1])),
        head_scale=float(scale),
        mouth_opening=0.03 + 0.12 * (arousal + 10.0) / 20.0,
        brow_raise=0.06 * arousal / 10.0,
        trajectory_smoothness=smoothness,
    )


# curvature contributes this fraction of head_scale to the mouth-center drop
CURVE_DEPTH = 0.16


def landmarks_of(p: SyntheticFaceParams) -> np.ndarray:
    cx, cy = p.head_center
    s = p.head_scale
    pts = np.zeros((68, 2))

    # jaw: lower half of the face ellipse, left ear -> chin -> right ear
    phi = math.pi * (1 - np.arange(17) / 16)
    pts[0:17, 0] = cx + s * np.cos(phi)
    pts[0:17, 1] = cy + 1.25 * s * np.sin(phi)

    # brows
    by = cy - (0.52 + p.brow_raise) * s
    for start, bx, sign in ((17, cx - 0.38 * s, 1), (22, cx + 0.38 * s, 1)):
        xs = bx + np.linspace(-0.2, 0.2, 5) * s
        pts[start:start + 5, 0] = xs
        pts[start:start + 5, 1] = by + 0.06 * s * ((xs - bx) / (0.2 * s)) ** 2 * sign

    # nose bridge 27-30, base 31-35
    pts[27:31, 0] = cx
    pts[27:31, 1] = cy + np.linspace(-0.3, 0.12, 4) * s
    pts[31:36, 0] = cx + np.linspace(-0.14, 0.14, 5) * s
    pts[31:36, 1] = cy + 0.2 * s - np.array([0, 0.02, 0.03, 0.02, 0]) * s

    # eyes: corner, two upper, corner, two lower
    ew = 0.16 * s
    eh = p.eye_openness * ew
    ey = cy - 0.25 * s
    k = math.sqrt(1 - (1 / 3) ** 2)
    dxs = np.array([-1, -1 / 3, 1 / 3, 1, 1 / 3, -1 / 3]) * ew
    dys = np.array([0, -k, -k, 0, k, k]) * eh
    for start, ex in ((36, cx - 0.38 * s), (42, cx + 0.38 * s)):
        pts[start:start + 6, 0] = ex + dxs
        pts[start:start + 6, 1] = ey + dys

    # mouth: lip centerline sags in the middle for positive curvature
    mx, my = cx, cy + 0.58 * s
    mw = 0.34 * s
    depth = p.mouth_curvature * CURVE_DEPTH * s
    half_open = 0.5 * p.mouth_opening * s
    lip = 0.06 * s

    def center(xi):
        return my + depth * (1 - xi**2)

    def half_height(xi, extra):
        return (extra) * np.sqrt(np.clip(1 - xi**2, 0, None))

    outer_upper = np.array([-2 / 3, -1 / 3, 0, 1 / 3, 2 / 3])
    outer_lower = outer_upper[::-1]
    pts[48] = (mx - mw, center(-1))
    pts[49:54, 0] = mx + outer_upper * mw
    pts[49:54, 1] = center(outer_upper) - half_height(outer_upper, half_open + lip)
    pts[54] = (mx + mw, center(1))
    pts[55:60, 0] = mx + outer_lower * mw
    pts[55:60, 1] = center(outer_lower) + half_height(outer_lower, half_open + lip)

    inner_upper = np.array([-0.5, 0, 0.5])
    pts[60] = (mx - 0.9 * mw, center(-0.9))
    pts[61:64, 0] = mx + inner_upper * mw
    pts[61:64, 1] = center(inner_upper) - half_height(inner_upper, half_open)
    pts[64] = (mx + 0.9 * mw, center(0.9))
    pts[65:68, 0] = mx + inner_upper[::-1] * mw
    pts[65:68, 1] = center(inner_upper[::-1]) + half_height(inner_upper[::-1], half_open)
    return pts


def mouth_curvature_measure(landmarks: np.ndarray) -> float:
    """Drop of the lip midpoints below the mouth corners, in units of face half-width."""
    corners = 0.5 * (landmarks[48, 1] + landmarks[54, 1])
    middle = 0.5 * (landmarks[51, 1] + landmarks[57, 1])
    half_width = 0.5 * (landmarks[16, 0] - landmarks[0, 0])
    return float((middle - corners) / half_width)


@dataclass
class _ClipStyle:
    background: np.ndarray
    skin: tuple[float, float, float]
    gain: float
    bias: float


def _clip_style(rng: np.random.Generator, size: int) -> _ClipStyle:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(60, 190)
    gx, gy = rng.uniform(-60, 60, size=2)
    bg = base + gx * (xx - 0.5) + gy * (yy - 0.5)
    # low-frequency blotches give the background some texture
    noise = cv2.resize(rng.uniform(-25, 25, size=(6, 6)), (size, size), interpolation=cv2.INTER_CUBIC)
    bg = np.clip(bg + noise, 0, 255)
    tint = rng.uniform(0.85, 1.15, size=3)
    bg = np.clip(bg[..., None] * tint, 0, 255).astype(np.float32)
    skin = tuple(float(c) for c in rng.uniform([170, 120, 90], [235, 190, 160]))
    return _ClipStyle(bg, skin, float(rng.uniform(0.45, 1.15)), float(rng.uniform(-25, 25)))


def _poly(pts: np.ndarray) -> np.ndarray:
    return np.round(pts * 16).astype(np.int32).reshape(-1, 1, 2)


def render_face(p: SyntheticFaceParams, lm: np.ndarray, style: _ClipStyle, rng: np.random.Generator
                ) -> np.ndarray:
    """RGB uint8 frame drawn from the face parameters and their landmarks."""
    img = style.background.copy()
    size = img.shape[0]
    cx, cy = p.head_center
    s = p.head_scale
    aa = cv2.LINE_AA

    cv2.ellipse(img, (int(round(cx * 16)), int(round(cy * 16))),
                (int(round(s * 16)), int(round(1.25 * s * 16))), 0, 0, 360, style.skin, -1, aa, 4)
    # soft shading so the face has intensity structure beyond flat fills
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    shade = 1.0 - 0.18 * np.clip(((xx - cx) ** 2 + (yy - cy) ** 2) / (1.6 * s) ** 2, 0, 1)
    img *= shade[..., None]

    dark = (40.0, 30.0, 30.0)
    for start in (17, 22):
        cv2.polylines(img, [_poly(lm[start:start + 5])], False, dark, 2, aa, 4)
    cv2.polylines(img, [_poly(lm[27:31])], False, (120.0, 80.0, 70.0), 1, aa, 4)
    cv2.polylines(img, [_poly(lm[31:36])], False, (120.0, 80.0, 70.0), 2, aa, 4)

    for start in (36, 42):
        eye = lm[start:start + 6]
        cv2.fillPoly(img, [_poly(eye)], (245.0, 245.0, 240.0), aa, 4)
        c = eye.mean(axis=0)
        r = 0.55 * (eye[:, 1].max() - eye[:, 1].min()) + 0.5
        mask = np.zeros((size, size), np.uint8)
        cv2.fillPoly(mask, [_poly(eye)], 255, aa, 4)
        iris = img.copy()
        cv2.circle(iris, (int(round(c[0] * 16)), int(round(c[1] * 16))), int(round(r * 16)),
                   (50.0, 35.0, 25.0), -1, aa, 4)
        m = (mask.astype(np.float32) / 255.0)[..., None]
        img = img * (1 - m) + iris * m
        cv2.polylines(img, [_poly(eye)], True, dark, 1, aa, 4)

    cv2.fillPoly(img, [_poly(lm[48:60])], (150.0, 45.0, 55.0), aa, 4)
    cv2.fillPoly(img, [_poly(lm[60:68])], (45.0, 15.0, 20.0), aa, 4)

    img = img * style.gain + style.bias + rng.normal(0, 2.0, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def random_walk(rng: np.random.Generator, n: int, start: int, step_bound: int = 1,
                move_prob: float = 0.35) -> np.ndarray:
    """Bounded integer random walk in [-10, 10] moving at most ``step_bound`` per frame."""
    out = np.empty(n, dtype=np.int64)
    cur = int(start)
    for i in range(n):
        if i and rng.random() < move_prob:
            cur += int(rng.integers(-step_bound, step_bound + 1))
            cur = min(max(cur, -10), 10)
        out[i] = cur
    return out


def _write_clip(clip_dir: Path, frames: list[np.ndarray], annotations: list[FrameAnnotation], fps: int):
    clip_dir.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        cv2.imwrite(str(clip_dir / FRAME_PATTERN.format(i)), cv2.cvtColor(f, cv2.COLOR_RGB2BGR))
    write_annotations(clip_dir / ANNOTATION_FILE, annotations, fps)


def synthesize_clip(rng: np.random.Generator, valence: np.ndarray, arousal: np.ndarray,
                    appearance: np.ndarray | None = None, size: int = FRAME_SIZE,
                    smoothness: int = 1) -> tuple[list[np.ndarray], list[FrameAnnotation]]:
    """Render a clip whose labels are ``valence``/``arousal`` per frame.

    ``appearance`` optionally gives a different (valence, arousal) pair per
    frame to *draw* while keeping the annotated labels; it defaults to the
    labels themselves.
    """
    style = _clip_style(rng, size)
    scale = rng.uniform(0.25, 0.30) * size
    base = size / 2 + rng.uniform(-0.06, 0.06, size=2) * size
    if appearance is None:
        appearance = np.stack([valence, arousal], axis=1)
    frames, anns = [], []
    for v, a, (av, aa) in zip(valence, arousal, appearance):
        amp = motion_amplitude_of(aa)
        center = base + rng.uniform(-amp, amp, size=2)
        p = face_params(av, aa, center, scale, smoothness)
        # arousal-scaled wobble of the expressive features on top of head jitter
        wobble = 0.012 * (aa + 10) / 20
        p.eye_openness = max(p.eye_openness + rng.uniform(-wobble, wobble) * 4, 0.05)
        p.mouth_opening = max(p.mouth_opening + rng.uniform(-wobble, wobble), 0.0)
        lm = np.round(landmarks_of(p), LANDMARK_DECIMALS)
        lm = np.clip(lm, 0, size - 1)
        frames.append(render_face(p, lm, style, rng))
        anns.append(FrameAnnotation(int(v), int(a), lm))
    return frames, anns


def _check_args(n_clips: int, frames_range: tuple[int, int]):
    lo, hi = frames_range
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    if not 8 <= lo <= hi <= 200:
        raise ValueError("frames_range must satisfy 8 <= min <= max <= 200")


def _prepare_out(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    if not out.is_dir() or not _writable(out):
        raise OSError(f"dataset directory {out} is not writable")
    return out


def _writable(path: Path) -> bool:
    probe = path / ".write_probe"
    try:
        probe.write_text("")
        probe.unlink()
        return True
    except OSError:
        return False


def generate_synthetic_dataset(n_clips: int, frames_range: tuple[int, int], seed: int, out,
                               fps: int = 30, size: int = FRAME_SIZE,
                               fixed_valence: int | None = None) -> DatasetIndex:
    """Write ``n_clips`` synthetic clips under ``out`` and return the loaded index.

    Each clip draws its own child RNG from ``seed`` so clip contents do not
    depend on generation order.
    """
    _check_args(n_clips, frames_range)
    out = _prepare_out(out)
    children = np.random.SeedSequence(seed).spawn(n_clips)
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        n = int(rng.integers(frames_range[0], frames_range[1] + 1))
        v = random_walk(rng, n, int(rng.integers(-10, 11)))
        a = random_walk(rng, n, int(rng.integers(-10, 11)))
        if fixed_valence is not None:
            v = np.full(n, fixed_valence, dtype=np.int64)
        frames, anns = synthesize_clip(rng, v, a, size=size)
        _write_clip(out / f"clip_{k:04d}", frames, anns, fps)
    return load_dataset(out)


def generate_signal_clips(n_clips: int, n_frames: int, seed: int, out, window_fraction: float = 0.4,
                          size: int = FRAME_SIZE) -> tuple[DatasetIndex, dict[str, tuple[int, int]]]:
    """Clips whose expression is visible only inside one contiguous window.

    Every frame carries the clip's constant, clearly non-neutral label; frames
    outside the window are drawn with a neutral face and low motion.  Returns
    the index and ``{clip_id: (start, stop)}`` windows (stop exclusive), which
    are also written to ``<out>/signal_windows.json``.
    """
    _check_args(n_clips, (n_frames, n_frames))
    out = _prepare_out(out)
    win = max(1, int(round(window_fraction * n_frames)))
    windows = {}
    for k, child in enumerate(np.random.SeedSequence(seed).spawn(n_clips)):
        rng = np.random.default_rng(child)
        angle = rng.uniform(0, 2 * math.pi)
        radius = rng.uniform(7.0, 10.0)
        v0 = int(np.clip(round(radius * math.cos(angle)), -10, 10))
        a0 = int(np.clip(round(radius * math.sin(angle)), -10, 10))
        start = int(rng.integers(0, n_frames - win + 1))
        v = np.full(n_frames, v0)
        a = np.full(n_frames, a0)
        look = np.zeros((n_frames, 2))  # neutral face outside the window
        look[start:start + win] = (v0, a0)
        frames, anns = synthesize_clip(rng, v, a, appearance=look, size=size)
        cid = f"sig_{k:04d}"
        _write_clip(out / cid, frames, anns, 30)
        windows[cid] = (start, start + win)
    (out / "signal_windows.json").write_text(json.dumps(windows, indent=1, sort_keys=True))
    return load_dataset(out), windows

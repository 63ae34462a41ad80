"""On-disk clip format, label normalization and distribution-matched splits.

Layout::

    <root>/<clip_id>/frame_00000.png
    <root>/<clip_id>/frame_00001.png
    ...
    <root>/<clip_id>/annotations.json

with ``annotations.json`` of the form
``{"fps": 30, "frames": {"0": {"valence": v, "arousal": a, "landmarks": [[x, y], ...68]}}}``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

log = logging.getLogger(__name__)

LEVEL_MIN, LEVEL_MAX = -10, 10
N_LEVELS = LEVEL_MAX - LEVEL_MIN + 1
N_LANDMARKS = 68
LANDMARK_SLACK = 2.0  # px a landmark may fall outside the frame before it is an error
FRAME_PATTERN = "frame_{:05d}.png"
ANNOTATION_FILE = "annotations.json"


class DatasetError(ValueError):
    def __init__(self, message: str, clip_id: str | None = None):
        super().__init__(f"{clip_id}: {message}" if clip_id else message)
        self.clip_id = clip_id


@dataclass
class FrameAnnotation:
    valence: int
    arousal: int
    landmarks: np.ndarray  # (68, 2) x, y in raw-frame pixels

    def to_json(self) -> dict:
        return {
            "valence": int(self.valence),
            "arousal": int(self.arousal),
            "landmarks": [[float(x), float(y)] for x, y in self.landmarks],
        }


@dataclass
class ClipRecord:
    clip_id: str
    frames: list[Path]
    annotations: list[FrameAnnotation]
    fps: int = 30

    def __len__(self):
        return len(self.frames)

    def labels(self) -> np.ndarray:
        """``(F, 2)`` integer (valence, arousal) levels."""
        return np.array([[a.valence, a.arousal] for a in self.annotations], dtype=np.int64)

    def landmarks(self) -> np.ndarray:
        return np.stack([a.landmarks for a in self.annotations])

    def read_frame(self, i: int) -> np.ndarray:
        """RGB uint8 image of frame ``i``."""
        bgr = cv2.imread(str(self.frames[i]), cv2.IMREAD_COLOR)
        if bgr is None:
            raise DatasetError(f"unreadable frame {self.frames[i].name}", self.clip_id)
        return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


@dataclass
class DatasetIndex:
    root: Path
    clips: list[ClipRecord]
    errors: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [c.clip_id for c in self.clips]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate clip ids in index")

    def __len__(self):
        return len(self.clips)

    def __getitem__(self, clip_id: str) -> ClipRecord:
        for c in self.clips:
            if c.clip_id == clip_id:
                return c
        raise KeyError(clip_id)

    @property
    def clip_ids(self) -> list[str]:
        return [c.clip_id for c in self.clips]


def normalize_label(level):
    """Map a level in [-10, 10] to [0, 1]."""
    arr = np.asarray(level)
    if np.any(arr < LEVEL_MIN) or np.any(arr > LEVEL_MAX):
        raise ValueError(f"label level out of range [{LEVEL_MIN}, {LEVEL_MAX}]: {level}")
    out = (arr + 10) / 20
    return float(out) if out.ndim == 0 else out


def denormalize_label(x):
    out = np.asarray(x, dtype=np.float64) * 20 - 10
    return float(out) if out.ndim == 0 else out


def _parse_annotation(raw: dict, clip_id: str, idx: int, size: tuple[int, int]) -> FrameAnnotation:
    try:
        v, a = raw["valence"], raw["arousal"]
        lm = np.asarray(raw["landmarks"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"frame {idx}: malformed annotation ({e})", clip_id) from None
    for name, val in (("valence", v), ("arousal", a)):
        if not isinstance(val, int) or isinstance(val, bool):
            raise DatasetError(f"frame {idx}: {name} must be an integer level, got {val!r}", clip_id)
        if not LEVEL_MIN <= val <= LEVEL_MAX:
            raise DatasetError(f"frame {idx}: {name}={val} outside [-10, 10]", clip_id)
    if lm.shape != (N_LANDMARKS, 2):
        raise DatasetError(f"frame {idx}: expected 68 landmarks, got shape {lm.shape}", clip_id)
    w, h = size
    if (lm[:, 0].min() < -LANDMARK_SLACK or lm[:, 1].min() < -LANDMARK_SLACK
            or lm[:, 0].max() > w - 1 + LANDMARK_SLACK or lm[:, 1].max() > h - 1 + LANDMARK_SLACK):
        raise DatasetError(f"frame {idx}: landmarks outside the {w}x{h} frame", clip_id)
    return FrameAnnotation(v, a, lm)


def load_clip(clip_dir: Path) -> ClipRecord:
    clip_id = clip_dir.name
    ann_path = clip_dir / ANNOTATION_FILE
    if not ann_path.is_file():
        raise DatasetError("missing annotations.json", clip_id)
    try:
        raw = json.loads(ann_path.read_text())
        fps = int(raw.get("fps", 30))
        frames_raw = raw["frames"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"unreadable annotations.json ({e})", clip_id) from None

    frames = sorted(clip_dir.glob("frame_*.png"))
    if len(frames) != len(frames_raw):
        raise DatasetError(f"{len(frames)} frames but {len(frames_raw)} annotations", clip_id)
    if len(frames) < 2:
        raise DatasetError("a clip needs at least 2 frames", clip_id)
    expected = [FRAME_PATTERN.format(i) for i in range(len(frames))]
    if [f.name for f in frames] != expected:
        raise DatasetError("frame files are not numbered consecutively from 0", clip_id)
    if sorted(frames_raw, key=int) != [str(i) for i in range(len(frames))]:
        raise DatasetError("annotation keys are not frame indices 0..F-1", clip_id)

    first = cv2.imread(str(frames[0]), cv2.IMREAD_UNCHANGED)
    if first is None:
        raise DatasetError(f"unreadable frame {frames[0].name}", clip_id)
    size = (first.shape[1], first.shape[0])
    anns = [_parse_annotation(frames_raw[str(i)], clip_id, i, size) for i in range(len(frames))]
    return ClipRecord(clip_id, frames, anns, fps)


def load_dataset(root, skip_invalid: bool = False) -> DatasetIndex:
    """Index every clip directory under ``root``.

    Malformed clips raise :class:`DatasetError` listing every problem found.
    With ``skip_invalid`` they are logged and recorded in ``index.errors``
    instead.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    clips, errors = [], {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            clips.append(load_clip(d))
        except DatasetError as e:
            errors[d.name] = str(e)
    if errors and not skip_invalid:
        raise DatasetError("invalid clips:\n  " + "\n  ".join(errors.values()))
    for msg in errors.values():
        log.warning("skipping %s", msg)
    return DatasetIndex(root, clips, errors)


def write_annotations(path: Path, annotations: list[FrameAnnotation], fps: int = 30) -> None:
    payload = {"fps": fps, "frames": {str(i): a.to_json() for i, a in enumerate(annotations)}}
    path.write_text(json.dumps(payload, separators=(",", ":")))


# --- splitting --------------------------------------------------------------


@dataclass
class SplitSpec:
    train_ids: list[str]
    test_ids: list[str]
    seed: int
    histogram_distance: float
    history: list[float] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError("train and test ids overlap")

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "train_ids": self.train_ids,
            "test_ids": self.test_ids,
            "histogram_distance": self.histogram_distance,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        raw = json.loads(text)
        return cls(raw["train_ids"], raw["test_ids"], raw["seed"], raw["histogram_distance"])


def label_histogram(labels: np.ndarray) -> np.ndarray:
    """Concatenated 21-bin valence and arousal counts of ``(F, 2)`` levels."""
    labels = np.asarray(labels, dtype=np.int64) - LEVEL_MIN
    return np.concatenate([np.bincount(labels[:, 0], minlength=N_LEVELS),
                           np.bincount(labels[:, 1], minlength=N_LEVELS)]).astype(np.float64)


def chi_square_distance(train_counts: np.ndarray, test_counts: np.ndarray) -> np.ndarray:
    """Sum over valence and arousal of ``0.5 * sum((p - q)^2 / (p + q))`` on normalized histograms.

    Accepts stacked ``(..., 42)`` count arrays.
    """
    out = 0.0
    for sl in (slice(0, N_LEVELS), slice(N_LEVELS, 2 * N_LEVELS)):
        p = train_counts[..., sl]
        q = test_counts[..., sl]
        p = p / np.maximum(p.sum(axis=-1, keepdims=True), 1e-300)
        q = q / np.maximum(q.sum(axis=-1, keepdims=True), 1e-300)
        s = p + q
        out = out + 0.5 * np.sum(np.where(s > 0, (p - q) ** 2 / np.where(s > 0, s, 1.0), 0.0), axis=-1)
    return out


def make_split(index: DatasetIndex | list[ClipRecord], test_fraction: float, seed: int,
               max_passes: int = 20) -> SplitSpec:
    """Seeded random split refined by greedy train/test swaps.

    Each pass visits every test clip and applies the single swap with a train
    clip that most reduces the chi-square distance between frame-level label
    histograms; refinement stops when a pass makes no improving swap or after
    ``max_passes`` passes.
    """
    clips = index.clips if isinstance(index, DatasetIndex) else list(index)
    n = len(clips)
    if n < 2:
        raise ValueError("need at least 2 clips to split")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    n_test = min(max(int(round(n * test_fraction)), 1), n - 1)

    ids = [c.clip_id for c in clips]
    hists = np.stack([label_histogram(c.labels()) for c in clips])
    perm = np.random.default_rng(seed).permutation(n)
    test = list(perm[:n_test])
    train = list(perm[n_test:])

    test_counts = hists[test].sum(axis=0)
    train_counts = hists[train].sum(axis=0)
    dist = float(chi_square_distance(train_counts, test_counts))
    history = [dist]
    for _ in range(max_passes):
        improved = False
        for ti in range(len(test)):
            i = test[ti]
            cand = np.asarray(train)
            new_test = test_counts - hists[i] + hists[cand]
            new_train = train_counts + hists[i] - hists[cand]
            d = chi_square_distance(new_train, new_test)
            k = int(np.argmin(d))
            if d[k] < dist - 1e-12:
                j = train[k]
                test[ti], train[k] = j, i
                test_counts, train_counts = new_test[k], new_train[k]
                dist = float(d[k])
                history.append(dist)
                improved = True
        if not improved:
            break

    return SplitSpec(
        train_ids=sorted(ids[k] for k in train),
        test_ids=sorted(ids[k] for k in test),
        seed=seed,
        histogram_distance=dist,
        history=history,
    )

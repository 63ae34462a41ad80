"""Horn-Schunck optical flow between key-frame region crops and its 3-channel encoding."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .dataset import FRAME_PATTERN

# alpha is expressed in 8-bit gray levels: [0, 1] inputs are rescaled by this
# factor before forming the brightness-constancy term
GRAY_LEVELS = 255.0
FLOW_REGIONS = ("eyes", "mouth")


@dataclass
class FlowConfig:
    alpha: float = 1.0
    max_iters: int = 200
    eps: float = 1e-4
    max_mag: float = 5.0

    def __post_init__(self):
        if self.alpha <= 0 or self.max_iters < 1 or self.eps < 0 or self.max_mag <= 0:
            raise ValueError(f"invalid flow config {self}")


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    residual: float
    iterations_run: int
    trace: list[float] = field(default_factory=list, repr=False)


@dataclass
class FlowEncoding:
    image: np.ndarray  # H x W x 3 float in [0, 1]: u, v, magnitude

    def to_uint8(self) -> np.ndarray:
        return np.round(self.image * 255).astype(np.uint8)


def _derivatives(a: np.ndarray, b: np.ndarray):
    """Brightness derivatives averaged over the 2x2x2 cube spanning both frames."""
    pad = ((0, 0), (0, 1), (0, 1))
    pa = np.pad(a, pad, mode="symmetric")
    pb = np.pad(b, pad, mode="symmetric")

    def dx(p):
        return p[:, :-1, 1:] - p[:, :-1, :-1] + p[:, 1:, 1:] - p[:, 1:, :-1]

    def dy(p):
        return p[:, 1:, :-1] - p[:, :-1, :-1] + p[:, 1:, 1:] - p[:, :-1, 1:]

    def quad(p):
        return p[:, :-1, :-1] + p[:, 1:, :-1] + p[:, :-1, 1:] + p[:, 1:, 1:]

    ix = (dx(pa) + dx(pb)) / 4.0
    iy = (dy(pa) + dy(pb)) / 4.0
    it = (quad(pb) - quad(pa)) / 4.0
    return ix, iy, it


def _neighbor_mean(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, ((0, 0), (1, 1), (1, 1)), mode="symmetric")
    return 0.25 * (p[:, :-2, 1:-1] + p[:, 2:, 1:-1] + p[:, 1:-1, :-2] + p[:, 1:-1, 2:])


def horn_schunck_batch(a, b, alpha: float = 1.0, max_iters: int = 200, eps: float = 1e-4) -> list[FlowField]:
    """Solve ``P`` independent frame pairs stacked as ``(P, H, W)`` arrays.

    Each pair stops on its own once its mean update magnitude drops below
    ``eps``; converged pairs are frozen, so results equal one-at-a-time runs.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ValueError("expected stacked (P, H, W) frames")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("frames contain non-finite values")
    if alpha <= 0:
        raise ValueError("alpha must be positive")

    ix, iy, it = _derivatives(a * GRAY_LEVELS, b * GRAY_LEVELS)
    denom = alpha**2 + ix**2 + iy**2
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    n_pairs = a.shape[0]
    active = np.ones(n_pairs, dtype=bool)
    iters = np.zeros(n_pairs, dtype=np.int64)
    residual = np.full(n_pairs, np.inf)
    traces = [[] for _ in range(n_pairs)]

    for _ in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ub = _neighbor_mean(u[idx])
        vb = _neighbor_mean(v[idx])
        t = (ix[idx] * ub + iy[idx] * vb + it[idx]) / denom[idx]
        un = ub - ix[idx] * t
        vn = vb - iy[idx] * t
        step = np.sqrt((un - u[idx]) ** 2 + (vn - v[idx]) ** 2).mean(axis=(1, 2))
        u[idx] = un
        v[idx] = vn
        iters[idx] += 1
        residual[idx] = step
        for k, s in zip(idx, step):
            traces[k].append(float(s))
        active[idx[step < eps]] = False

    return [FlowField(u[k], v[k], float(residual[k]), int(iters[k]), traces[k]) for k in range(n_pairs)]


def horn_schunck(a, b, alpha: float = 1.0, max_iters: int = 200, eps: float = 1e-4) -> FlowField:
    """Dense flow from grayscale ``a`` to ``b`` (both ``H x W`` in [0, 1]), in px/frame."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"expected two equal-shape 2-D frames, got {a.shape} and {b.shape}")
    return horn_schunck_batch(a[None], b[None], alpha, max_iters, eps)[0]


def encode_flow(flow: FlowField, max_mag: float = 5.0) -> FlowEncoding:
    if max_mag <= 0:
        raise ValueError("max_mag must be positive")
    u_n = np.clip(flow.u / (2 * max_mag) + 0.5, 0, 1)
    v_n = np.clip(flow.v / (2 * max_mag) + 0.5, 0, 1)
    mag = np.clip(np.hypot(flow.u, flow.v) / max_mag, 0, 1)
    return FlowEncoding(np.stack([u_n, v_n, mag], axis=-1))


def to_gray(rgb: np.ndarray) -> np.ndarray:
    return cv2.cvtColor(np.asarray(rgb, dtype=np.uint8), cv2.COLOR_RGB2GRAY).astype(np.float64) / 255.0


def flow_sequence(crops, cfg: FlowConfig | None = None) -> list[FlowEncoding]:
    """Encoded flow between consecutive crops, front-padded to the input length."""
    cfg = cfg or FlowConfig()
    if len(crops) < 2:
        raise ValueError("need at least 2 crops for a flow sequence")
    gray = np.stack([to_gray(c) for c in crops])
    fields = horn_schunck_batch(gray[:-1], gray[1:], cfg.alpha, cfg.max_iters, cfg.eps)
    enc = [encode_flow(f, cfg.max_mag) for f in fields]
    return [enc[0]] + enc


def flow_dir(cache_root, clip_id: str, region: str) -> Path:
    return Path(cache_root) / clip_id / f"{region}_flow"


def flow_manifest_path(cache_root, clip_id: str) -> Path:
    return Path(cache_root) / clip_id / "flow.json"


def has_flow(cache_root, clip_id: str, selected, cfg: FlowConfig | None = None) -> bool:
    path = flow_manifest_path(cache_root, clip_id)
    if not path.is_file():
        return False
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError:
        return False
    if cfg is not None and raw.get("solver") != asdict(cfg):
        return False
    return raw.get("selected") == [int(i) for i in selected] and bool(raw.get("complete", False))


def write_flow_cache(cache_root, clip_id: str, selected, region_crops: dict[str, np.ndarray],
                     cfg: FlowConfig) -> None:
    """Cache encodings as ``<cache>/<clip_id>/<region>_flow/frame_%05d.png``.

    Files are numbered by position in the key-frame sequence (0..K-1).
    """
    for region in FLOW_REGIONS:
        out = flow_dir(cache_root, clip_id, region)
        out.mkdir(parents=True, exist_ok=True)
        for k, enc in enumerate(flow_sequence(region_crops[region], cfg)):
            cv2.imwrite(str(out / FRAME_PATTERN.format(k)), cv2.cvtColor(enc.to_uint8(), cv2.COLOR_RGB2BGR))
    flow_manifest_path(cache_root, clip_id).write_text(json.dumps({
        "clip_id": clip_id,
        "selected": [int(i) for i in selected],
        "solver": asdict(cfg),
        "gray_levels": GRAY_LEVELS,
        "source": "CLAHE-equalized key-frame crops",
        "complete": True,
    }, indent=1))


def load_flow(cache_root, clip_id: str, region: str, length: int) -> np.ndarray:
    """``(length, 96, 96, 3)`` uint8 flow encodings."""
    base = flow_dir(cache_root, clip_id, region)
    out = []
    for k in range(length):
        path = base / FRAME_PATTERN.format(k)
        bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if bgr is None:
            raise FileNotFoundError(f"missing flow cache entry {path}")
        out.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
    return np.stack(out)

"""Key-frame selection with spatial self-attention and joint softmax pooling.

Each face crop is encoded into a 6x6 grid of local descriptors.  A two-layer
network scores every location for each attention head; the per-head softmax
over locations gives weights that pool the descriptors into one vector per
head.  A linear classifier turns the pooled vector of every frame into scores
for the 7 emotion-wheel classes and a single softmax over all (class, frame)
pairs gives p(c, f | S).  Frames are ranked by the marginal p(f | S).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

INPUT_SIZE = 96
STRIDE = 16
N_CLASSES = 7
NEUTRAL_RADIUS = 2.5
CHECKPOINT_VERSION = 1


@dataclass
class SelectorConfig:
    r_heads: int = 4
    d: int = 128
    attn_hidden: int = 64
    channels: tuple[int, int, int] = (16, 32, 64)  # first three stages; the fourth outputs ``d``
    k: int = 10
    steps: int = 400
    clips_per_step: int = 4
    lr: float = 1e-3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ValueError("selector channels must be three positive ints")
        for name in ("r_heads", "d", "attn_hidden", "k", "steps", "clips_per_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"selector {name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("selector lr must be positive")


@dataclass
class FeatureGrid:
    descriptors: np.ndarray  # L x D
    grid_shape: tuple[int, int]


@dataclass
class AttentionWeights:
    weights: np.ndarray  # R_heads x L, rows on the simplex
    grid_shape: tuple[int, int] = (6, 6)


@dataclass
class FrameImportance:
    joint: np.ndarray  # C x F
    marginal: np.ndarray  # F
    selected: list[int]


def class_of(valence: float, arousal: float) -> int:
    """Neutral disc of radius 2.5, else one of six 60-degree sectors counted from angle 0."""
    if math.hypot(valence, arousal) < NEUTRAL_RADIUS:
        return 0
    angle = math.atan2(arousal, valence) % (2 * math.pi)
    return 1 + min(int(angle / (2 * math.pi) * 6), 5)


def classes_of(labels) -> np.ndarray:
    return np.array([class_of(v, a) for v, a in np.asarray(labels)], dtype=np.int64)


class SelectorNet(nn.Module):
    def __init__(self, cfg: SelectorConfig):
        super().__init__()
        self.cfg = cfg
        layers, c_in = [], 3
        for c_out in (*cfg.channels, cfg.d):
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
                       nn.BatchNorm2d(c_out), nn.ReLU(inplace=True)]
            c_in = c_out
        self.backbone = nn.Sequential(*layers)
        self.attention = nn.Sequential(nn.Linear(cfg.d, cfg.attn_hidden), nn.Tanh(),
                                       nn.Linear(cfg.attn_hidden, cfg.r_heads))
        self.classifier = nn.Linear(cfg.r_heads * cfg.d, N_CLASSES)

    def local_features(self, x: torch.Tensor) -> torch.Tensor:
        """``(F, 3, 96, 96)`` -> ``(F, L, D)``."""
        fmap = self.backbone(x)
        return fmap.flatten(2).transpose(1, 2)

    def attend(self, feats: torch.Tensor):
        """``(F, L, D)`` -> weights ``(F, R, L)``, pooled ``(F, R, D)``."""
        scores = self.attention(feats).transpose(1, 2)
        weights = torch.softmax(scores, dim=-1)
        return weights, weights @ feats

    def forward(self, x: torch.Tensor):
        """Class scores ``(F, C)`` and attention weights for a stack of frames."""
        weights, pooled = self.attend(self.local_features(x))
        return self.classifier(pooled.flatten(1)), weights


def _to_tensor(frames) -> torch.Tensor:
    arr = np.asarray(frames)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[1:] != (INPUT_SIZE, INPUT_SIZE, 3):
        raise ValueError(f"expected {INPUT_SIZE}x{INPUT_SIZE}x3 frames, got {arr.shape[1:]}")
    x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float()
    return x / 255.0 if arr.dtype == np.uint8 else x


def extract_local_features(frame, net: SelectorNet) -> FeatureGrid:
    net.eval()
    with torch.no_grad():
        feats = net.local_features(_to_tensor(frame))[0]
    side = INPUT_SIZE // STRIDE
    return FeatureGrid(feats.numpy().astype(np.float64), (side, side))


def spatial_attention(grid: FeatureGrid, net: SelectorNet) -> tuple[AttentionWeights, np.ndarray]:
    net.eval()
    with torch.no_grad():
        feats = torch.from_numpy(grid.descriptors).float()[None]
        weights, pooled = net.attend(feats)
    w, agg = weights[0].double().numpy(), pooled[0].double().numpy()
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(agg))):
        raise FloatingPointError("non-finite attention activations")
    return AttentionWeights(w, grid.grid_shape), agg


def aggregate(weights, descriptors) -> np.ndarray:
    """Pool descriptors with attention rows: ``(R, L) @ (L, D)``."""
    return np.asarray(weights, dtype=np.float64) @ np.asarray(descriptors, dtype=np.float64)


def rank_frames(marginal, k: int) -> list[int]:
    """Top-``k`` frames by marginal, cycled when there are fewer than ``k``, in chronological order."""
    marginal = np.asarray(marginal, dtype=np.float64)
    ranked = np.argsort(-marginal, kind="stable")
    picks = [int(ranked[i % len(ranked)]) for i in range(k)]
    return sorted(picks)


def joint_softmax(scores, k: int = 10) -> FrameImportance:
    """Joint softmax over a ``C x F`` score matrix, marginalized over classes."""
    o = np.asarray(scores, dtype=np.float64)
    z = np.exp(o - o.max())
    joint = z / z.sum()
    marginal = joint.sum(axis=0)
    return FrameImportance(joint, marginal, rank_frames(marginal, k))


def temporal_softmax_pooling(per_frame_agg, net: SelectorNet, k: int = 10) -> FrameImportance:
    """``(F, R*D)`` pooled frame features -> class scores -> joint softmax importance."""
    with torch.no_grad():
        o = net.classifier(torch.as_tensor(np.asarray(per_frame_agg), dtype=torch.float32))
    return joint_softmax(o.double().numpy().T, k)


def selector_loss(scores: torch.Tensor, classes: torch.Tensor) -> torch.Tensor:
    """``-log sum_f p(c*_f, f | S)`` for one clip's ``(F, C)`` scores."""
    picked = scores.gather(1, classes[:, None]).squeeze(1)
    lse_all = torch.logsumexp(scores.flatten(), 0)
    direct = lse_all - torch.logsumexp(picked, 0)
    # near saturation write the loss as -log(1 - q), q = mass off the true classes,
    # so it keeps resolving values far below float epsilon
    other = scores.scatter(1, classes[:, None], float("-inf"))
    q = torch.exp(torch.logsumexp(other.flatten(), 0) - lse_all)
    tail = -torch.log1p(-q.clamp(max=0.5))
    return torch.where(q < 0.5, tail, direct)


def train_selector(clips, cfg: SelectorConfig, seed: int = 0, on_batch=None):
    """Fit a selector on ``clips``: a list of ``(clip_id, frames (F,96,96,3) uint8, classes (F,))``.

    ``on_batch(step, clip_ids)`` is called with the ids used at every step.
    Returns ``(net, loss_trace)``.
    """
    if not clips:
        raise ValueError("selector training set is empty")
    torch.manual_seed(seed)
    net = SelectorNet(cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(seed)
    tensors = [(cid, _to_tensor(f), torch.as_tensor(c, dtype=torch.long)) for cid, f, c in clips]
    order: list[int] = []
    trace = []
    net.train()
    for step in range(cfg.steps):
        batch = []
        while len(batch) < min(cfg.clips_per_step, len(tensors)):
            if not order:
                order = list(rng.permutation(len(tensors)))
            batch.append(tensors[order.pop()])
        if on_batch is not None:
            on_batch(step, [b[0] for b in batch])
        x = torch.cat([b[1] for b in batch])
        scores, _ = net(x)
        loss = 0.0
        start = 0
        for _, frames, classes in batch:
            n = frames.shape[0]
            loss = loss + selector_loss(scores[start:start + n], classes)
            start += n
        loss = loss / len(batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
    net.eval()
    return net, trace


def select_keyframes(frames, net: SelectorNet, k: int = 10) -> tuple[FrameImportance, np.ndarray]:
    """Importance of every frame of one clip; also returns ``(F, R, L)`` attention weights."""
    net.eval()
    with torch.no_grad():
        scores, weights = net(_to_tensor(frames))
    return joint_softmax(scores.double().numpy().T, k), weights.double().numpy()


def save_selector(net: SelectorNet, path, seed: int) -> None:
    torch.save({"version": CHECKPOINT_VERSION, "config": asdict(net.cfg), "seed": seed,
                "state_dict": net.state_dict()}, path)


def load_selector(path) -> SelectorNet:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"incompatible selector checkpoint version {ckpt.get('version')}")
    net = SelectorNet(SelectorConfig(**ckpt["config"]))
    net.load_state_dict(ckpt["state_dict"])
    net.eval()
    return net


# --- heatmaps ---------------------------------------------------------------


def attention_heat(weights, grid_shape=(6, 6), size: tuple[int, int] = (96, 96), sigma: float = 4.0) -> np.ndarray:
    """Max-over-heads attention upsampled to ``size`` (w, h), smoothed and scaled to [0, 1]."""
    w = np.asarray(weights, dtype=np.float32).reshape(-1, *grid_shape).max(axis=0)
    heat = cv2.resize(w, size, interpolation=cv2.INTER_LINEAR)
    heat = cv2.GaussianBlur(heat, (0, 0), sigma)
    lo, hi = float(heat.min()), float(heat.max())
    if hi - lo < 1e-12:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


def render_heatmap(frame: np.ndarray, weights: AttentionWeights | np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend a JET-colored attention heat layer over an RGB uint8 frame."""
    if isinstance(weights, AttentionWeights):
        grid, weights = weights.grid_shape, weights.weights
    else:
        grid = (6, 6)
    h, w = frame.shape[:2]
    heat = attention_heat(weights, grid, (w, h))
    color = cv2.applyColorMap(np.round(heat * 255).astype(np.uint8), cv2.COLORMAP_JET)
    color = cv2.cvtColor(color, cv2.COLOR_BGR2RGB).astype(np.float32)
    a = (alpha * heat)[..., None]
    out = (1 - a) * frame.astype(np.float32) + a * color
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def write_manifest(path: Path, clip_id: str, imp: FrameImportance) -> None:
    path.write_text(json.dumps({
        "clip_id": clip_id,
        "selected": [int(i) for i in imp.selected],
        "marginal": [float(m) for m in imp.marginal],
    }))


def read_manifest(path: Path) -> dict:
    return json.loads(Path(path).read_text())

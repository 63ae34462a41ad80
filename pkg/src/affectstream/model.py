"""Three-stream regression network: face RGB, eye flow and mouth flow.

Each stream encodes every key frame with five Conv-BN-ReLU-MaxPool blocks.
The three block-5 maps are averaged per frame, globally average-pooled, and
summarized over time by the Gaussian filter bank.  Every key frame's fused
vector, concatenated with that summary, goes through two FC blocks and a
2-unit sigmoid giving (valence, arousal) in (0, 1).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .dataset import denormalize_label
from .metrics import ccc_loss_torch
from .temporal import TemporalAttentionFilters

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STREAMS = ("face", "eyes", "mouth")


@dataclass
class ModelConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    dropout: float = 0.3
    n_filters: int = 3
    n: int = 4
    fc: tuple[int, int] = (256, 128)
    k: int = 10

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.fc = tuple(int(c) for c in self.fc)
        if len(self.channels) != 5 or min(self.channels) < 1:
            raise ValueError(f"need five positive block widths, got {self.channels}")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"block widths must be nondecreasing, got {self.channels}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if len(self.fc) != 2 or min(self.fc) < 1:
            raise ValueError(f"need two positive FC widths, got {self.fc}")
        if self.n_filters < 1 or self.n < 1 or self.k < 2:
            raise ValueError("n_filters and n must be >= 1 and k >= 2")


def _encoder(channels) -> nn.Sequential:
    layers, c_in = [], 3
    for c_out in channels:
        layers += [nn.Conv2d(c_in, c_out, 3, padding=1, bias=False), nn.BatchNorm2d(c_out),
                   nn.ReLU(inplace=True), nn.MaxPool2d(2)]
        c_in = c_out
    return nn.Sequential(*layers)


class AffectNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoders = nn.ModuleList(_encoder(cfg.channels) for _ in STREAMS)
        self.filters = TemporalAttentionFilters(cfg.n_filters, cfg.n, t_nominal=cfg.k)
        d = cfg.channels[-1]
        self.head = nn.Sequential(
            nn.Linear(d * (1 + cfg.n_filters * cfg.n), cfg.fc[0]), nn.ReLU(), nn.Dropout(cfg.dropout),
            nn.Linear(cfg.fc[0], cfg.fc[1]), nn.ReLU(), nn.Dropout(cfg.dropout),
            nn.Linear(cfg.fc[1], 2),
        )
        for m in self.head:
            if isinstance(m, nn.Linear):
                nn.init.zeros_(m.bias)

    def block5(self, face, eyes, mouth) -> torch.Tensor:
        """Fused block-5 maps ``(B*K, C, h, w)`` from three ``(B, K, 3, 96, 96)`` inputs."""
        maps = [enc(x.flatten(0, 1)) for enc, x in zip(self.encoders, (face, eyes, mouth))]
        return torch.stack(maps).mean(dim=0)

    def forward(self, face, eyes, mouth) -> torch.Tensor:
        """``(B, K, 2)`` predictions in (0, 1)."""
        if not (face.shape == eyes.shape == mouth.shape) or face.dim() != 5 or face.shape[2] != 3:
            raise ValueError(f"stream shapes differ or are not (B, K, 3, H, W): "
                             f"{tuple(face.shape)}, {tuple(eyes.shape)}, {tuple(mouth.shape)}")
        b, k = face.shape[:2]
        feats = self.block5(face, eyes, mouth).mean(dim=(2, 3)).reshape(b, k, -1)
        summary = self.filters(feats).flatten(1)
        x = torch.cat([feats, summary[:, None, :].expand(b, k, summary.shape[1])], dim=-1)
        out = torch.sigmoid(self.head(x))
        if not torch.all(torch.isfinite(out)):
            raise FloatingPointError("non-finite activations in forward pass")
        return out


def init_params(seed: int, cfg: ModelConfig | None = None) -> AffectNet:
    torch.manual_seed(seed)
    return AffectNet(cfg or ModelConfig())


def to_input(frames: np.ndarray) -> torch.Tensor:
    """``(..., K, 96, 96, 3)`` uint8 -> ``(..., K, 3, 96, 96)`` float in [0, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(frames)).float() / 255.0
    return x.movedim(-1, -3)


@dataclass
class AffectPrediction:
    clip_id: str
    frame_indices: list[int]
    values: np.ndarray  # K x 2, normalized (valence, arousal)

    @property
    def levels(self) -> np.ndarray:
        return denormalize_label(self.values)


def training_step(model: AffectNet, optimizer: torch.optim.Optimizer, batch: dict) -> float | None:
    """One update on ``batch`` (keys face, eyes, mouth, labels); returns the loss.

    Batches whose labels are constant in both dimensions carry no CCC signal
    and are skipped with a warning (returns ``None``).
    """
    labels = batch["labels"]
    flat = labels.reshape(-1, 2)
    if torch.all(flat == flat[0]):
        log.warning("skipping batch with constant labels in both dimensions")
        return None
    model.train()
    pred = model(batch["face"], batch["eyes"], batch["mouth"])
    loss = ccc_loss_torch(pred, labels)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


@torch.no_grad()
def predict_clip(model: AffectNet, clip_id: str, frame_indices, face, eyes, mouth) -> AffectPrediction:
    """Eval-mode prediction for one clip's ``(K, 96, 96, 3)`` uint8 stream arrays."""
    model.eval()
    out = model(to_input(face)[None], to_input(eyes)[None], to_input(mouth)[None])[0]
    return AffectPrediction(clip_id, [int(i) for i in frame_indices], out.double().numpy())


def save_checkpoint(path, model: AffectNet, seed: int, **extra) -> None:
    torch.save({"version": CHECKPOINT_VERSION, "config": asdict(model.cfg), "seed": seed,
                "state_dict": model.state_dict(), **extra}, path)


def load_checkpoint(path) -> tuple[AffectNet, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"incompatible checkpoint version {ckpt.get('version')} "
                         f"(expected {CHECKPOINT_VERSION})")
    model = AffectNet(ModelConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt

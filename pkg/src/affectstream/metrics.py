"""Concordance correlation, CCC loss and MSE for valence/arousal series."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

LOSS_EPS = 1e-8


class DegenerateSeriesError(ValueError):
    """Raised in strict mode when the CCC denominator is exactly zero."""


def _as_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"series length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("series must have at least 2 points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("series contain non-finite values")
    return x, y


def ccc(x, y, eps: float = 0.0) -> float:
    """Concordance correlation coefficient with population (1/n) moments.

    ``eps=0`` is the strict metric mode and raises on a zero denominator;
    the loss path passes ``eps=LOSS_EPS``.
    """
    x, y = _as_pair(x, y)
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    sxy = np.mean(dx * dy)
    denom = np.mean(dx * dx) + np.mean(dy * dy) + (mx - my) ** 2 + eps
    if denom == 0.0:
        raise DegenerateSeriesError("both series constant with equal means")
    return float(2.0 * sxy / denom)


def mse(x, y) -> float:
    x, y = _as_pair(x, y)
    return float(np.mean((x - y) ** 2))


def ccc_loss(pred_va, true_va) -> float:
    """``1 - (ccc_arousal + ccc_valence) / 2`` on ``(n, 2)`` arrays ordered (valence, arousal)."""
    pred_va = np.asarray(pred_va, dtype=np.float64).reshape(-1, 2)
    true_va = np.asarray(true_va, dtype=np.float64).reshape(-1, 2)
    rho_v = ccc(pred_va[:, 0], true_va[:, 0], eps=LOSS_EPS)
    rho_a = ccc(pred_va[:, 1], true_va[:, 1], eps=LOSS_EPS)
    return 1.0 - (rho_a + rho_v) / 2.0


def ccc_torch(x: torch.Tensor, y: torch.Tensor, eps: float = LOSS_EPS) -> torch.Tensor:
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    sxy = (dx * dy).mean()
    return 2.0 * sxy / ((dx * dx).mean() + (dy * dy).mean() + (mx - my) ** 2 + eps)


def ccc_loss_torch(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Differentiable CCC loss over all frames of ``(..., 2)`` tensors, flattened per dimension."""
    pred = pred.reshape(-1, 2)
    target = target.reshape(-1, 2)
    rho_v = ccc_torch(pred[:, 0], target[:, 0])
    rho_a = ccc_torch(pred[:, 1], target[:, 1])
    return 1.0 - (rho_a + rho_v) / 2.0


@dataclass
class ClipMetrics:
    clip_id: str
    n_frames: int
    ccc_valence: float | None
    ccc_arousal: float | None
    mse_valence: float
    mse_arousal: float


@dataclass
class MetricReport:
    ccc_valence: float
    ccc_arousal: float
    mse_valence: float
    mse_arousal: float
    n_frames: int
    per_clip: list[ClipMetrics] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        raw = json.loads(text)
        raw["per_clip"] = [ClipMetrics(**c) for c in raw["per_clip"]]
        return cls(**raw)

    def table(self) -> str:
        lines = [
            f"{'':<12}{'CCC':>10}{'MSE':>10}",
            f"{'valence':<12}{self.ccc_valence:>10.4f}{self.mse_valence:>10.4f}",
            f"{'arousal':<12}{self.ccc_arousal:>10.4f}{self.mse_arousal:>10.4f}",
            f"frames: {self.n_frames}  clips: {len(self.per_clip)}",
            "",
            f"{'clip':<16}{'n':>4}{'ccc_v':>9}{'ccc_a':>9}{'mse_v':>9}{'mse_a':>9}",
        ]

        def fmt(v):
            return f"{v:>9.3f}" if v is not None else f"{'n/a':>9}"

        for c in self.per_clip:
            lines.append(
                f"{c.clip_id:<16}{c.n_frames:>4}{fmt(c.ccc_valence)}{fmt(c.ccc_arousal)}"
                f"{fmt(c.mse_valence)}{fmt(c.mse_arousal)}"
            )
        return "\n".join(lines)


def _ccc_or_none(x, y):
    try:
        return ccc(x, y)
    except DegenerateSeriesError:
        return None


def build_report(clip_ids, preds, targets) -> MetricReport:
    """Aggregate per-clip ``(n_i, 2)`` prediction/target arrays into a report.

    Headline CCC/MSE are computed on the concatenation of every clip's frames.
    Per-clip CCC is ``None`` when a clip's series is degenerate.
    """
    preds = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in preds]
    targets = [np.asarray(t, dtype=np.float64).reshape(-1, 2) for t in targets]
    per_clip = []
    for cid, p, t in zip(clip_ids, preds, targets):
        per_clip.append(
            ClipMetrics(
                clip_id=cid,
                n_frames=len(p),
                ccc_valence=_ccc_or_none(p[:, 0], t[:, 0]),
                ccc_arousal=_ccc_or_none(p[:, 1], t[:, 1]),
                mse_valence=mse(p[:, 0], t[:, 0]),
                mse_arousal=mse(p[:, 1], t[:, 1]),
            )
        )
    allp = np.concatenate(preds)
    allt = np.concatenate(targets)
    return MetricReport(
        ccc_valence=ccc(allp[:, 0], allt[:, 0]),
        ccc_arousal=ccc(allp[:, 1], allt[:, 1]),
        mse_valence=mse(allp[:, 0], allt[:, 0]),
        mse_arousal=mse(allp[:, 1], allt[:, 1]),
        n_frames=int(len(allp)),
        per_clip=per_clip,
    )

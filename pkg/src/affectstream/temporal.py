"""Temporal Gaussian attention filters.

A filter is ``N`` Gaussians laid out symmetrically around a center ``g`` with
spacing ``delta`` and common width ``sigma``, all measured in frames.  The
three quantities are learned through unconstrained parameters::

    g     = (T - 1) * logistic(g_hat)
    delta = exp(d_hat)
    sigma = exp(s_hat)

so the center always stays inside the clip and the stride/width stay
positive.  Row ``n`` of the N x T sampling matrix is the Gaussian centered at
``mu_n = g + (n - (N + 1) / 2) * delta`` evaluated on the integer taps
``t = 0..T-1`` and normalized to sum to one.

The numpy functions here are float64 reference implementations with
hand-derived gradients; :class:`TemporalAttentionFilters` is the torch layer
used inside the network.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

ROW_SUM_FLOOR = 1e-12


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class FilterParams:
    g_hat: float
    d_hat: float
    s_hat: float
    n: int = 4

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a filter needs at least one Gaussian")
        if not all(math.isfinite(v) for v in (self.g_hat, self.d_hat, self.s_hat)):
            raise ValueError("filter parameters must be finite")


@dataclass
class FilterBankParams:
    filters: list[FilterParams] = field(default_factory=list)

    def __post_init__(self):
        if not self.filters:
            raise ValueError("filter bank is empty")
        if len({f.n for f in self.filters}) != 1:
            raise ValueError("all filters in a bank share the same N")

    @property
    def n(self) -> int:
        return self.filters[0].n


@dataclass
class SamplingMatrix:
    matrix: np.ndarray
    g: float
    delta: float
    sigma: float


def default_bank(n_filters: int = 3, n: int = 4, t_nominal: int = 10) -> FilterBankParams:
    """Filters centered on the clip whose Gaussians span ``t_nominal`` frames evenly."""
    d_hat = math.log((t_nominal - 1) / (n - 1)) if n > 1 else 0.0
    return FilterBankParams([FilterParams(0.0, d_hat, 0.0, n) for _ in range(n_filters)])


def _geometry(p: FilterParams, T: int):
    lg = _logistic(p.g_hat)
    g = (T - 1) * lg
    delta = math.exp(p.d_hat)
    sigma = math.exp(p.s_hat)
    offsets = np.arange(1, p.n + 1, dtype=np.float64) - (p.n + 1) / 2.0
    mu = g + offsets * delta
    return lg, g, delta, sigma, offsets, mu


def _rows(mu: np.ndarray, sigma: float, T: int):
    t = np.arange(T, dtype=np.float64)
    diff = t[None, :] - mu[:, None]
    z = -(diff**2) / (2.0 * sigma**2)
    # shifting by the row max leaves the normalized row unchanged and keeps
    # at least one entry at exp(0) even when sigma is far below one frame
    w = np.exp(z - z.max(axis=1, keepdims=True))
    w /= np.maximum(w.sum(axis=1, keepdims=True), ROW_SUM_FLOOR)
    return w, diff


def build_sampling_matrix(p: FilterParams, T: int) -> SamplingMatrix:
    if T < 1:
        raise ValueError("sequence length must be >= 1")
    _, g, delta, sigma, _, mu = _geometry(p, T)
    w, _ = _rows(mu, sigma, T)
    return SamplingMatrix(matrix=w, g=g, delta=delta, sigma=sigma)


def apply_filter_bank(features, bank: FilterBankParams) -> np.ndarray:
    """Attend a ``T x D`` feature sequence; returns ``(F_bank * N) x D`` in filter order."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"expected a T x D feature matrix, got shape {features.shape}")
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite values")
    T = features.shape[0]
    return np.concatenate([build_sampling_matrix(f, T).matrix @ features for f in bank.filters])


def filter_gradients(p: FilterParams, T: int, upstream) -> tuple[float, float, float]:
    """Gradient of ``sum(upstream * W)`` wrt ``(g_hat, d_hat, s_hat)``.

    ``upstream`` is the N x T sensitivity of a scalar loss to the sampling matrix.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (p.n, T):
        raise ValueError(f"upstream must be {(p.n, T)}, got {upstream.shape}")
    lg, _, delta, sigma, offsets, mu = _geometry(p, T)
    w, diff = _rows(mu, sigma, T)

    # row-wise softmax backward: dL/dz = W * (G - <W, G>_row)
    dz = w * (upstream - (w * upstream).sum(axis=1, keepdims=True))
    d_mu = (dz * diff).sum(axis=1) / sigma**2
    d_sigma = (dz * diff**2).sum() / sigma**3

    d_g = d_mu.sum()
    d_delta = (d_mu * offsets).sum()
    return (
        float(d_g * (T - 1) * lg * (1.0 - lg)),
        float(d_delta * delta),
        float(d_sigma * sigma),
    )


def sampling_rows_csv(bank: FilterBankParams, T: int) -> str:
    """CSV dump of every filter's sampling rows, one line per (filter, gaussian)."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["filter", "gaussian", "g", "delta", "sigma"] + [f"t{t}" for t in range(T)])
    for i, f in enumerate(bank.filters):
        sm = build_sampling_matrix(f, T)
        for n, row in enumerate(sm.matrix):
            writer.writerow([i, n, f"{sm.g:.6g}", f"{sm.delta:.6g}", f"{sm.sigma:.6g}"]
                            + [f"{v:.6g}" for v in row])
    return buf.getvalue()


class TemporalAttentionFilters(nn.Module):
    """Shared static filter bank applied to ``(B, T, D)`` sequences -> ``(B, F*N, D)``."""

    def __init__(self, n_filters: int = 3, n: int = 4, t_nominal: int = 10):
        super().__init__()
        bank = default_bank(n_filters, n, t_nominal)
        self.n = n
        self.g_hat = nn.Parameter(torch.tensor([f.g_hat for f in bank.filters]))
        self.d_hat = nn.Parameter(torch.tensor([f.d_hat for f in bank.filters]))
        self.s_hat = nn.Parameter(torch.tensor([f.s_hat for f in bank.filters]))

    @property
    def n_filters(self) -> int:
        return self.g_hat.numel()

    def matrices(self, T: int) -> torch.Tensor:
        """``(F, N, T)`` row-normalized sampling matrices."""
        dtype = self.g_hat.dtype
        g = (T - 1) * torch.sigmoid(self.g_hat)
        delta = torch.exp(self.d_hat)
        sigma = torch.exp(self.s_hat)
        offsets = torch.arange(1, self.n + 1, dtype=dtype) - (self.n + 1) / 2.0
        mu = g[:, None] + offsets[None, :] * delta[:, None]
        t = torch.arange(T, dtype=dtype)
        z = -((t[None, None, :] - mu[:, :, None]) ** 2) / (2.0 * sigma[:, None, None] ** 2)
        return torch.softmax(z, dim=-1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        w = self.matrices(features.shape[1])
        out = torch.einsum("fnt,btd->bfnd", w, features)
        return out.reshape(features.shape[0], -1, features.shape[2])

    def to_bank(self) -> FilterBankParams:
        return FilterBankParams([
            FilterParams(float(g), float(d), float(s), self.n)
            for g, d, s in zip(self.g_hat.detach(), self.d_hat.detach(), self.s_hat.detach())
        ])

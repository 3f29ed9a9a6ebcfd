"""Temporal anomaly self-attention with position encoding confined to Q/K/sigma."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .assoc import gaussian_kernel_rows, rescale_rows, row_softmax, sym_kl
from .errors import NumericalError

SIGMA_MIN = 0.1


@dataclass
class TemporalAssociations:
    """Per-layer temporal distributions, each shaped ``(B, H, N, N)``; sigma is ``(B, H, N)``."""

    series: torch.Tensor
    prior: torch.Tensor
    sigma: torch.Tensor


def check_finite(name: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {name}")
    return t


def apply_dpe(x: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Return ``x + table``; ``x`` is left untouched for the value branch."""
    if x.shape[-2:] != table.shape[-2:]:
        raise ValueError(f"shape mismatch: input {tuple(x.shape)} vs table {tuple(table.shape)}")
    return x + table.to(x.dtype)


def gaussian_prior(sigma: torch.Tensor, n: int) -> torch.Tensor:
    """Row-normalized Gaussian prior association for bandwidths ``sigma[..., n]``."""
    sigma = torch.as_tensor(sigma)
    if not torch.is_floating_point(sigma):
        sigma = sigma.to(torch.float64)
    if (sigma <= 0).any():
        raise ValueError("bandwidths must be positive")
    if sigma.shape[-1] != n:
        raise ValueError(f"expected {n} bandwidths per row, got {sigma.shape[-1]}")
    return rescale_rows(gaussian_kernel_rows(sigma, n))


class TemporalAnomalyAttention(nn.Module):
    """Multi-head anomaly attention over the time axis.

    With ``use_dpe`` the position table enters only the query, key and bandwidth
    projections; values are computed from the raw layer input.
    """

    def __init__(self, d_model: int, n_heads: int, window: int, use_dpe: bool = True,
                 sigma_min: float = SIGMA_MIN, sigma_max: Optional[float] = None):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.window = window
        self.use_dpe = use_dpe
        self.sigma_min = sigma_min
        self.sigma_max = window / 2.0 if sigma_max is None else sigma_max
        if self.sigma_max <= self.sigma_min:
            self.sigma_max = self.sigma_min + 1.0
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.bandwidth = nn.Linear(d_model, n_heads)
        self.out = nn.Linear(d_model, d_model)

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        b, n, _ = t.shape
        return t.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, x: torch.Tensor, table: Optional[torch.Tensor] = None):
        b, n, _ = x.shape
        x_hat = apply_dpe(x, table) if (self.use_dpe and table is not None) else x
        q = self._heads(self.query(x_hat))
        k = self._heads(self.key(x_hat))
        v = self._heads(self.value(x))
        logits = check_finite("attention logits", q @ k.transpose(-1, -2) / math.sqrt(self.d_head))
        series = row_softmax(logits)
        raw_sigma = check_finite("bandwidth projection", self.bandwidth(x_hat)).transpose(1, 2)
        sigma = self.sigma_min + (self.sigma_max - self.sigma_min) * torch.sigmoid(raw_sigma)
        prior = check_finite("gaussian prior", gaussian_prior(sigma, n))
        mixed = (series @ v).transpose(1, 2).reshape(b, n, self.d_model)
        out = check_finite("temporal reconstruction", self.out(mixed))
        return out, TemporalAssociations(series=series, prior=prior, sigma=sigma)


def assdis_t(priors: Sequence[torch.Tensor], series: Sequence[torch.Tensor]) -> torch.Tensor:
    """Temporal association discrepancy, shape ``(B, N)``.

    Heads are averaged within each layer, then layers are averaged. Pass detached
    tensors to stop gradients through either side.
    """
    if len(priors) != len(series) or not priors:
        raise ValueError(f"layer count mismatch: {len(priors)} priors vs {len(series)} series")
    per_layer = [sym_kl(p, s).mean(dim=-2) for p, s in zip(priors, series)]
    return torch.stack(per_layer).mean(dim=0)


def sample_partners(batch: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Draw, for each instance ``b``, a uniformly random index ``b' != b``."""
    if batch < 2:
        raise ValueError("triplet regularization needs a batch of at least 2 windows")
    shift = torch.randint(1, batch, (batch,), generator=generator)
    return (torch.arange(batch) + shift) % batch


def triplet_reg(series: Sequence[torch.Tensor], margin: float = 0.1,
                partners: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Hinge loss asking heads of one window to agree more than the same head across windows.

    ``series`` holds one ``(B, H, N, N)`` attention tensor per layer. ``partners[b]``
    is the contrasting instance for ``b``; sampled if not given.
    """
    b, h = series[0].shape[:2]
    if b < 2:
        raise ValueError("triplet regularization needs a batch of at least 2 windows")
    if h < 2:
        raise ValueError("triplet regularization needs at least 2 heads")
    if partners is None:
        partners = sample_partners(b, generator)
    partners = torch.as_tensor(partners, dtype=torch.long)
    if (partners == torch.arange(b)).any():
        raise ValueError("partner index must differ from the anchor index")
    eye = torch.eye(h, dtype=torch.bool)
    losses = []
    for s in series:
        agg = s.mean(dim=-2)                                    # (B, H, N)
        pair = sym_kl(agg.unsqueeze(2), agg.unsqueeze(1))       # (B, H, H)
        intra = pair.masked_fill(eye, float("inf")).amin(dim=-1)
        inter = sym_kl(agg, agg[partners])                      # (B, H)
        losses.append(torch.relu(margin + intra - inter))
    return torch.stack(losses).mean()

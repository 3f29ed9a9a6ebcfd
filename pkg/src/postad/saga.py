"""Spatial anomaly graph attention over sensor channels with a learnable adjacency prior."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .assoc import row_softmax, sym_kl
from .errors import NumericalError
from .tasa import check_finite

LEAKY_SLOPE = 0.2
INIT_LOGIT = 2.0
TAU_FLOOR = 1e-6


@dataclass
class SpatialAssociations:
    """Per-layer spatial distributions, each ``(B, D0, D0)``; tau is ``(B, D0)``."""

    observation: torch.Tensor
    posterior: torch.Tensor
    prior: torch.Tensor
    tau: torch.Tensor


def channel_similarity(series) -> np.ndarray:
    """Absolute Pearson correlation between channel columns; constant channels score 0."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a (T, D0) series with T >= 2")
    xc = x - x.mean(axis=0)
    norm = np.sqrt((xc ** 2).sum(axis=0))
    live = norm > 0
    sim = np.zeros((x.shape[1], x.shape[1]))
    if live.any():
        z = xc[:, live] / norm[live]
        sim[np.ix_(live, live)] = np.abs(z.T @ z)
    return sim


def knn_init(series, k: int, c0: float = INIT_LOGIT) -> np.ndarray:
    """Adjacency logits from a channel-wise kNN graph: ``+c0`` on self and the k
    most correlated channels of each row, ``-c0`` elsewhere."""
    sim = channel_similarity(series)
    d0 = sim.shape[0]
    if not 1 <= k < d0:
        raise ValueError(f"k must lie in [1, {d0 - 1}], got {k}")
    logits = np.full((d0, d0), -c0)
    for i in range(d0):
        others = [j for j in range(d0) if j != i]
        # stable sort keeps the lower channel index on ties
        order = sorted(others, key=lambda j: -sim[i, j])
        logits[i, order[:k]] = c0
        logits[i, i] = c0
    return logits


def identity_init(d0: int, c0: float = INIT_LOGIT) -> np.ndarray:
    logits = np.full((d0, d0), -c0)
    np.fill_diagonal(logits, c0)
    return logits


def posterior(g_tilde: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Reweight observed attention by the Bernoulli prior and renormalize each row."""
    weighted = g_tilde * attention
    z = weighted.sum(dim=-1, keepdim=True)
    if (z <= 0).any():
        raise NumericalError("posterior row has zero partition factor")
    return weighted / z


class SpatialAnomalyGraphAttention(nn.Module):
    """Single-head graph attention across the D0 raw channels of one window."""

    def __init__(self, d_model: int, n_channels: int, window: int, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.n_channels = n_channels
        self.window = window
        self.slope = slope
        self.to_channels = nn.Linear(d_model, n_channels, bias=False)
        self.attn_vector = nn.Parameter(torch.empty(2 * window))
        self.temperature = nn.Linear(window, 1)
        self.from_channels = nn.Linear(n_channels, d_model, bias=False)
        self.graph_logits = nn.Parameter(torch.from_numpy(identity_init(n_channels)).float())
        nn.init.normal_(self.attn_vector, std=(2.0 / (2 * window)) ** 0.5)

    def set_graph(self, logits) -> None:
        with torch.no_grad():
            self.graph_logits.copy_(torch.as_tensor(np.asarray(logits)))

    def graph_tilde(self) -> torch.Tensor:
        return torch.sigmoid(self.graph_logits)

    def forward(self, x: torch.Tensor):
        h = self.to_channels(x).transpose(1, 2)                  # (B, D0, N)
        left = h @ self.attn_vector[: self.window]
        right = h @ self.attn_vector[self.window:]
        e = F.leaky_relu(left.unsqueeze(-1) + right.unsqueeze(-2), self.slope)
        attention = row_softmax(check_finite("spatial attention logits", e))
        post = posterior(self.graph_tilde(), attention)
        out = check_finite("spatial reconstruction", self.from_channels((post @ h).transpose(1, 2)))
        tau = torch.sigmoid(self.temperature(h)).squeeze(-1).clamp_min(TAU_FLOOR)
        prior = row_softmax(self.graph_logits.expand_as(attention), tau)
        return out, SpatialAssociations(observation=attention, posterior=post, prior=prior, tau=tau)


def assdis_s(priors: Sequence[torch.Tensor], observations: Sequence[torch.Tensor]) -> torch.Tensor:
    """Spatial association discrepancy, shape ``(B, D0)``, averaged over layers."""
    if len(priors) != len(observations) or not priors:
        raise ValueError(f"layer count mismatch: {len(priors)} priors vs {len(observations)} observations")
    return torch.stack([sym_kl(g, a) for g, a in zip(priors, observations)]).mean(dim=0)

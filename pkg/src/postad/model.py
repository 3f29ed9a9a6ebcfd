"""Layer stack: spatial graph attention, temporal anomaly attention and feed-forward,
each wrapped in a residual connection and layer normalization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .assoc import sinusoidal_table
from .config import TrainConfig
from .saga import SpatialAnomalyGraphAttention, SpatialAssociations, identity_init, knn_init
from .tasa import TemporalAnomalyAttention, TemporalAssociations

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelOutput:
    reconstruction: torch.Tensor
    temporal: list[TemporalAssociations] = field(default_factory=list)
    spatial: list[SpatialAssociations] = field(default_factory=list)

    @property
    def series(self):
        return [t.series for t in self.temporal]

    @property
    def priors(self):
        return [t.prior for t in self.temporal]

    @property
    def observations(self):
        return [s.observation for s in self.spatial]

    @property
    def graph_priors(self):
        return [s.prior for s in self.spatial]


class POSTLayer(nn.Module):
    def __init__(self, d_model, n_heads, n_channels, window, d_ff, use_saga=True, use_dpe=True):
        super().__init__()
        self.saga = SpatialAnomalyGraphAttention(d_model, n_channels, window) if use_saga else None
        self.norm_spatial = nn.LayerNorm(d_model) if use_saga else None
        self.tasa = TemporalAnomalyAttention(d_model, n_heads, window, use_dpe=use_dpe)
        self.norm_temporal = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))
        self.norm_ff = nn.LayerNorm(d_model)

    def forward(self, x, table):
        spatial = None
        if self.saga is not None:
            xs, spatial = self.saga(x)
            x = self.norm_spatial(x + xs)
        xt, temporal = self.tasa(x, table)
        x = self.norm_temporal(x + xt)
        x = self.norm_ff(x + self.ff(x))
        return x, temporal, spatial


class POSTModel(nn.Module):
    """Reconstruction network returning the output plus every layer's associations."""

    def __init__(self, n_channels: int, d_model: int = 512, n_layers: int = 3, n_heads: int = 8,
                 window: int = 100, d_ff: Optional[int] = None, use_saga: bool = True,
                 ape_on_input: bool = False):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_channels = n_channels
        self.d_model = d_model
        self.window = window
        self.use_saga = use_saga
        self.ape_on_input = ape_on_input
        self.embed = nn.Linear(n_channels, d_model)
        self.layers = nn.ModuleList(
            POSTLayer(d_model, n_heads, n_channels, window, d_ff or d_model,
                      use_saga=use_saga, use_dpe=not ape_on_input)
            for _ in range(n_layers)
        )
        self.head = nn.Linear(d_model, n_channels)
        self.register_buffer("pos_table", sinusoidal_table(window, d_model, torch.float32), persistent=False)

    @property
    def saga_layers(self) -> list[SpatialAnomalyGraphAttention]:
        return [layer.saga for layer in self.layers if layer.saga is not None]

    def graph_tildes(self) -> list[torch.Tensor]:
        return [s.graph_tilde() for s in self.saga_layers]

    def set_graphs(self, logits) -> None:
        for saga in self.saga_layers:
            saga.set_graph(logits)

    def forward(self, windows: torch.Tensor, table: Optional[torch.Tensor] = None) -> ModelOutput:
        if windows.dim() == 2:
            windows = windows.unsqueeze(0)
        if windows.shape[-1] != self.n_channels or windows.shape[-2] != self.window:
            raise ValueError(f"expected windows shaped (B, {self.window}, {self.n_channels}), "
                             f"got {tuple(windows.shape)}")
        table = self.pos_table if table is None else table
        x = self.embed(windows)
        if self.ape_on_input:
            x = x + table
        out = ModelOutput(reconstruction=None)
        for layer in self.layers:
            x, temporal, spatial = layer(x, table)
            out.temporal.append(temporal)
            if spatial is not None:
                out.spatial.append(spatial)
        out.reconstruction = self.head(x)
        return out


def build_model(n_channels: int, config: TrainConfig, train_series=None) -> POSTModel:
    """Construct a model from ``config`` and initialize its graph priors.

    The adjacency logits come from a kNN graph over ``train_series`` unless
    ``config.identity_init`` is set or no series is supplied.
    """
    config.validate()
    if n_channels < 1:
        raise ValueError("need at least one channel")
    torch.manual_seed(config.seed)
    model = POSTModel(n_channels, config.d_model, config.n_layers, config.n_heads, config.window,
                      d_ff=config.d_ff, use_saga=not config.disable_saga,
                      ape_on_input=config.ape_on_input)
    if model.use_saga:
        if config.identity_init or train_series is None or n_channels < 2:
            logits = identity_init(n_channels, config.init_logit)
        else:
            k = max(1, min(config.knn_k, n_channels - 1))
            logits = knn_init(np.asarray(train_series), k, config.init_logit)
        model.set_graphs(logits)
    return model.to(DTYPES[config.dtype])

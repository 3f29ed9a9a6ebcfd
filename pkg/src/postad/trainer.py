"""Alternating minimax training.

Each epoch runs one graph phase (adjacency logits only, followed by the
proximal sparsity step) and then, for every batch, ``inner_iters`` rounds of a
minimize phase (network weights) and a maximize phase (network weights plus
the bandwidth and temperature projections). Parameters outside a phase's
update set are frozen while its loss is built, so they receive no gradient.
"""

from __future__ import annotations

import copy
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from .config import TrainConfig
from .errors import DataError, NumericalError
from .model import DTYPES, ModelOutput, POSTModel, build_model
from .saga import assdis_s
from .structreg import prox_sigmoid_l1, smoothness_loss
from .tasa import assdis_t, sample_partners, triplet_reg

logger = logging.getLogger(__name__)

GRAPH = "graph"
MINIMIZE = "minimize"
MAXIMIZE = "maximize"
PHASES = (GRAPH, MINIMIZE, MAXIMIZE)


def loss_reconstruction(window, reconstruction) -> torch.Tensor:
    """Squared Frobenius norm of the reconstruction residual."""
    window = torch.as_tensor(window)
    reconstruction = torch.as_tensor(reconstruction)
    if window.shape != reconstruction.shape:
        raise ValueError(f"shape mismatch: {tuple(window.shape)} vs {tuple(reconstruction.shape)}")
    return ((reconstruction - window) ** 2).sum()


def parameter_roles(model: POSTModel) -> dict[str, str]:
    """Map parameter name to ``graph``, ``prior`` (bandwidth/temperature) or ``network``."""
    roles = {}
    for name, _ in model.named_parameters():
        if name.endswith("graph_logits"):
            roles[name] = "graph"
        elif ".tasa.bandwidth." in name or ".saga.temperature." in name:
            roles[name] = "prior"
        else:
            roles[name] = "network"
    return roles


def phase_update_set(model: POSTModel, phase: str) -> set[str]:
    roles = parameter_roles(model)
    wanted = {GRAPH: {"graph"}, MINIMIZE: {"network"}, MAXIMIZE: {"network", "prior"}}[phase]
    return {name for name, role in roles.items() if role in wanted}


@contextmanager
def trainable_only(model: torch.nn.Module, names: set[str]):
    saved = {name: p.requires_grad for name, p in model.named_parameters()}
    try:
        for name, p in model.named_parameters():
            p.requires_grad_(name in names)
        yield
    finally:
        for name, p in model.named_parameters():
            p.requires_grad_(saved[name])


def _rec(batch, out: ModelOutput, config: TrainConfig) -> torch.Tensor:
    sq = (out.reconstruction - batch) ** 2
    if config.rec_reduction == "mean":
        return sq.mean()
    return sq.sum(dim=(-1, -2)).mean()


def _spatial_on(model: POSTModel, config: TrainConfig) -> bool:
    return model.use_saga and not config.disable_assdis_s


def phase_terms(model: POSTModel, batch: torch.Tensor, config: TrainConfig, phase: str,
                partners: Optional[torch.Tensor] = None) -> dict[str, torch.Tensor]:
    """Weighted loss terms of one phase with its stop-gradients applied.

    Returns a dict whose ``"total"`` entry is the phase objective. The caller
    decides which parameters are trainable.
    """
    out = model(batch)
    terms = {"rec": _rec(batch, out, config)}
    spatial = _spatial_on(model, config)
    if phase == GRAPH:
        if spatial:
            a_det = [a.detach() for a in out.observations]
            terms["assdis_s"] = config.beta * assdis_s(out.graph_priors, a_det).abs().mean()
        terms["smooth"] = config.gamma * smoothness_loss(batch, model.graph_tildes())
        if config.sparsity == "plain" and config.lam > 0:
            terms["l1"] = config.lam * sum(g.sum() for g in model.graph_tildes())
    elif phase == MINIMIZE:
        p_det = [p.detach() for p in out.priors]
        terms["assdis_t"] = -config.alpha * assdis_t(p_det, out.series).abs().mean()
        if spatial:
            g_det = [g.detach() for g in out.graph_priors]
            terms["assdis_s"] = -config.beta * assdis_s(g_det, out.observations).abs().mean()
        if config.xi > 0 and model.layers[0].tasa.n_heads >= 2:
            terms["triplet"] = config.xi * triplet_reg(out.series, config.margin, partners=partners)
    elif phase == MAXIMIZE:
        s_det = [s.detach() for s in out.series]
        terms["assdis_t"] = config.alpha * assdis_t(out.priors, s_det).abs().mean()
        if spatial:
            a_det = [a.detach() for a in out.observations]
            terms["assdis_s"] = config.beta * assdis_s(out.graph_priors, a_det).abs().mean()
    else:
        raise ValueError(f"unknown phase {phase!r}")
    terms["total"] = sum(v for k, v in terms.items())
    return terms


def phase_loss(model, batch, config, phase, partners=None) -> torch.Tensor:
    """Phase objective built with only the phase's update set trainable."""
    with trainable_only(model, phase_update_set(model, phase)):
        return phase_terms(model, batch, config, phase, partners)["total"]


@dataclass
class TrainState:
    """Model, the two optimizers (network/graph) and the run's random stream."""

    model: POSTModel
    config: TrainConfig
    net_opt: torch.optim.Optimizer
    graph_opt: Optional[torch.optim.Optimizer]
    generator: torch.Generator
    epoch: int = 0
    clip_events: int = 0
    log: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def n_channels(self) -> int:
        return self.model.n_channels


def make_optimizers(model: POSTModel, config: TrainConfig):
    roles = parameter_roles(model)
    named = dict(model.named_parameters())
    net = [named[n] for n, r in roles.items() if r != "graph"]
    graph = [named[n] for n, r in roles.items() if r == "graph"]
    net_opt = torch.optim.Adam(net, lr=config.lr)
    graph_opt = torch.optim.Adam(graph, lr=config.graph_lr or config.lr) if graph else None
    return net_opt, graph_opt


def init_state(n_channels: int, config: TrainConfig, train_series=None) -> TrainState:
    model = build_model(n_channels, config, train_series)
    net_opt, graph_opt = make_optimizers(model, config)
    gen = torch.Generator().manual_seed(config.seed)
    return TrainState(model=model, config=config, net_opt=net_opt, graph_opt=graph_opt, generator=gen)


def _step(state: TrainState, optimizer, batch, phase, partners) -> dict[str, float]:
    model, config = state.model, state.config
    names = phase_update_set(model, phase)
    optimizer.zero_grad(set_to_none=True)
    with trainable_only(model, names):
        terms = phase_terms(model, batch, config, phase, partners)
        total = terms["total"]
        if not torch.isfinite(total):
            raise NumericalError(f"non-finite loss in {phase} phase (epoch {state.epoch})")
        total.backward()
    params = [p for n, p in model.named_parameters() if n in names and p.grad is not None]
    norm = torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
    if not torch.isfinite(norm):
        raise NumericalError(f"non-finite gradient norm in {phase} phase (epoch {state.epoch})")
    if norm > config.clip_norm:
        state.clip_events += 1
        logger.debug("clipped %s gradient norm %.3g", phase, float(norm))
    optimizer.step()
    return {k: float(v.detach()) for k, v in terms.items()}


def apply_proximal_step(model: POSTModel, config: TrainConfig) -> None:
    with torch.no_grad():
        for saga in model.saga_layers:
            g = saga.graph_logits
            g.copy_(prox_sigmoid_l1(g.detach().double(), config.lam, config.prox_iters,
                                    config.prox_tol).to(g.dtype))


def training_step(state: TrainState, batch, graph_phase: bool = True) -> dict[str, dict[str, float]]:
    """One training step on ``batch`` (at least two windows).

    ``graph_phase`` runs the adjacency update and proximal step first; ``fit``
    enables it for the first batch of every epoch.
    """
    model, config = state.model, state.config
    batch = torch.as_tensor(batch, dtype=DTYPES[config.dtype])
    if batch.dim() != 3 or batch.shape[0] < 2:
        raise DataError("training_step needs a batch of at least 2 windows")
    model.train()
    metrics: dict[str, dict[str, float]] = {}
    if graph_phase and config.uses_graph_phase and state.graph_opt is not None:
        metrics[GRAPH] = _step(state, state.graph_opt, batch, GRAPH, None)
        if config.sparsity == "prox" and config.lam > 0:
            apply_proximal_step(model, config)
    for _ in range(config.inner_iters):
        partners = sample_partners(batch.shape[0], state.generator)
        metrics[MINIMIZE] = _step(state, state.net_opt, batch, MINIMIZE, partners)
        metrics[MAXIMIZE] = _step(state, state.net_opt, batch, MAXIMIZE, None)
    return metrics


@torch.no_grad()
def evaluate_windows(model: POSTModel, windows, batch_size: int = 64) -> dict[str, float]:
    """Mean reconstruction loss (per window) and mean discrepancies over ``windows``."""
    model.eval()
    dtype = next(model.parameters()).dtype
    windows = torch.as_tensor(windows, dtype=dtype)
    rec, dis_t, dis_s, count = 0.0, 0.0, 0.0, 0
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        out = model(chunk)
        rec += float(((out.reconstruction - chunk) ** 2).sum())
        dis_t += float(assdis_t(out.priors, out.series).mean(dim=-1).sum())
        if out.spatial:
            dis_s += float(assdis_s(out.graph_priors, out.observations).mean(dim=-1).sum())
        count += len(chunk)
    return {"rec": rec / count, "assdis_t": dis_t / count, "assdis_s": dis_s / count}


def graph_l1(model: POSTModel) -> float:
    with torch.no_grad():
        return float(sum(g.sum() for g in model.graph_tildes())) if model.use_saga else 0.0


def _batches(n: int, size: int, generator: torch.Generator) -> Iterable[torch.Tensor]:
    order = torch.randperm(n, generator=generator)
    chunks = [order[i:i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = torch.cat([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def fit(state: TrainState, train_windows, val_windows=None,
        callback: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Run up to ``config.epochs`` epochs with early stopping on validation reconstruction.

    The best-validation weights are restored at the end. Every record appended
    to ``state.log`` is also passed to ``callback``.
    """
    config = state.config
    dtype = DTYPES[config.dtype]
    train = torch.as_tensor(np.asarray(train_windows), dtype=dtype)
    if train.dim() != 3 or len(train) < 2:
        raise DataError("need at least 2 training windows")
    if train.shape[-1] != state.n_channels or train.shape[1] != config.window:
        raise DataError(f"training windows shaped {tuple(train.shape[1:])}, model expects "
                        f"({config.window}, {state.n_channels})")
    val = None if val_windows is None or len(val_windows) == 0 else torch.as_tensor(
        np.asarray(val_windows), dtype=dtype)

    def emit(record):
        state.log.append(record)
        if callback is not None:
            callback(record)

    best_val, best_weights, best_opt, stale = np.inf, None, None, 0
    for _ in range(config.epochs):
        state.epoch += 1
        sums: dict[str, dict[str, float]] = {}
        counts: dict[str, int] = {}
        for i, idx in enumerate(_batches(len(train), config.batch_size, state.generator)):
            metrics = training_step(state, train[idx], graph_phase=(i == 0))
            for phase, terms in metrics.items():
                acc = sums.setdefault(phase, {})
                for k, v in terms.items():
                    acc[k] = acc.get(k, 0.0) + v
                counts[phase] = counts.get(phase, 0) + 1
        for phase in PHASES:
            if phase in sums:
                emit({"epoch": state.epoch, "phase": phase,
                      **{k: v / counts[phase] for k, v in sums[phase].items()}})
        stats = evaluate_windows(state.model, train)
        val_rec = evaluate_windows(state.model, val)["rec"] if val is not None else stats["rec"]
        emit({"epoch": state.epoch, "phase": "epoch", "rec": stats["rec"], "val_rec": val_rec,
              "assdis_t": stats["assdis_t"], "assdis_s": stats["assdis_s"],
              "graph_l1": graph_l1(state.model), "clip_events": state.clip_events})
        if val_rec < best_val - 1e-12:
            best_val, stale = val_rec, 0
            best_weights = copy.deepcopy(state.model.state_dict())
            best_opt = (copy.deepcopy(state.net_opt.state_dict()),
                        copy.deepcopy(state.graph_opt.state_dict()) if state.graph_opt else None)
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("early stop at epoch %d", state.epoch)
                break
    if best_weights is not None:
        state.model.load_state_dict(best_weights)
        state.net_opt.load_state_dict(best_opt[0])
        if state.graph_opt is not None:
            state.graph_opt.load_state_dict(best_opt[1])
    return state

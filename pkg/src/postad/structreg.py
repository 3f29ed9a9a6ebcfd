"""Structural regularizers for the adjacency prior: Laplacian smoothness and the
sigmoid-composed l1 proximal step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import DimensionMismatchError, DivergenceError


@dataclass
class LaplacianBundle:
    delta: torch.Tensor
    degree: torch.Tensor


def laplacian(g_tilde: torch.Tensor) -> LaplacianBundle:
    """Symmetric normalized Laplacian ``D^-1/2 (D - G) D^-1/2`` with D the row-sum degrees."""
    g_tilde = torch.as_tensor(g_tilde)
    degree = g_tilde.sum(dim=-1)
    if (degree <= 0).any():
        raise ValueError("adjacency has a row with zero degree")
    inv_sqrt = degree.rsqrt()
    scaled = inv_sqrt.unsqueeze(-1) * g_tilde * inv_sqrt.unsqueeze(-2)
    eye = torch.eye(g_tilde.shape[-1], dtype=g_tilde.dtype, device=g_tilde.device)
    return LaplacianBundle(delta=eye - scaled, degree=degree)


def smoothness_loss(window: torch.Tensor, g_tildes: Sequence[torch.Tensor]) -> torch.Tensor:
    """Graph smoothness of the raw series, averaged over layers.

    Channels are the graph nodes, so each time step ``x`` (a length-D0 row)
    contributes ``x @ delta @ x``. A leading batch axis is averaged out.
    """
    window = torch.as_tensor(window)
    if not g_tildes:
        raise ValueError("need at least one layer graph")
    total = window.new_zeros(())
    for g in g_tildes:
        if g.shape[-1] != window.shape[-1]:
            raise DimensionMismatchError(
                f"graph has {g.shape[-1]} nodes but window has {window.shape[-1]} channels")
        delta = laplacian(g).delta.to(window.dtype)
        quad = ((window @ delta) * window).sum(dim=(-1, -2))
        total = total + quad.mean()
    return total / len(g_tildes)


def _sig_slope(z):
    s = torch.sigmoid(z)
    return s * (1.0 - s)


def prox_sigmoid_l1(g, lam: float, max_iters: int = 20, tol: float = 1e-8, return_iters: bool = False):
    """Elementwise proximal map of ``lam * sum(sigmoid(Z))``.

    Solves ``Z = G - lam * sigmoid'(Z)`` by fixed-point iteration from ``Z = G``.
    Accepts and returns numpy arrays or torch tensors.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    as_numpy = not isinstance(g, torch.Tensor)
    g_t = torch.as_tensor(np.asarray(g, dtype=np.float64)) if as_numpy else g.detach()
    if lam == 0:
        out = g_t.clone()
        result = out.numpy() if as_numpy else out
        return (result, 0) if return_iters else result
    z = g_t.clone()
    prev_res = None
    growth = 0
    iters = 0
    for iters in range(1, max_iters + 1):
        z_next = g_t - lam * _sig_slope(z)
        step = (z_next - z).abs().max().item()
        z = z_next
        res = (z + lam * _sig_slope(z) - g_t).abs().max().item()
        if not np.isfinite(res):
            raise DivergenceError(f"proximal iteration produced non-finite residual at step {iters}")
        if prev_res is not None and res > prev_res:
            growth += 1
            if growth >= 3:
                raise DivergenceError(
                    f"proximal residual grew for 3 consecutive iterations (step {iters}, residual {res:.3e})")
        else:
            growth = 0
        prev_res = res
        if step < tol:
            break
    else:
        if res > max(tol, 1e-6):
            raise DivergenceError(f"proximal iteration did not converge in {max_iters} steps (residual {res:.3e})")
    result = z.numpy() if as_numpy else z
    return (result, iters) if return_iters else result


def prox_residual(z, g, lam: float):
    """Elementwise fixed-point residual ``|Z + lam*sigmoid'(Z) - G|``."""
    z = torch.as_tensor(np.asarray(z, dtype=np.float64)) if not isinstance(z, torch.Tensor) else z
    g = torch.as_tensor(np.asarray(g, dtype=np.float64)) if not isinstance(g, torch.Tensor) else g
    return (z + lam * _sig_slope(z) - g).abs()

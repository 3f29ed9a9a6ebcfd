"""Distribution primitives shared by the temporal and spatial attention modules.

All functions operate on torch tensors along the last axis and are differentiable.
Probabilities are clamped at ``EPS_FLOOR`` only where a logarithm is taken.
"""

from __future__ import annotations

import math

import numpy as np
import torch

EPS_FLOOR = 1e-8


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def sinusoidal_table(n: int, d: int, dtype=torch.float64) -> torch.Tensor:
    """Return the ``(n, d)`` absolute sinusoidal position table.

    Column ``2k`` holds ``sin(i / 10000**(2k/d))`` and column ``2k+1`` the cosine.
    """
    if n < 1:
        raise ValueError(f"window length must be positive, got {n}")
    if d < 2 or d % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 1.0 / np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((n, d), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return torch.from_numpy(table).to(dtype)


def row_softmax(logits, temperature=1.0) -> torch.Tensor:
    """Softmax over the last axis of ``logits / temperature``.

    ``temperature`` is a scalar or a tensor broadcastable against ``logits[..., :1]``
    (one value per row) with entries in (0, 1].
    """
    logits = _as_tensor(logits)
    if not torch.isfinite(logits).all():
        raise ValueError("row_softmax received non-finite logits")
    if isinstance(temperature, torch.Tensor):
        if (temperature <= 0).any():
            raise ValueError("temperature must be positive")
        if temperature.dim() == logits.dim() - 1:
            temperature = temperature.unsqueeze(-1)
    elif temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = logits / temperature
    z = z - z.amax(dim=-1, keepdim=True).detach()
    return torch.softmax(z, dim=-1)


def rescale_rows(kernel) -> torch.Tensor:
    """Divide each row of a non-negative matrix by its sum."""
    kernel = _as_tensor(kernel)
    if (kernel < 0).any():
        raise ValueError("rescale_rows expects non-negative entries")
    total = kernel.sum(dim=-1, keepdim=True)
    if (total <= 0).any():
        raise ValueError("rescale_rows got a row with zero mass")
    return kernel / total


def sym_kl(p, q) -> torch.Tensor:
    """Symmetric KL divergence ``KL(p||q) + KL(q||p)`` over the last axis."""
    p = _as_tensor(p)
    q = _as_tensor(q, p.dtype)
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"length mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    p = p.clamp_min(EPS_FLOOR)
    q = q.clamp_min(EPS_FLOOR)
    log_ratio = torch.log(p) - torch.log(q)
    return ((p - q) * log_ratio).sum(dim=-1)


def gaussian_kernel_rows(sigma: torch.Tensor, n: int) -> torch.Tensor:
    """Unnormalized Gaussian kernel: row ``i`` centred at ``i`` with bandwidth ``sigma[..., i]``."""
    idx = torch.arange(n, dtype=sigma.dtype, device=sigma.device)
    dist2 = (idx[None, :] - idx[:, None]) ** 2
    s = sigma.unsqueeze(-1)
    return torch.exp(-dist2 / (2.0 * s * s)) / (math.sqrt(2.0 * math.pi) * s)

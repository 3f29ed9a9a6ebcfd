"""Training configuration shared by the trainer, the estimator and the CLI."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Mapping

from .errors import UsageError

ABLATIONS = {
    "no-saga": "disable_saga",
    "fixed-graph": "freeze_graph",
    "no-assdis-s": "disable_assdis_s",
    "identity-init": "identity_init",
    "ape-input": "ape_on_input",
}


@dataclass
class TrainConfig:
    """Hyperparameters for model construction and alternating training.

    Loss weights default to the published setting (alpha=0.8, beta=0.02,
    gamma=0.002, xi=1.0, lambda=0.7) with L=3, D=512, H=8, N=100, lr=1e-5,
    batch 64 and 10 epochs.
    """

    alpha: float = 0.8
    beta: float = 0.02
    gamma: float = 0.002
    xi: float = 1.0
    lam: float = 0.7
    margin: float = 0.1
    inner_iters: int = 5

    window: int = 100
    d_model: int = 512
    n_layers: int = 3
    n_heads: int = 8
    d_ff: int = 512

    lr: float = 1e-5
    graph_lr: float | None = None
    batch_size: int = 64
    epochs: int = 10
    patience: int = 3
    clip_norm: float = 5.0
    val_fraction: float = 0.2

    knn_k: int = 3
    init_logit: float = 2.0
    prox_iters: int = 20
    prox_tol: float = 1e-8
    # "prox": proximal step after the graph update; "plain": lam * sum|sigmoid(G)| added to the graph loss
    sparsity: str = "prox"
    # "window": squared Frobenius norm per window, averaged over the batch; "mean": per-element mean
    rec_reduction: str = "window"

    disable_saga: bool = False
    freeze_graph: bool = False
    disable_assdis_s: bool = False
    identity_init: bool = False
    ape_on_input: bool = False

    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("alpha", "beta", "gamma", "xi", "lam", "margin"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be non-negative")
        if self.inner_iters < 1:
            raise UsageError("inner_iters must be >= 1")
        if self.d_model % self.n_heads:
            raise UsageError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise UsageError("d_model must be even for the sinusoidal table")
        if self.window < 1 or self.n_layers < 1 or self.epochs < 0:
            raise UsageError("window and n_layers must be positive, epochs non-negative")
        if self.batch_size < 2:
            raise UsageError("batch_size must be >= 2 for the triplet regularizer")
        if self.sparsity not in ("prox", "plain"):
            raise UsageError(f"unknown sparsity scheme {self.sparsity!r}")
        if self.rec_reduction not in ("window", "mean"):
            raise UsageError(f"unknown rec_reduction {self.rec_reduction!r}")
        if self.dtype not in ("float32", "float64"):
            raise UsageError(f"unsupported dtype {self.dtype!r}")
        if not 0 < self.val_fraction < 1:
            raise UsageError("val_fraction must lie in (0, 1)")

    @property
    def uses_graph_phase(self) -> bool:
        return not (self.disable_saga or self.freeze_graph)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        if "lambda" in values:
            values = {**values, "lam": values["lambda"]}
            values.pop("lambda")
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise UsageError(f"unknown training keys: {', '.join(unknown)}")
        return cls(**dict(values))

    def with_ablation(self, name: str) -> "TrainConfig":
        if name in ("", "none", "full"):
            return dataclasses.replace(self)
        if name not in ABLATIONS:
            raise UsageError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
        return dataclasses.replace(self, **{ABLATIONS[name]: True})


def desk_config(**overrides) -> TrainConfig:
    """Small configuration used for desk-scale runs and tests."""
    base = dict(window=50, d_model=32, n_layers=2, n_heads=4, d_ff=32, lr=1e-3,
                batch_size=16, epochs=10, dtype="float32")
    base.update(overrides)
    return TrainConfig(**base)


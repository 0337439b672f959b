"""Client-side mini-batch SGD and the server-side FedAdam update."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ContractError, DivergenceError, Example, ModelDelta, ParamVector
from .models import TrainableModel

__all__ = ["SgdConfig", "FedAdamState", "local_sgd", "aggregate_deltas", "fedadam_step"]


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    batch_size: int
    epochs: int

    def __post_init__(self):
        # learning_rate == 0 is allowed so personalization can be switched off.
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be positive")


@dataclass(frozen=True)
class FedAdamState:
    """First/second moment accumulators of the server optimizer."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3

    @classmethod
    def zeros(cls, dim: int, beta1: float = 0.9, beta2: float = 0.99,
              tau: float = 1e-3) -> "FedAdamState":
        return cls(np.zeros(dim), np.zeros(dim), 0, beta1, beta2, tau)


def local_sgd(model: ParamVector, data: Sequence[Example], cfg: SgdConfig,
              loss_fn: TrainableModel, rng: np.random.Generator) -> ParamVector:
    """Run ``cfg.epochs`` shuffled passes of mini-batch SGD over ``data``.

    Every pass visits each example once; the last batch of a pass may be
    short. The step uses the mean gradient of the batch.
    """
    n = len(data)
    if n == 0:
        raise ContractError("local_sgd needs at least one example")
    theta = np.array(model, dtype=np.float64, copy=True)
    if theta.shape != (loss_fn.param_dim,):
        raise ContractError(f"model dim {theta.shape} does not match loss_fn dim {loss_fn.param_dim}")
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = [data[j] for j in order[start:start + cfg.batch_size]]
            g = loss_fn.grad(theta, batch)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient at epoch {epoch}, batch {b}")
            with np.errstate(over="ignore", invalid="ignore"):
                theta = theta - lr * g
            if not np.all(np.isfinite(theta)):
                raise DivergenceError(f"non-finite parameters at epoch {epoch}, batch {b}")
    return theta


def aggregate_deltas(deltas: Sequence[ModelDelta], weighting: str = "by_examples") -> ParamVector:
    """Weighted average of client deltas (the server's pseudo-gradient)."""
    if len(deltas) == 0:
        raise ContractError("cannot aggregate an empty set of deltas")
    dims = {d.delta.shape for d in deltas}
    if len(dims) != 1:
        raise ContractError(f"delta dimension mismatch: {sorted(dims)}")
    if weighting == "uniform":
        weights = np.full(len(deltas), 1.0 / len(deltas))
    elif weighting == "by_examples":
        counts = np.array([d.num_examples for d in deltas], dtype=np.float64)
        weights = counts / counts.sum()
    else:
        raise ContractError(f"unknown weighting {weighting!r}")
    stacked = np.stack([d.delta for d in deltas])
    return weights @ stacked


def fedadam_step(model: ParamVector, state: FedAdamState, pseudo_grad: ParamVector,
                 eta: float) -> tuple[ParamVector, FedAdamState]:
    """One FedAdam server update, without bias correction.

    The averaged delta (old model minus client model) already points uphill,
    so it is used directly as a gradient estimate.
    """
    g = np.asarray(pseudo_grad, dtype=np.float64)
    if g.shape != model.shape or state.m.shape != model.shape:
        raise ContractError("model, state and pseudo-gradient dims disagree")
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite pseudo-gradient")
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    with np.errstate(over="ignore", invalid="ignore"):
        new_model = model - eta * m / (np.sqrt(v) + state.tau)
    if not np.all(np.isfinite(new_model)):
        raise DivergenceError("FedAdam produced non-finite parameters")
    return new_model, FedAdamState(m, v, state.step + 1, state.beta1, state.beta2, state.tau)

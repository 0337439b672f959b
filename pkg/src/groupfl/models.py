"""Trainable models with analytic gradients, perplexity and gradient checking."""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Sequence

import numpy as np

from .core import ContractError, Example, ParamVector

__all__ = [
    "TrainableModel",
    "GaussianMeanModel",
    "TinyBigramLM",
    "perplexity",
    "grad_check",
]


class TrainableModel(ABC):
    """A stateless loss/gradient evaluator over a flat parameter vector."""

    param_dim: int

    @abstractmethod
    def loss(self, params: ParamVector, batch: Sequence[Example]) -> float:
        """Mean loss over the examples in ``batch``."""

    @abstractmethod
    def grad(self, params: ParamVector, batch: Sequence[Example]) -> ParamVector:
        """Gradient of :meth:`loss` with respect to ``params``."""

    @abstractmethod
    def init_params(self, rng: np.random.Generator) -> ParamVector:
        pass

    def eval_metric(self, params: ParamVector, data: Sequence[Example]) -> float:
        """Held-out quality measure used by the experiment harness (lower is better)."""
        return self.loss(params, data)


class GaussianMeanModel(TrainableModel):
    """Estimate a scalar mean: per-example loss ``0.5 * (x - theta)**2``."""

    param_dim = 1

    @staticmethod
    def _values(batch) -> np.ndarray:
        return np.asarray(batch, dtype=np.float64).reshape(-1)

    def loss(self, params, batch):
        x = self._values(batch)
        return float(np.mean(0.5 * (x - params[0]) ** 2))

    def grad(self, params, batch):
        x = self._values(batch)
        return np.array([np.mean(params[0] - x)])

    def init_params(self, rng):
        return np.zeros(1)

    def eval_metric(self, params, data):
        # mean squared error on held-out observations
        x = self._values(data)
        return float(np.mean((x - params[0]) ** 2))


class TinyBigramLM(TrainableModel):
    """Next-token predictor: embed -> affine -> tanh -> affine -> softmax.

    Each sequence contributes one prediction per adjacent token pair. The
    flat parameter layout is ``E (V x d), W1 (d x h), b1 (h), W2 (h x V), b2 (V)``.
    The loss is the mean cross-entropy over every predicted token in the batch.
    """

    def __init__(self, vocab_size: int = 64, embed_dim: int = 16, hidden_dim: int = 32,
                 init_scale: float = 0.08):
        if min(vocab_size, embed_dim, hidden_dim) < 1:
            raise ContractError("model sizes must be positive")
        self.vocab_size = V = vocab_size
        self.embed_dim = d = embed_dim
        self.hidden_dim = h = hidden_dim
        self.init_scale = init_scale
        shapes = [("E", (V, d)), ("W1", (d, h)), ("b1", (h,)), ("W2", (h, V)), ("b2", (V,))]
        self._slices = {}
        offset = 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            self._slices[name] = (slice(offset, offset + size), shape)
            offset += size
        self.param_dim = offset

    def __repr__(self):
        return (f"TinyBigramLM(vocab_size={self.vocab_size}, embed_dim={self.embed_dim}, "
                f"hidden_dim={self.hidden_dim})")

    def unpack(self, params: ParamVector) -> dict[str, np.ndarray]:
        if params.shape != (self.param_dim,):
            raise ContractError(f"expected {self.param_dim} parameters, got {params.shape}")
        return {name: params[sl].reshape(shape) for name, (sl, shape) in self._slices.items()}

    def pack(self, parts: dict[str, np.ndarray]) -> ParamVector:
        out = np.empty(self.param_dim)
        for name, (sl, shape) in self._slices.items():
            out[sl] = np.asarray(parts[name]).reshape(-1)
        return out

    def init_params(self, rng):
        return rng.uniform(-self.init_scale, self.init_scale, size=self.param_dim)

    def _pairs(self, batch) -> tuple[np.ndarray, np.ndarray]:
        inputs, targets = [], []
        for seq in batch:
            seq = np.asarray(seq, dtype=np.int64)
            if seq.size and (seq.min() < 0 or seq.max() >= self.vocab_size):
                raise ContractError("token id out of range")
            inputs.append(seq[:-1])
            targets.append(seq[1:])
        if not inputs:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        return np.concatenate(inputs), np.concatenate(targets)

    def _forward(self, p, inputs):
        emb = p["E"][inputs]
        hidden = np.tanh(emb @ p["W1"] + p["b1"])
        logits = hidden @ p["W2"] + p["b2"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return emb, hidden, log_probs

    def log_probs(self, params, batch) -> np.ndarray:
        """Log-probability of every predicted token, in batch order."""
        inputs, targets = self._pairs(batch)
        if inputs.size == 0:
            return np.empty(0)
        _, _, lp = self._forward(self.unpack(params), inputs)
        return lp[np.arange(inputs.size), targets]

    def next_token_probs(self, params, token: int) -> np.ndarray:
        _, _, lp = self._forward(self.unpack(params), np.array([token]))
        return np.exp(lp[0])

    def nll(self, params, data) -> tuple[float, int]:
        """Total negative log-likelihood and number of predicted tokens."""
        lp = self.log_probs(params, data)
        return float(-lp.sum()), int(lp.size)

    def loss(self, params, batch):
        total, count = self.nll(params, batch)
        return total / count if count else 0.0

    def grad(self, params, batch):
        p = self.unpack(params)
        inputs, targets = self._pairs(batch)
        n = inputs.size
        if n == 0:
            return np.zeros(self.param_dim)
        emb, hidden, log_probs = self._forward(p, inputs)
        d_logits = np.exp(log_probs)
        d_logits[np.arange(n), targets] -= 1.0
        d_logits /= n
        d_pre = (d_logits @ p["W2"].T) * (1.0 - hidden**2)
        d_emb = d_pre @ p["W1"].T
        d_E = np.zeros_like(p["E"])
        np.add.at(d_E, inputs, d_emb)
        return self.pack({
            "E": d_E,
            "W1": emb.T @ d_pre,
            "b1": d_pre.sum(axis=0),
            "W2": hidden.T @ d_logits,
            "b2": d_logits.sum(axis=0),
        })

    def eval_metric(self, params, data):
        return perplexity(self, params, data)


def perplexity(model: TrainableModel, params: ParamVector, data: Sequence[Example]) -> float:
    """Token-weighted corpus perplexity: ``exp(total NLL / predicted tokens)``."""
    if not hasattr(model, "nll"):
        raise ContractError(f"{type(model).__name__} is not a language model")
    if len(data) == 0:
        raise ContractError("perplexity needs at least one sequence")
    total, count = model.nll(params, data)
    if count == 0:
        raise ContractError("data contains no predicted tokens")
    return float(np.exp(total / count))


def grad_check(model: TrainableModel, params: ParamVector, batch: Sequence[Example],
               epsilon: float = 1e-5) -> float:
    """Largest relative disagreement between the analytic and central-difference gradient.

    Per coordinate the error is ``|a - c| / max(1, |a| + |c|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ContractError("epsilon must lie in [1e-7, 1e-3]")
    params = np.asarray(params, dtype=np.float64)
    analytic = model.grad(params, batch)
    numeric = np.empty_like(analytic)
    probe = params.copy()
    for i in range(params.size):
        probe[i] = params[i] + epsilon
        up = model.loss(probe, batch)
        probe[i] = params[i] - epsilon
        down = model.loss(probe, batch)
        probe[i] = params[i]
        numeric[i] = (up - down) / (2.0 * epsilon)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(err.max())

"""Shared types, run configuration, seeded randomness and checkpoint files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

__all__ = [
    "ParamVector",
    "Example",
    "ModelDelta",
    "ClientRecord",
    "RunConfig",
    "GroupFLError",
    "ContractError",
    "ConfigError",
    "DivergenceError",
    "PersistenceError",
    "VerificationError",
    "as_param_vector",
    "seeded_rng",
    "save_checkpoint",
    "load_checkpoint",
]

# A model is a flat float64 vector; each model defines its own index layout.
ParamVector = np.ndarray
# Scalar observation (Gaussian-mean task) or a 1-D array of token ids (LM task).
Example = Union[float, np.ndarray]

CHECKPOINT_MAGIC = b"FGSIM1"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<6sIQ")


class GroupFLError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(GroupFLError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(GroupFLError, ValueError):
    pass


class DivergenceError(GroupFLError, ArithmeticError):
    """Training produced a non-finite loss, gradient or parameter."""


class PersistenceError(GroupFLError, OSError):
    pass


class VerificationError(GroupFLError):
    """A numerical verification check could not be carried out reliably."""


def as_param_vector(values, dim: int | None = None) -> ParamVector:
    """Copy ``values`` into a finite 1-D float64 array, optionally checking its length."""
    arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    if arr.size == 0:
        raise ContractError("parameter vector must have positive dimension")
    if dim is not None and arr.size != dim:
        raise ContractError(f"expected parameter dim {dim}, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("parameter vector contains non-finite entries")
    return arr


@dataclass(frozen=True)
class ModelDelta:
    """One client's round update: the model it received minus the model it trained."""

    client_id: str
    round: int
    delta: ParamVector
    num_examples: int

    def __post_init__(self):
        if self.num_examples < 1:
            raise ContractError("num_examples must be positive")
        if self.round < 0:
            raise ContractError("round must be non-negative")
        if not np.all(np.isfinite(self.delta)):
            raise DivergenceError(f"non-finite delta from client {self.client_id!r}")


@dataclass(frozen=True)
class ClientRecord:
    client_id: str
    group_id: str
    train_examples: Sequence[Example]
    eval_examples: Sequence[Example] = ()

    @property
    def num_train(self) -> int:
        return len(self.train_examples)


@dataclass(frozen=True)
class RunConfig:
    """Hyper-parameters of the three training stages.

    Field names mirror the JSON config file keys exactly.
    """

    T: int = 20
    T_g: int = 10
    K: int = 1
    K_l: int = 5
    cohort_size: int = 100
    eta_G: float = 0.001
    eta_g: float = 0.001
    eta_l: float = 1.0
    eta_il: float = 0.1
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    weighting: str = "by_examples"

    def __post_init__(self):
        for name in ("T", "T_g", "K", "K_l", "cohort_size", "batch_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        # eta_il = 0 is accepted: it switches personalization off, which the
        # baseline-collapse checks rely on.
        for name in ("eta_G", "eta_g", "eta_l"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not self.eta_il >= 0:
            raise ConfigError("eta_il must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.weighting not in ("uniform", "by_examples"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown RunConfig keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json_file(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return list(np.frombuffer(digest, dtype="<u4").tolist())


def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Return an independent generator for the stream ``(seed, stream_label)``.

    The label is hashed into the seed sequence entropy, so streams with
    different labels never share state and the same pair always replays the
    same draws.
    """
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ContractError("seed must fit in an unsigned 64-bit integer")
    entropy = [seed & 0xFFFFFFFF, seed >> 32, *_label_words(stream_label)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def save_checkpoint(model, path) -> None:
    values = as_param_vector(model)
    path = Path(path)
    payload = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, values.size)
    payload += values.astype("<f8").tobytes()
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> ParamVector:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise PersistenceError(f"{path}: truncated checkpoint header")
    magic, version, dim = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise PersistenceError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise PersistenceError(f"{path}: unsupported checkpoint version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * dim:
        raise PersistenceError(f"{path}: expected {dim} values, found {len(body) / 8:g}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)

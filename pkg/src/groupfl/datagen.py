"""Synthetic grouped populations: a Gaussian hierarchy and a bigram text corpus."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bayes import BayesHierarchy
from .core import ClientRecord, ConfigError, ContractError, PersistenceError, seeded_rng
from .engine import Population

__all__ = [
    "GaussianGenConfig",
    "TextGenConfig",
    "gen_gaussian_population",
    "gen_text_population",
    "bigram_tables",
    "sample_client_sizes",
    "save_population",
    "load_population",
    "SENTENCE_DELIMITER",
]

SENTENCE_DELIMITER = "|"


def _client_id(group: int, client: int) -> str:
    return f"g{group:02d}-c{client:04d}"


def _group_id(group: int) -> str:
    return f"g{group:02d}"


@dataclass(frozen=True)
class GaussianGenConfig:
    """Sizes and variances of a sampled Gaussian hierarchy.

    ``N_m`` is one int per group, or a single int shared by all groups.
    ``sigma_mn_sq`` is a scalar shared by every client or one sequence of
    per-client values per group.
    """

    M: int = 3
    N_m: int | Sequence[int] = 5
    theta0: float = 0.0
    sigma0_sq: float = 1.0
    sigma_mn_sq: float | Sequence[Sequence[float]] = 1.0
    examples_per_client: int = 10
    eval_examples_per_client: int = 10
    seed: int = 0

    def group_sizes(self) -> list[int]:
        if isinstance(self.N_m, (int, np.integer)):
            return [int(self.N_m)] * self.M
        sizes = [int(n) for n in self.N_m]
        if len(sizes) != self.M:
            raise ConfigError("N_m must list one size per group")
        return sizes

    def client_variances(self) -> list[np.ndarray]:
        sizes = self.group_sizes()
        if isinstance(self.sigma_mn_sq, (int, float, np.number)):
            return [np.full(n, float(self.sigma_mn_sq)) for n in sizes]
        out = [np.asarray(v, dtype=np.float64).reshape(-1) for v in self.sigma_mn_sq]
        if [len(v) for v in out] != sizes:
            raise ConfigError("sigma_mn_sq does not match the group sizes")
        return out

    def check(self):
        if self.M < 1 or self.examples_per_client < 1 or self.eval_examples_per_client < 0:
            raise ConfigError("sizes must be positive")
        if any(n < 1 for n in self.group_sizes()):
            raise ConfigError("every group needs at least one client")
        if self.sigma0_sq < 0 or any(np.any(v < 0) for v in self.client_variances()):
            raise ConfigError("variances must be non-negative")


@dataclass(frozen=True)
class TextGenConfig:
    vocab_size: int = 64
    num_groups: int = 3
    clients_per_group: Sequence[int] = (100, 100, 100)
    global_bigram_concentration: float = 0.1
    group_divergence: float = 0.8
    group_concentration: float = 0.1
    client_size_tail: float = 1.5
    min_sentences: int = 4
    max_sentences: int = 400
    sentence_length: tuple[int, int] = (8, 24)
    eval_fraction: float = 0.25
    seed: int = 0

    def check(self):
        if len(self.clients_per_group) != self.num_groups:
            raise ConfigError("clients_per_group must list one count per group")
        if self.vocab_size < 2 or self.num_groups < 1 or min(self.clients_per_group) < 1:
            raise ConfigError("vocab_size >= 2 and positive group sizes required")
        if not 0 <= self.group_divergence <= 1:
            raise ConfigError("group_divergence must lie in [0, 1]")
        if self.global_bigram_concentration <= 0 or self.group_concentration <= 0:
            raise ConfigError("Dirichlet concentrations must be positive")
        if not 2 <= self.min_sentences <= self.max_sentences:
            raise ConfigError("need 2 <= min_sentences <= max_sentences")
        lo, hi = self.sentence_length
        if not 2 <= lo <= hi:
            raise ConfigError("sentences need at least two tokens")
        if not 0 < self.eval_fraction < 1:
            raise ConfigError("eval_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "TextGenConfig":
        data = dict(data)
        if "clients_per_group" in data:
            data["clients_per_group"] = tuple(data["clients_per_group"])
        if "sentence_length" in data:
            data["sentence_length"] = tuple(data["sentence_length"])
        known = {f.name for f in dataclasses.fields(cls)}
        if set(data) - known:
            raise ConfigError(f"unknown text config keys: {sorted(set(data) - known)}")
        return cls(**data)


def gen_gaussian_population(cfg: GaussianGenConfig) -> tuple[Population, BayesHierarchy]:
    """Sample group means around ``theta0``, then client observations around their group mean.

    The returned hierarchy summarises each client by its training-sample mean,
    whose variance is ``sigma_mn_sq / examples_per_client``.
    """
    cfg.check()
    variances = cfg.client_variances()
    rng = seeded_rng(cfg.seed, "datagen/gaussian")
    records, xs, vs = [], [], []
    n_train = cfg.examples_per_client
    for m, v_group in enumerate(variances):
        theta_m = cfg.theta0 + np.sqrt(cfg.sigma0_sq) * rng.standard_normal()
        x_group = []
        for n, var in enumerate(v_group):
            draws = theta_m + np.sqrt(var) * rng.standard_normal(n_train + cfg.eval_examples_per_client)
            train, held_out = draws[:n_train], draws[n_train:]
            records.append(ClientRecord(_client_id(m, n), _group_id(m),
                                        tuple(float(x) for x in train),
                                        tuple(float(x) for x in held_out)))
            x_group.append(train.mean())
        xs.append(np.array(x_group))
        vs.append(np.asarray(v_group) / n_train)
    return Population.from_clients(records), BayesHierarchy(tuple(xs), tuple(vs), float(cfg.sigma0_sq))


def bigram_tables(cfg: TextGenConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    """Global bigram table and one table per group (rows are next-token distributions).

    Group tables mix ``group_divergence`` of an independent Dirichlet draw into
    the global table.
    """
    V = cfg.vocab_size
    rng = seeded_rng(cfg.seed, "datagen/text/tables")
    glob = rng.dirichlet(np.full(V, cfg.global_bigram_concentration), size=V)
    w = cfg.group_divergence
    groups = []
    for _ in range(cfg.num_groups):
        own = rng.dirichlet(np.full(V, cfg.group_concentration), size=V)
        table = (1.0 - w) * glob + w * own
        groups.append(table / table.sum(axis=1, keepdims=True))
    return glob, groups


def sample_client_sizes(n: int, exponent: float, lo: int, hi: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` sentence counts from ``p(k) ~ k**-exponent`` truncated to ``[lo, hi]``."""
    support = np.arange(lo, hi + 1)
    p = support.astype(np.float64) ** -exponent
    return rng.choice(support, size=n, p=p / p.sum())


def _rollout(table: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    V = table.shape[0]
    cdf = np.cumsum(table, axis=1)
    seq = np.empty(length, dtype=np.int64)
    seq[0] = rng.integers(V)
    u = rng.random(length - 1)
    for i in range(1, length):
        seq[i] = min(int(np.searchsorted(cdf[seq[i - 1]], u[i - 1], side="right")), V - 1)
    return seq


def gen_text_population(cfg: TextGenConfig) -> Population:
    """Clients with long-tailed sentence counts, each rolling out its group's bigram chain."""
    cfg.check()
    _, tables = bigram_tables(cfg)
    records = []
    for g, (table, n_clients) in enumerate(zip(tables, cfg.clients_per_group)):
        sizes = sample_client_sizes(n_clients, cfg.client_size_tail, cfg.min_sentences,
                                    cfg.max_sentences, seeded_rng(cfg.seed, f"datagen/text/sizes/{g}"))
        for c, size in enumerate(sizes):
            cid = _client_id(g, c)
            rng = seeded_rng(cfg.seed, f"datagen/text/client/{cid}")
            lengths = rng.integers(cfg.sentence_length[0], cfg.sentence_length[1] + 1, size=size)
            sentences = [_rollout(table, int(k), rng) for k in lengths]
            n_eval = min(max(1, int(round(cfg.eval_fraction * size))), size - 1)
            order = rng.permutation(size)
            eval_idx, train_idx = np.sort(order[:n_eval]), np.sort(order[n_eval:])
            records.append(ClientRecord(cid, _group_id(g),
                                        tuple(sentences[i] for i in train_idx),
                                        tuple(sentences[i] for i in eval_idx)))
    return Population.from_clients(records)


# -- population files ------------------------------------------------------
#
# One client per line, tab separated:
#   client_id  group_id  kind  train  eval
# kind is "tokens" (sentences of space-separated ids joined by " | ") or
# "scalar" (space-separated float reprs).

def _encode(kind: str, examples) -> str:
    if kind == "tokens":
        return f" {SENTENCE_DELIMITER} ".join(" ".join(str(int(t)) for t in s) for s in examples)
    return " ".join(repr(float(x)) for x in examples)


def _decode(kind: str, text: str):
    if not text.strip():
        return ()
    if kind == "tokens":
        return tuple(np.array([int(t) for t in s.split()], dtype=np.int64)
                     for s in text.split(SENTENCE_DELIMITER))
    return tuple(float(x) for x in text.split())


def save_population(pop: Population, path) -> None:
    lines = []
    for cid in pop.client_ids:
        rec = pop.clients[cid]
        sample = rec.train_examples[0] if rec.train_examples else (
            rec.eval_examples[0] if rec.eval_examples else 0.0)
        kind = "scalar" if np.ndim(sample) == 0 else "tokens"
        lines.append("\t".join([cid, rec.group_id, kind, _encode(kind, rec.train_examples),
                                _encode(kind, rec.eval_examples)]))
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"cannot write population {path}: {exc}") from exc


def load_population(path) -> Population:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"cannot read population {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5 or parts[2] not in ("tokens", "scalar"):
            raise ContractError(f"{path}:{lineno}: malformed population record")
        cid, gid, kind, train, held_out = parts
        records.append(ClientRecord(cid, gid, _decode(kind, train), _decode(kind, held_out)))
    return Population.from_clients(records)

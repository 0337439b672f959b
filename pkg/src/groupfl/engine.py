"""Global FL training, group FL fine-tuning and local personalization."""

from __future__ import annotations

import csv
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Collection, Iterable, Mapping, Sequence

import numpy as np

from .core import (
    ClientRecord,
    ContractError,
    DivergenceError,
    ModelDelta,
    ParamVector,
    RunConfig,
    seeded_rng,
)
from .models import TrainableModel
from .optim import FedAdamState, SgdConfig, aggregate_deltas, fedadam_step, local_sgd

__all__ = [
    "METHODS",
    "Population",
    "RoundLog",
    "CostReport",
    "sample_cohort",
    "run_global_training",
    "run_group_finetuning",
    "run_personalization",
    "cost_accounting",
    "write_round_log_csv",
    "read_round_log_csv",
]

METHODS = ("FL", "PerFL", "GroupFL", "GroupPerFL")
_METHOD_STAGES = {
    "FL": ("global",),
    "PerFL": ("global", "personal"),
    "GroupFL": ("global", "group"),
    "GroupPerFL": ("global", "group", "personal"),
}
ROUND_LOG_COLUMNS = ("stage", "round", "group_id", "client_id", "loss_before", "loss_after",
                     "uploads", "downloads")


@dataclass(frozen=True)
class Population:
    """Clients keyed by id plus the partition of client ids into groups."""

    clients: Mapping[str, ClientRecord]
    groups: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        seen = set()
        for gid, members in self.groups.items():
            for cid in members:
                if cid in seen:
                    raise ContractError(f"client {cid!r} belongs to more than one group")
                if cid not in self.clients:
                    raise ContractError(f"group {gid!r} names unknown client {cid!r}")
                if self.clients[cid].group_id != gid:
                    raise ContractError(f"client {cid!r} is filed under the wrong group")
                seen.add(cid)
        if seen != set(self.clients):
            raise ContractError("groups do not cover every client")

    @classmethod
    def from_clients(cls, records: Iterable[ClientRecord]) -> "Population":
        clients: dict[str, ClientRecord] = {}
        groups: dict[str, list[str]] = defaultdict(list)
        for rec in records:
            if rec.client_id in clients:
                raise ContractError(f"duplicate client id {rec.client_id!r}")
            clients[rec.client_id] = rec
            groups[rec.group_id].append(rec.client_id)
        return cls(clients, {g: tuple(sorted(ids)) for g, ids in sorted(groups.items())})

    def __len__(self):
        return len(self.clients)

    @property
    def client_ids(self) -> list[str]:
        return sorted(self.clients)

    def group_of(self, client_id: str) -> str:
        return self.clients[client_id].group_id

    def subset(self, group_id: str) -> "Population":
        """The population restricted to one group."""
        members = self.groups[group_id]
        return Population({c: self.clients[c] for c in members}, {group_id: members})


@dataclass(frozen=True)
class RoundLog:
    round: int
    stage: str
    group_id: str | None
    sampled_clients: tuple[str, ...]
    uploads: int
    downloads: int
    epochs: int
    pre_update_eval: float | None = None
    client_losses: Mapping[str, tuple[float, float]] = field(default_factory=dict)


@dataclass(frozen=True)
class CostReport:
    client_id: str
    method: str
    communication: int
    computation: int


def sample_cohort(eligible: Sequence[str], cohort_size: int, rng: np.random.Generator) -> list[str]:
    """Draw ``min(cohort_size, len(eligible))`` distinct ids uniformly without replacement."""
    if len(eligible) == 0:
        raise ContractError("no eligible clients to sample from")
    k = min(cohort_size, len(eligible))
    picks = rng.choice(len(eligible), size=k, replace=False)
    return [eligible[i] for i in picks]


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _federated_rounds(pop: Population, init: ParamVector, model: TrainableModel,
                      cfg: RunConfig, rounds: int, eta: float, stage: str,
                      group_id: str | None, stream: str, workers: int = 1,
                      eval_hook: Callable[[ParamVector], float] | None = None):
    eligible = [cid for cid in pop.client_ids if pop.clients[cid].num_train > 0]
    if not eligible:
        raise ContractError(f"{stage} stage has no client with training data")
    sgd = SgdConfig(cfg.eta_l, cfg.batch_size, cfg.K)
    theta = np.array(init, dtype=np.float64, copy=True)
    if theta.shape != (model.param_dim,):
        raise ContractError(f"seed model dim {theta.shape} does not match model dim {model.param_dim}")
    state = FedAdamState.zeros(model.param_dim, cfg.beta1, cfg.beta2, cfg.tau)
    logs = []
    for t in range(1, rounds + 1):
        cohort = sorted(sample_cohort(eligible, cfg.cohort_size,
                                      seeded_rng(cfg.seed, f"{stream}/sample/{t}")))
        pre_eval = eval_hook(theta) if eval_hook is not None else None

        def train_one(cid, theta=theta, t=t):
            rec = pop.clients[cid]
            try:
                local = local_sgd(theta, rec.train_examples, sgd, model,
                                  seeded_rng(cfg.seed, f"{stream}/shuffle/{t}/{cid}"))
            except DivergenceError as exc:
                where = f"{stage} round {t}, client {cid!r}"
                if group_id is not None:
                    where += f", group {group_id!r}"
                raise DivergenceError(f"{where}: {exc}") from exc
            before = model.loss(theta, rec.train_examples)
            after = model.loss(local, rec.train_examples)
            return ModelDelta(cid, t, theta - local, rec.num_train), (before, after)

        results = _map(train_one, cohort, workers)
        deltas = [r[0] for r in results]
        pseudo_grad = aggregate_deltas(deltas, cfg.weighting)
        try:
            theta, state = fedadam_step(theta, state, pseudo_grad, eta)
        except DivergenceError as exc:
            raise DivergenceError(f"{stage} round {t} server update: {exc}") from exc
        logs.append(RoundLog(t, stage, group_id, tuple(cohort), len(cohort), len(cohort), cfg.K,
                             pre_eval, {cid: r[1] for cid, r in zip(cohort, results)}))
    return theta, logs


def run_global_training(pop: Population, model: TrainableModel, cfg: RunConfig, *,
                        init: ParamVector | None = None, stream: str = "global",
                        workers: int = 1, eval_hook=None) -> tuple[ParamVector, list[RoundLog]]:
    """Train one shared model for ``cfg.T`` rounds with FedAdam at rate ``cfg.eta_G``.

    ``init`` defaults to ``model.init_params`` drawn from the ``"init"`` stream.
    """
    if init is None:
        init = model.init_params(seeded_rng(cfg.seed, "init"))
    return _federated_rounds(pop, init, model, cfg, cfg.T, cfg.eta_G, "global", None,
                             stream, workers, eval_hook)


def run_group_finetuning(pop: Population, seed_model: ParamVector, model: TrainableModel,
                         cfg: RunConfig, *, workers: int = 1
                         ) -> tuple[dict[str, ParamVector], list[RoundLog]]:
    """Fine-tune ``seed_model`` separately inside every group for ``cfg.T_g`` rounds.

    Each group starts from a fresh FedAdam state and only ever sees its own
    clients.
    """
    models, logs = {}, []
    for gid in sorted(pop.groups):
        if not pop.groups[gid]:
            raise ContractError(f"group {gid!r} is empty")
        models[gid], group_logs = _federated_rounds(
            pop.subset(gid), seed_model, model, cfg, cfg.T_g, cfg.eta_g, "group", gid,
            f"group/{gid}", workers)
        logs.extend(group_logs)
    return models, logs


def run_personalization(pop: Population, group_models: Mapping[str, ParamVector],
                        model: TrainableModel, cfg: RunConfig, *, workers: int = 1
                        ) -> tuple[dict[str, ParamVector], list[RoundLog]]:
    """Adapt each client's group model on its own data for ``cfg.K_l`` epochs at ``cfg.eta_il``.

    Clients without training data keep their group model unchanged.
    """
    missing = set(pop.groups) - set(group_models)
    if missing:
        raise ContractError(f"no model for groups {sorted(missing)}")
    sgd = SgdConfig(cfg.eta_il, cfg.batch_size, cfg.K_l)

    def personalize(cid):
        rec = pop.clients[cid]
        start = np.asarray(group_models[rec.group_id], dtype=np.float64)
        if rec.num_train == 0:
            return start.copy(), None
        try:
            theta = local_sgd(start, rec.train_examples, sgd, model,
                              seeded_rng(cfg.seed, f"personal/{cid}"))
        except DivergenceError as exc:
            raise DivergenceError(f"personalization of client {cid!r}: {exc}") from exc
        return theta, (model.loss(start, rec.train_examples), model.loss(theta, rec.train_examples))

    ids = pop.client_ids
    results = _map(personalize, ids, workers)
    out = {cid: r[0] for cid, r in zip(ids, results)}
    trained = tuple(cid for cid, r in zip(ids, results) if r[1] is not None)
    log = RoundLog(1, "personal", None, trained, 0, 0, cfg.K_l, None,
                   {cid: r[1] for cid, r in zip(ids, results) if r[1] is not None})
    return out, [log]


def cost_accounting(logs: Sequence[RoundLog], method: str, client: str,
                    clients: Collection[str] | None = None) -> CostReport:
    """Per-client communication (model transfers) and computation (local epochs).

    Every round a client joins costs one download and one upload; each FL
    stage of the method adds one final-model download. ``clients`` is the
    known roster; without it, any client named in ``logs`` is known.
    """
    if method not in _METHOD_STAGES:
        raise ContractError(f"unknown method {method!r}")
    if clients is None:
        clients = {c for log in logs for c in log.sampled_clients}
    if client not in clients:
        raise ContractError(f"unknown client {client!r}")
    stages = _METHOD_STAGES[method]
    communication = sum(1 for s in stages if s != "personal")
    computation = 0
    for log in logs:
        if log.stage not in stages or client not in log.sampled_clients:
            continue
        if log.stage != "personal":
            communication += 2
        computation += log.epochs
    return CostReport(client, method, communication, computation)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_round_log_csv(logs: Iterable[RoundLog], path) -> None:
    """One row per client per round, in log order then client-id order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROUND_LOG_COLUMNS)
        for log in logs:
            per_client_io = 1 if log.uploads else 0
            for cid in log.sampled_clients:
                before, after = log.client_losses.get(cid, (None, None))
                writer.writerow([log.stage, log.round, log.group_id or "", cid, _fmt(before),
                                 _fmt(after), per_client_io, per_client_io])


def read_round_log_csv(path, K: int, K_l: int) -> list[RoundLog]:
    """Rebuild round logs from CSV; epochs per row come from ``K`` and ``K_l``."""
    grouped: dict[tuple, list[dict]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["stage"], row["group_id"], int(row["round"]))
            grouped.setdefault(key, []).append(row)
    logs = []
    for (stage, gid, rnd), rows in grouped.items():
        ids = tuple(r["client_id"] for r in rows)
        losses = {r["client_id"]: (float(r["loss_before"]), float(r["loss_after"]))
                  for r in rows if r["loss_before"]}
        uploads = sum(int(r["uploads"]) for r in rows)
        downloads = sum(int(r["downloads"]) for r in rows)
        logs.append(RoundLog(rnd, stage, gid or None, ids, uploads, downloads,
                             K_l if stage == "personal" else K, None, losses))
    return logs

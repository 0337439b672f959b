"""Four-method comparison harness, per-client histograms and Bayes verification reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .bayes import (
    BayesHierarchy,
    mc_posterior_oracle,
    posterior_global_sharing,
    posterior_global_sharing_exact,
    posterior_group_sharing,
    posterior_no_sharing,
    variance_ratio_global,
    variance_ratio_group,
)
from .core import ConfigError, ContractError, GroupFLError, RunConfig, seeded_rng
from .datagen import (
    GaussianGenConfig,
    TextGenConfig,
    gen_gaussian_population,
    gen_text_population,
    load_population,
)
from .engine import (
    METHODS,
    CostReport,
    Population,
    RoundLog,
    cost_accounting,
    run_global_training,
    run_group_finetuning,
    run_personalization,
    write_round_log_csv,
)
from .models import GaussianMeanModel, TinyBigramLM, TrainableModel

__all__ = [
    "ExperimentSpec",
    "MethodResult",
    "run_experiment",
    "evaluate",
    "emit_histogram",
    "histogram_csv",
    "bayes_report",
    "bayes_report_csv",
]

PERSONALIZED = {"PerFL": "FL", "GroupPerFL": "GroupFL"}
MC_MEAN_STDERRS = 3.0
MC_VARIANCE_RTOL = 0.05
RATIO_ATOL = 1e-12


@dataclass(frozen=True)
class ExperimentSpec:
    """What to run: a data source, stage hyper-parameters and the methods to compare.

    ``data`` is a dict with ``kind`` set to ``"text"`` or ``"gaussian"`` (the
    remaining keys configure the generator) or ``"population"`` (with ``path``
    and ``task``). Repeat ``r`` uses seed ``run.seed + r`` for both data and
    training.
    """

    data: Mapping
    run: RunConfig = field(default_factory=RunConfig)
    methods: tuple[str, ...] = METHODS
    output_dir: str | None = None
    repeats: int = 1
    eta_il_grid: tuple[float, ...] | None = None
    model: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if self.data.get("kind") not in ("text", "gaussian", "population"):
            raise ConfigError("data.kind must be one of text, gaussian, population")
        if self.eta_il_grid is not None and (not self.eta_il_grid or min(self.eta_il_grid) < 0):
            raise ConfigError("eta_il_grid must be a non-empty list of non-negative rates")

    def to_dict(self) -> dict:
        return {
            "data": dict(self.data),
            "run": self.run.to_dict(),
            "methods": list(self.methods),
            "repeats": self.repeats,
            "eta_il_grid": None if self.eta_il_grid is None else list(self.eta_il_grid),
            "model": dict(self.model),
        }

    @classmethod
    def from_dict(cls, data: dict, output_dir=None) -> "ExperimentSpec":
        data = dict(data)
        known = {"data", "run", "methods", "repeats", "eta_il_grid", "model", "output_dir"}
        if set(data) - known:
            raise ConfigError(f"unknown experiment keys: {sorted(set(data) - known)}")
        if "data" not in data:
            raise ConfigError("experiment config needs a data section")
        grid = data.get("eta_il_grid")
        return cls(
            data=data["data"],
            run=RunConfig.from_dict(data.get("run", {})),
            methods=tuple(data.get("methods", METHODS)),
            output_dir=output_dir if output_dir is not None else data.get("output_dir"),
            repeats=int(data.get("repeats", 1)),
            eta_il_grid=None if grid is None else tuple(float(x) for x in grid),
            model=data.get("model", {}),
        )


@dataclass
class MethodResult:
    method: str
    seed: int
    per_group: dict[str, float]
    per_client: dict[str, float]
    costs: dict[str, CostReport]
    eta_il: float | None
    config: dict
    code_version: str = __version__

    @property
    def mean_metric(self) -> float:
        """Unweighted mean of the per-group metrics."""
        return float(np.mean([self.per_group[g] for g in sorted(self.per_group)]))


def _build_data(spec: ExperimentSpec, seed: int) -> tuple[Population, TrainableModel]:
    data = dict(spec.data)
    kind = data.pop("kind")
    model_kw = dict(spec.model)
    if kind == "text":
        data["seed"] = seed
        cfg = TextGenConfig.from_dict(data)
        return gen_text_population(cfg), TinyBigramLM(cfg.vocab_size, **model_kw)
    if kind == "gaussian":
        data["seed"] = seed
        try:
            cfg = GaussianGenConfig(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return gen_gaussian_population(cfg)[0], GaussianMeanModel()
    pop = load_population(data["path"])
    if data.get("task", "text") == "text":
        return pop, TinyBigramLM(int(data.get("vocab_size", 64)), **model_kw)
    return pop, GaussianMeanModel()


def evaluate(model: TrainableModel, pop: Population, params_of) -> tuple[dict, dict]:
    """Per-group and per-client held-out metrics; ``params_of(client_id)`` picks the model.

    Language models report token-weighted perplexity, other models the
    example-weighted mean of their own metric.
    """
    per_client, per_group = {}, {}
    for gid in sorted(pop.groups):
        num, den = 0.0, 0
        for cid in pop.groups[gid]:
            held_out = pop.clients[cid].eval_examples
            if len(held_out) == 0:
                continue
            params = params_of(cid)
            if hasattr(model, "nll"):
                total, count = model.nll(params, held_out)
                if count == 0:
                    continue
                per_client[cid] = float(np.exp(total / count))
                num += total
                den += count
            else:
                per_client[cid] = model.eval_metric(params, held_out)
                num += per_client[cid] * len(held_out)
                den += len(held_out)
        if den:
            per_group[gid] = float(np.exp(num / den)) if hasattr(model, "nll") else num / den
    return per_group, per_client


def _run_seed(spec: ExperimentSpec, seed: int, workers: int):
    cfg = spec.run.replace(seed=seed)
    pop, model = _build_data(spec, seed)
    methods = set(spec.methods)
    roster = set(pop.clients)
    global_model, global_logs = run_global_training(pop, model, cfg, workers=workers)
    group_models, group_logs = None, []
    if methods & {"GroupFL", "GroupPerFL"}:
        group_models, group_logs = run_group_finetuning(pop, global_model, model, cfg, workers=workers)

    starts = {
        "FL": lambda cid: global_model,
        "GroupFL": lambda cid: group_models[pop.group_of(cid)],
    }
    logs_of: dict[str, list[RoundLog]] = {"FL": global_logs, "GroupFL": global_logs + group_logs}
    results = []
    for method in METHODS:
        if method not in methods:
            continue
        eta_used = None
        if method in PERSONALIZED:
            base = PERSONALIZED[method]
            seeds = ({g: global_model for g in pop.groups} if base == "FL" else group_models)
            grid = spec.eta_il_grid or (cfg.eta_il,)
            best = None
            for eta in grid:
                personal, p_logs = run_personalization(pop, seeds, model, cfg.replace(eta_il=eta),
                                                       workers=workers)
                per_group, per_client = evaluate(model, pop, personal.__getitem__)
                score = float(np.mean([per_group[g] for g in sorted(per_group)]))
                if best is None or score < best[0]:
                    best = (score, eta, per_group, per_client, p_logs)
            _, eta_used, per_group, per_client, p_logs = best
            logs = logs_of[base] + p_logs
        else:
            per_group, per_client = evaluate(model, pop, starts[method])
            logs = logs_of[method]
        costs = {cid: cost_accounting(logs, method, cid, roster) for cid in sorted(roster)}
        results.append((MethodResult(method, seed, per_group, per_client, costs, eta_used,
                                     {**spec.to_dict(), "run": cfg.to_dict()}), logs))
    return pop, results


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _write_seed_outputs(root: Path, pop: Population, results) -> None:
    methods = [r.method for r, _ in results]
    with open(root / "results.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", *methods])
        groups = sorted(results[0][0].per_group)
        for gid in groups:
            w.writerow([gid, *(_fmt(r.per_group[gid]) for r, _ in results)])
        w.writerow(["mean", *(_fmt(r.mean_metric) for r, _ in results)])
    with open(root / "clients.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "group_id", "num_train", *methods])
        for cid in sorted(results[0][0].per_client):
            rec = pop.clients[cid]
            w.writerow([cid, rec.group_id, rec.num_train,
                        *(_fmt(r.per_client[cid]) for r, _ in results)])
    with open(root / "costs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "method", "communication", "computation"])
        for r, _ in results:
            for cid in sorted(r.costs):
                c = r.costs[cid]
                w.writerow([cid, r.method, c.communication, c.computation])
    for r, logs in results:
        write_round_log_csv(logs, root / f"round_log_{r.method}.csv")
    by_method = {r.method: r for r, _ in results}
    if "GroupPerFL" in by_method and "PerFL" in by_method:
        table, _ = emit_histogram(by_method["GroupPerFL"], by_method["PerFL"], bins=20)
        (root / "histogram_GroupPerFL_vs_PerFL.csv").write_text(histogram_csv(table),
                                                                 encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> list[MethodResult]:
    """Run every requested method for each repeat seed and write CSV artifacts.

    Stage-1 training is shared by all methods of a seed and stage 2 by both
    group methods. Outputs are written to a sibling ``.partial`` directory and
    moved into ``spec.output_dir`` only after every seed finished.
    """
    all_results: list[MethodResult] = []
    seed_runs = []
    for r in range(spec.repeats):
        seed = spec.run.seed + r
        try:
            pop, results = _run_seed(spec, seed, workers)
        except GroupFLError as exc:
            raise type(exc)(f"experiment aborted at seed {seed}: {exc}") from exc
        seed_runs.append((seed, pop, results))
        all_results.extend(res for res, _ in results)
    if spec.output_dir is None:
        return all_results

    out = Path(spec.output_dir)
    if out.exists() and any(out.iterdir()) and not (out / "manifest.json").exists():
        raise ConfigError(f"{out} exists and was not written by this harness; refusing to overwrite")
    partial = out.with_name(out.name + ".partial")
    shutil.rmtree(partial, ignore_errors=True)
    try:
        partial.mkdir(parents=True)
        config_text = json.dumps({**spec.to_dict(), "code_version": __version__},
                                 indent=2, sort_keys=True) + "\n"
        (partial / "config.json").write_text(config_text, encoding="utf-8")
        with open(partial / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "method", "eta_il", "mean_metric"])
            for res in all_results:
                w.writerow([res.seed, res.method, _fmt(res.eta_il), _fmt(res.mean_metric)])
        for seed, pop, results in seed_runs:
            seed_dir = partial / f"seed_{seed}"
            seed_dir.mkdir()
            _write_seed_outputs(seed_dir, pop, results)
        artifacts = sorted(p for p in partial.rglob("*") if p.is_file())
        manifest = {
            "code_version": __version__,
            "config_hash": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
            "artifacts": [{"path": p.relative_to(partial).as_posix(), "sha256": _sha256(p)}
                          for p in artifacts],
        }
        (partial / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                               encoding="utf-8")
        shutil.rmtree(out, ignore_errors=True)
        partial.rename(out)
    except BaseException:
        shutil.rmtree(partial, ignore_errors=True)
        raise
    return all_results


def emit_histogram(a: MethodResult | Mapping[str, float], b: MethodResult | Mapping[str, float],
                   bins: int = 20) -> tuple[list[tuple[float, float, int]], float]:
    """Histogram of per-client relative change ``(a - b) / b``.

    Returns ``(rows, negative_fraction)`` where rows are
    ``(bucket_low, bucket_high, count)`` over equal-width buckets spanning the
    observed range.
    """
    va = a.per_client if isinstance(a, MethodResult) else a
    vb = b.per_client if isinstance(b, MethodResult) else b
    if set(va) != set(vb):
        raise ContractError("histogram inputs cover different client sets")
    if not va:
        raise ContractError("histogram needs at least one client")
    if bins < 1:
        raise ContractError("bins must be positive")
    ids = sorted(va)
    change = np.array([(va[c] - vb[c]) / vb[c] for c in ids])
    lo, hi = float(change.min()), float(change.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(change, bins=bins, range=(lo, hi))
    rows = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
    return rows, float(np.mean(change < 0))


def histogram_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bucket_low", "bucket_high", "count"])
    for low, high, count in rows:
        w.writerow([repr(low), repr(high), count])
    return buf.getvalue()


REPORT_COLUMNS = ("hierarchy", "regime", "closed_mean", "closed_variance", "mc_mean",
                  "mc_variance", "mc_stderr", "ess", "ratio", "check", "passed")


def bayes_report(h: BayesHierarchy, n_samples: int = 1_000_000, seed: int = 0,
                 label: str = "h0") -> list[dict]:
    """Closed-form posteriors and variance ratios next to Monte-Carlo estimates.

    One row per regime (plus the exact group-summarised global posterior) and
    one per variance ratio. ``passed`` marks rows within tolerance: the mean
    within three standard errors and the variance within 5 % for MC rows, the
    closed-form ratio matching the direct variance quotient and the strict
    inequality (or exactly 1.0 for a single-client group) for ratio rows.
    """
    h.check()
    closed = {"none": posterior_no_sharing(h), "group": posterior_group_sharing(h)}
    if h.M >= 2:
        closed["global"] = posterior_global_sharing(h)
        closed["global_exact"] = posterior_global_sharing_exact(h)
    rows = []
    for regime, post in closed.items():
        mc_regime = "global" if regime.startswith("global") else regime
        est = mc_posterior_oracle(h, mc_regime, n_samples, seeded_rng(seed, f"bayes/{label}/{mc_regime}"))
        mean_ok = abs(post.mean - est.mean) <= MC_MEAN_STDERRS * est.stderr
        var_ok = abs(est.variance - post.variance) <= MC_VARIANCE_RTOL * post.variance
        rows.append({"hierarchy": label, "regime": regime, "closed_mean": post.mean,
                     "closed_variance": post.variance, "mc_mean": est.mean,
                     "mc_variance": est.variance, "mc_stderr": est.stderr, "ess": est.ess,
                     "ratio": None, "check": "mc", "passed": bool(mean_ok and var_ok)})
    ratio = variance_ratio_group(h)
    direct = closed["group"].variance / closed["none"].variance
    boundary = h.N[0] == 1
    ok = abs(ratio - direct) <= RATIO_ATOL and (ratio == 1.0 if boundary else ratio < 1.0)
    rows.append({"hierarchy": label, "regime": "ratio_group", "ratio": ratio,
                 "check": "boundary" if boundary else "strict", "passed": bool(ok)})
    if h.M >= 2:
        ratio = variance_ratio_global(h)
        direct = closed["global"].variance / closed["group"].variance
        ok = abs(ratio - direct) <= RATIO_ATOL and ratio < 1.0
        rows.append({"hierarchy": label, "regime": "ratio_global", "ratio": ratio,
                     "check": "strict", "passed": bool(ok)})
    return rows


def bayes_report_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        cells = []
        for col in REPORT_COLUMNS:
            v = row.get(col)
            if isinstance(v, bool):
                cells.append("pass" if v else "FAIL")
            elif isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append("" if v is None else str(v))
        w.writerow(cells)
    return buf.getvalue()

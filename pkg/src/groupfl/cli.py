"""Command-line entry point.

Subcommands: ``datagen``, ``train``, ``experiment``, ``histogram``,
``bayes-check`` and ``cost-report``. Exit codes: 0 success, 1 config error,
2 divergence, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .bayes import BayesHierarchy, random_hierarchy
from .core import (
    ConfigError,
    ContractError,
    DivergenceError,
    PersistenceError,
    RunConfig,
    VerificationError,
    save_checkpoint,
    seeded_rng,
)
from .datagen import (
    GaussianGenConfig,
    TextGenConfig,
    gen_gaussian_population,
    gen_text_population,
    load_population,
    save_population,
)
from .engine import (
    METHODS,
    cost_accounting,
    read_round_log_csv,
    run_global_training,
    run_group_finetuning,
    run_personalization,
    write_round_log_csv,
)
from .experiment import (
    ExperimentSpec,
    bayes_report,
    bayes_report_csv,
    emit_histogram,
    evaluate,
    histogram_csv,
    run_experiment,
)
from .models import GaussianMeanModel, TinyBigramLM

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_VERIFICATION = 0, 1, 2, 3


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return data


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run config overrides")
    for f in dataclasses.fields(RunConfig):
        kind = {"int": int, "float": float, "str": str}[f.type]
        group.add_argument(f"--{f.name}", type=kind, default=None, dest=f"run_{f.name}")


def _run_overrides(args) -> dict:
    return {f.name: getattr(args, f"run_{f.name}") for f in dataclasses.fields(RunConfig)
            if getattr(args, f"run_{f.name}") is not None}


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_datagen(args) -> int:
    data = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.kind == "text":
        pop = gen_text_population(TextGenConfig.from_dict(data))
    else:
        try:
            cfg = GaussianGenConfig(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        pop, _ = gen_gaussian_population(cfg)
    save_population(pop, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    base = RunConfig.from_json_file(args.config).to_dict() if args.config else {}
    cfg = RunConfig.from_dict({**base, **_run_overrides(args)})
    pop = load_population(args.population)
    model = TinyBigramLM(args.vocab_size) if args.task == "text" else GaussianMeanModel()
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")

    global_model, logs = run_global_training(pop, model, cfg, workers=args.workers)
    save_checkpoint(global_model, out / "global.ckpt")
    params_of = lambda cid: global_model  # noqa: E731
    if args.method in ("GroupFL", "GroupPerFL"):
        group_models, group_logs = run_group_finetuning(pop, global_model, model, cfg,
                                                        workers=args.workers)
        logs += group_logs
        for gid, params in group_models.items():
            save_checkpoint(params, out / f"group_{gid}.ckpt")
        params_of = lambda cid: group_models[pop.group_of(cid)]  # noqa: E731
    else:
        group_models = {g: global_model for g in pop.groups}
    if args.method in ("PerFL", "GroupPerFL"):
        personal, p_logs = run_personalization(pop, group_models, model, cfg, workers=args.workers)
        logs += p_logs
        (out / "personal").mkdir(exist_ok=True)
        for cid, params in personal.items():
            save_checkpoint(params, out / "personal" / f"{cid}.ckpt")
        params_of = personal.__getitem__
    write_round_log_csv(logs, out / "round_log.csv")
    per_group, _ = evaluate(model, pop, params_of)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", args.method])
        for gid in sorted(per_group):
            w.writerow([gid, repr(per_group[gid])])
    return EXIT_OK


def cmd_experiment(args) -> int:
    data = _read_json(args.config)
    overrides = _run_overrides(args)
    if overrides:
        data["run"] = {**data.get("run", {}), **overrides}
    if args.repeats is not None:
        data["repeats"] = args.repeats
    spec = ExperimentSpec.from_dict(data, output_dir=args.output_dir)
    if spec.output_dir is None:
        raise ConfigError("experiment needs --output-dir or output_dir in the config")
    results = run_experiment(spec, workers=args.workers)
    for res in results:
        eta = "" if res.eta_il is None else f" (eta_il={res.eta_il:g})"
        print(f"seed {res.seed} {res.method:>10}: {res.mean_metric:.4f}{eta}")
    return EXIT_OK


def _read_client_metrics(path, method) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if method not in (reader.fieldnames or []):
            raise ConfigError(f"{path} has no column {method!r}")
        return {row["client_id"]: float(row[method]) for row in reader}


def cmd_histogram(args) -> int:
    a = _read_client_metrics(args.clients, args.a)
    b = _read_client_metrics(args.clients_b or args.clients, args.b)
    rows, negative = emit_histogram(a, b, args.bins)
    _emit(histogram_csv(rows), args.out)
    print(f"negative_fraction={negative!r}", file=sys.stderr)
    return EXIT_OK


def cmd_bayes_check(args) -> int:
    hierarchies = []
    if args.hierarchy:
        data = _read_json(args.hierarchy)
        try:
            hierarchies.append(("h0", BayesHierarchy.build(
                data["x"], data["sigma_mn_sq"], data["sigma0_sq"])))
        except KeyError as exc:
            raise ConfigError(f"hierarchy file lacks {exc}") from exc
    rng = seeded_rng(args.seed, "bayes-check/hierarchies")
    for i in range(args.random):
        hierarchies.append((f"random{i}", random_hierarchy(rng)))
    if not hierarchies:
        raise ConfigError("give --hierarchy and/or --random N")
    rows = []
    for label, h in hierarchies:
        rows.extend(bayes_report(h, args.n_samples, args.seed, label))
    _emit(bayes_report_csv(rows), args.out)
    failed = [r for r in rows if not r["passed"]]
    if failed:
        print(f"{len(failed)} of {len(rows)} checks failed", file=sys.stderr)
        return EXIT_VERIFICATION
    return EXIT_OK


def cmd_cost_report(args) -> int:
    cfg = RunConfig.from_json_file(args.config)
    logs = read_round_log_csv(args.round_log, cfg.K, cfg.K_l)
    roster = None
    if args.population:
        roster = set(load_population(args.population).clients)
    clients = sorted(roster if roster is not None else {c for l in logs for c in l.sampled_clients})
    lines = ["client_id,method,communication,computation"]
    for cid in clients:
        rep = cost_accounting(logs, args.method, cid, roster)
        lines.append(f"{cid},{args.method},{rep.communication},{rep.computation}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupfl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic population file")
    p.add_argument("--kind", choices=("text", "gaussian"), default="text")
    p.add_argument("--config", help="JSON generator config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="run one method on a population file")
    p.add_argument("--population", required=True)
    p.add_argument("--task", choices=("text", "gaussian"), default="text")
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--method", choices=METHODS, default="GroupPerFL")
    p.add_argument("--config", help="JSON RunConfig")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="compare FL, PerFL, GroupFL and GroupPerFL")
    p.add_argument("--config", required=True, help="JSON experiment spec")
    p.add_argument("--output-dir")
    p.add_argument("--repeats", type=int)
    p.add_argument("--workers", type=int, default=1)
    _add_run_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("histogram", help="relative per-client metric change of method a vs b")
    p.add_argument("--clients", required=True, help="clients.csv from an experiment")
    p.add_argument("--clients-b", help="second clients.csv if b lives elsewhere")
    p.add_argument("--a", default="GroupPerFL")
    p.add_argument("--b", default="PerFL")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("bayes-check", help="closed-form posteriors vs Monte-Carlo oracle")
    p.add_argument("--hierarchy", help="JSON with x, sigma_mn_sq, sigma0_sq")
    p.add_argument("--random", type=int, default=0, help="also check N random hierarchies")
    p.add_argument("--n-samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bayes_check)

    p = sub.add_parser("cost-report", help="per-client communication and computation")
    p.add_argument("--round-log", required=True)
    p.add_argument("--config", required=True, help="RunConfig JSON used for the run")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--population", help="population file giving the full client roster")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cost_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, PersistenceError, NotImplementedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION

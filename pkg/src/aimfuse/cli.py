"""Batch experiment runner.

Exit codes: 0 success, 1 configuration or validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import shlex
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck as gc
from . import plotting
from .encoders import write_prompt_texts
from .errors import AimFuseError, ConfigError, DomainError, LeakageError, NumericError, ParseError, ShapeError
from .fusion import RoutingRecord, export_routing, read_routing
from .kgdata import (SETTINGS, Benchmark, SyntheticConfig, audit_split, generate_synthetic, load_benchmark,
                     make_split, parse_split, split_filename, write_benchmark, write_split)
from .metrics import (METRICS, MetricsReport, aggregate_folds, compute_f_rank, compute_metrics,
                      read_variant_matrix, subset_metrics, write_metrics_csv, write_subset_csv,
                      write_variant_matrix)
from .trainer import HistoryRow, TrainConfig, fit, predict, save_checkpoint, write_history

log = logging.getLogger("aimfuse")

SEED_ENV = "AIMFUSE_SEED"

ABLATION_PRESETS: dict[str, list[tuple[str, dict[str, str]]]] = {
    "semantic": [
        ("none", {"semantic": "none"}),
        ("biorel", {"semantic": "biorel"}),
        ("molsub", {"semantic": "molsub"}),
        ("ddigraph", {"semantic": "ddigraph"}),
        ("biorel+ddigraph", {"semantic": "biorel+ddigraph"}),
        ("molsub+ddigraph", {"semantic": "molsub+ddigraph"}),
        ("all-semantic", {"semantic": "biorel+molsub+ddigraph"}),
        ("parallel", {"semantic": "biorel+molsub", "semantic_mode": "parallel"}),
        ("biorel+molsub", {"semantic": "biorel+molsub"}),
    ],
    "experts": [(f"experts={e}", {"experts": str(e)}) for e in (2, 3, 4, 5)],
    "pairs": [(v, {"pair_variant": v}) for v in ("separate", "drug-average", "modality-pair")],
}


# -- config plumbing ------------------------------------------------------------

def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    values = {}
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def parse_overrides(items: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(args) -> TrainConfig:
    """Defaults < config file < --set < --seed; the environment seeds the default."""
    config = TrainConfig(seed=default_seed())
    if getattr(args, "config", None):
        config = TrainConfig.from_mapping(parse_config_file(args.config), config)
    config = TrainConfig.from_mapping(parse_overrides(getattr(args, "set", None)), config)
    if getattr(args, "seed", None) is not None:
        config = TrainConfig.from_mapping({"seed": args.seed}, config)
    return config


def resolve_seed(args) -> int:
    return args.seed if args.seed is not None else default_seed()


def _existing_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"data directory {p} does not exist")
    return p


def load_plan(bench: Benchmark, data_dir: Path, setting: str, folds: int | None, seed: int, split_path=None):
    """Split from ``--split``, else the data directory's split file, else a fresh seeded split."""
    if folds is not None and folds < 2:
        raise ConfigError(f"--folds must be >= 2, got {folds}")
    path = Path(split_path) if split_path else data_dir / split_filename(setting)
    if split_path and not path.is_file():
        raise ConfigError(f"split file {path} does not exist")
    if path.is_file():
        plan = parse_split(path, bench.dataset, bench.drugs, setting)
        if folds is not None and plan.k != folds:
            if split_path:
                raise ConfigError(f"split file {path} has {plan.k} folds but --folds {folds} was given")
            plan = make_split(bench.dataset, bench.drugs, setting, folds, seed)
    else:
        plan = make_split(bench.dataset, bench.drugs, setting, folds or 10, seed)
    audit_split(plan, bench.dataset, bench.drugs)
    return plan


# -- fold execution -------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    report: MetricsReport
    history: list[HistoryRow]
    probs: np.ndarray
    labels: np.ndarray
    pair_ids: np.ndarray
    record: RoutingRecord | None
    skipped: int


def run_fold(bench: Benchmark, train_pairs, test_pairs, config: TrainConfig, fold: int,
             out_dir: Path, test_adjacency: bool = False) -> FoldResult:
    if not test_pairs:
        raise ConfigError(f"fold {fold} has no test pairs; use fewer folds or more pairs")
    state = fit(bench, train_pairs, config)
    pred = predict(state, test_pairs, test_adjacency=test_adjacency)
    if len(pred.labels) == 0:
        raise ConfigError(f"fold {fold}: every test pair was skipped as unresolvable")
    report = compute_metrics(pred.probs, pred.labels)
    fold_dir = out_dir / f"fold{fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    write_history(state.history, fold_dir / "history.csv")
    save_checkpoint(state, fold_dir / "model.npz")
    export_routing(pred.record, fold_dir / "routing.tsv")
    write_tokens(pred.record.descriptors, fold_dir / "tokens.tsv")
    write_predictions(bench, pred, fold_dir / "predictions.tsv")
    return FoldResult(fold, report, state.history, pred.probs, pred.labels, pred.pair_ids, pred.record,
                      len(pred.skipped))


def _run_fold_job(job):
    return run_fold(*job)


def write_tokens(descriptors, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, (slot, mod) in enumerate(descriptors):
            fh.write(f"{i}\t{slot}\t{mod}\n")


def read_tokens(path) -> list[str]:
    names = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                _, slot, mod = line.rstrip("\n").split("\t")
                names.append(f"{slot}:{mod}")
    return names


def write_predictions(bench: Benchmark, pred, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, y, p in zip(pred.pair_ids, pred.labels, pred.probs):
            u, v, _ = bench.dataset.pairs[i]
            fh.write(f"{i}\t{u}\t{v}\t{y}\t{int(p.argmax())}\t{','.join(repr(float(x)) for x in p)}\n")


def run_experiment(bench: Benchmark, plan, config: TrainConfig, out_dir: Path, jobs: int = 1,
                   test_adjacency: bool = False) -> list[FoldResult]:
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs_list = [(bench, f.train_pairs, f.test_pairs, config, i, out_dir, test_adjacency)
                 for i, f in enumerate(plan.folds)]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_job, jobs_list))
    else:
        results = [_run_fold_job(j) for j in jobs_list]
    return results


def write_experiment_reports(results: list[FoldResult], out_dir: Path, figures: bool = True):
    summary = aggregate_folds([r.report for r in results])
    write_metrics_csv(summary, out_dir / "metrics.csv", [str(r.fold) for r in results])
    if figures:
        plotting.plot_histories({f"fold {r.fold}": r.history for r in results}, out_dir / "history.png")
        plotting.plot_fold_metrics([r.report for r in results], [str(r.fold) for r in results],
                                   out_dir / "metrics.png")
        record = RoutingRecord.concat([r.record for r in results])
        plotting.plot_routing(record.assigned_counts(), record.gates.mean(axis=0), out_dir / "routing.png")
        names = [f"{s}:{m}" for s, m in record.descriptors]
        plotting.plot_contributions(names, record.contributions.mean(axis=0), out_dir / "contributions.png")
    return summary


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    seed = resolve_seed(args)
    config = SyntheticConfig(drugs=args.drugs, events=args.events, pairs=args.pairs,
                             planted_rule=args.planted_rule, lm_dim=args.lm_dim)
    bench = generate_synthetic(config, seed)
    write_benchmark(bench, args.out, folds=args.folds, seed=seed)
    print(f"wrote {len(bench.drugs)} drugs, {len(bench.dataset)} pairs, {bench.dataset.n_events} events to {args.out}")
    return 0


def cmd_split(args) -> int:
    data_dir = _existing_dir(args.data)
    bench = load_benchmark(data_dir)
    plan = make_split(bench.dataset, bench.drugs, args.setting, args.folds, resolve_seed(args))
    audit_split(plan, bench.dataset, bench.drugs)
    out = Path(args.out) if args.out else data_dir / split_filename(args.setting)
    write_split(plan, out)
    print("fold,train_pairs,test_pairs,held_out_drugs")
    for i, f in enumerate(plan.folds):
        print(f"{i},{len(f.train_pairs)},{len(f.test_pairs)},{len(f.held_out)}")
    return 0


def write_config_echo(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in config.to_dict().items():
            fh.write(f"{k} = {v}\n")


def cmd_train_eval(args) -> int:
    data_dir = _existing_dir(args.data)
    config = build_config(args)
    subset = None
    if args.subset:
        subset_path = Path(args.subset)
        if not subset_path.is_file():
            raise ConfigError(f"subset file {subset_path} does not exist")
        subset = [ln.strip() for ln in subset_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not subset:
            raise ConfigError(f"subset file {subset_path} lists no drugs")
    bench = load_benchmark(data_dir)
    plan = load_plan(bench, data_dir, args.setting, args.folds, config.seed, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(config, out / "config.txt")
    results = run_experiment(bench, plan, config, out, args.jobs, args.test_adjacency)
    write_experiment_reports(results, out, figures=not args.no_figures)
    if subset is not None:
        rows = {}
        for r in results:
            pairs = [tuple(bench.dataset.pairs[i][:2]) for i in r.pair_ids]
            rows[str(r.fold)] = subset_metrics(r.probs, r.labels, pairs, subset)
        write_subset_csv(rows, out / "subset.csv")
    sys.stdout.write((out / "metrics.csv").read_text(encoding="utf-8"))
    skipped = sum(r.skipped for r in results)
    if skipped:
        print(f"skipped {skipped} unresolvable test pairs", file=sys.stderr)
    return 0


def parse_variant_file(path) -> list[tuple[str, dict[str, str]]]:
    """``name key=value ...`` per line; keys must be training-config fields."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"variant file {path} does not exist")
    variants = []
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, *items = shlex.split(line)
        try:
            variants.append((name, parse_overrides(items)))
        except ConfigError as exc:
            raise ConfigError(f"{path}:{n}: {exc}") from None
    return variants


def _check_variant_keys(variants) -> None:
    valid = TrainConfig.field_names()
    for name, overrides in variants:
        bad = sorted(set(overrides) - set(valid))
        if bad:
            raise ConfigError(f"variant {name!r}: unknown keys {bad}; valid keys: {', '.join(valid)}")


def cmd_ablate(args) -> int:
    data_dir = _existing_dir(args.data)
    base = build_config(args)
    groups: list[tuple[str, list]] = []
    if args.variants:
        groups.append((Path(args.variants).stem, parse_variant_file(args.variants)))
    for preset in args.preset or []:
        names = list(ABLATION_PRESETS) if preset == "all" else [preset]
        groups += [(p, ABLATION_PRESETS[p]) for p in names]
    if not groups:
        raise ConfigError("ablate needs --variants FILE or --preset")
    for _, variants in groups:
        _check_variant_keys(variants)
        seen = [n for n, _ in variants]
        if len(set(seen)) != len(seen):
            raise ConfigError(f"duplicate variant names in {seen}")
    configs = {(g, n): TrainConfig.from_mapping(o, base) for g, variants in groups for n, o in variants}

    bench = load_benchmark(data_dir)
    plan = load_plan(bench, data_dir, args.setting, args.folds, base.seed, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    refused = []
    print("group,variant," + ",".join(METRICS) + ",f_rank")
    for group, variants in groups:
        means = []
        for name, _ in variants:
            vdir = out / group / _safe_name(name)
            results = run_experiment(bench, plan, configs[(group, name)], vdir, args.jobs, args.test_adjacency)
            summary = write_experiment_reports(results, vdir, figures=False)
            write_config_echo(configs[(group, name)], vdir / "config.txt")
            means.append(summary.mean.as_array())
        names = [n for n, _ in variants]
        matrix = np.stack(means)
        if len(names) < 2:
            write_variant_matrix(names, matrix, out / f"matrix_{group}.csv")
            refused.append(group)
            continue
        f_rank = compute_f_rank(matrix)
        write_variant_matrix(names, matrix, out / f"matrix_{group}.csv", f_rank)
        if not args.no_figures:
            plotting.plot_f_rank(names, f_rank, out / f"frank_{group}.png")
        for name, row, fr in zip(names, matrix, f_rank):
            print(f"{group},{name}," + ",".join(f"{v:.4f}" for v in row) + f",{fr:.2f}")
    if refused:
        raise ConfigError(f"F-rank needs at least two variants; refused for group(s) {', '.join(refused)}")
    return 0


def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_.+=" else "_" for ch in name)


def cmd_frank(args) -> int:
    path = Path(args.metrics)
    if not path.is_file():
        raise ConfigError(f"metrics file {path} does not exist")
    names, matrix = read_variant_matrix(path)
    f_rank = compute_f_rank(matrix)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_variant_matrix(names, matrix, out / "frank.csv", f_rank)
        plotting.plot_f_rank(names, f_rank, out / "frank.png")
    print("variant,f_rank")
    for n, fr in zip(names, f_rank):
        print(f"{n},{fr:.2f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gc.run_suite(seed=resolve_seed(args), names=args.only)
    if args.only:
        missing = sorted(set(args.only) - {r.name for r in results})
        if missing:
            raise ConfigError(f"unknown gradient cases {missing}")
    print("case,component,max_rel_error,coords,status")
    for r in results:
        print(f"{r.name},{r.component},{r.max_rel_error:.3e},{r.checked},{'pass' if r.passed else 'FAIL'}")
    print("component,max_rel_error")
    by_comp: dict[str, float] = {}
    for r in results:
        by_comp[r.component] = max(by_comp.get(r.component, 0.0), r.max_rel_error)
    for comp, err in by_comp.items():
        print(f"{comp},{err:.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def cmd_telemetry_report(args) -> int:
    paths = [Path(p) for p in args.routing]
    rows = []
    for p in paths:
        if not p.is_file():
            raise ConfigError(f"routing file {p} does not exist")
        rows += read_routing(p)
    if not rows:
        raise ConfigError("routing files contain no instances")
    n_experts = len(rows[0].gates)
    lengths = {len(r.contributions) for r in rows}
    if any(len(r.gates) != n_experts for r in rows) or len(lengths) != 1:
        raise ConfigError("routing files disagree on expert or token counts")
    n_tokens = lengths.pop()
    token_file = paths[0].with_name("tokens.tsv")
    names = read_tokens(token_file) if token_file.is_file() else [f"t{i}" for i in range(n_tokens)]
    if len(names) != n_tokens:
        raise ConfigError(f"{token_file} lists {len(names)} tokens, routing rows carry {n_tokens}")

    assigned = np.bincount([r.assigned for r in rows], minlength=n_experts)
    gates = np.stack([r.gates for r in rows])
    selected = np.zeros(n_experts, dtype=np.int64)
    for r in rows:
        selected[r.selectors] += 1
    contrib = np.stack([r.contributions for r in rows])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["expert,assigned,selected,mean_gate"]
    lines += [f"{e},{assigned[e]},{selected[e]},{float(gates[:, e].mean())!r}" for e in range(n_experts)]
    (out / "experts.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    mean_c = contrib.mean(axis=0)
    clines = ["token,mean_contribution"] + [f"{n},{float(c)!r}" for n, c in zip(names, mean_c)]
    modalities: dict[str, float] = {}
    for n, c in zip(names, mean_c):
        mod = n.split(":", 1)[-1]
        modalities[mod] = modalities.get(mod, 0.0) + c
    mlines = ["modality,mean_contribution"] + [f"{m},{float(c)!r}" for m, c in modalities.items()]
    (out / "contributions.csv").write_text("\n".join(clines) + "\n", encoding="utf-8")
    (out / "modalities.csv").write_text("\n".join(mlines) + "\n", encoding="utf-8")
    if not args.no_figures:
        plotting.plot_routing(assigned, gates.mean(axis=0), out / "routing.png")
        plotting.plot_contributions(names, mean_c, out / "contributions.png")
    print("\n".join(lines))
    print("\n".join(mlines))
    return 0


def cmd_export_prompts(args) -> int:
    bench = load_benchmark(_existing_dir(args.data))
    n = write_prompt_texts(bench.channels, bench.drugs, args.out)
    print(f"wrote {n} prompt texts to {args.out}")
    return 0


# -- entry point ----------------------------------------------------------------

def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="benchmark directory")
    p.add_argument("--setting", choices=SETTINGS, default="both-unseen")
    p.add_argument("--folds", type=int, default=None, help="fold count (default: split file, else 10)")
    p.add_argument("--split", help="split assignment file (default: the data directory's)")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    p.add_argument("--test-adjacency", action="store_true", help="substitute unseen drugs' graph inputs")
    p.add_argument("--no-figures", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aimfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--drugs", type=int, default=50)
    p.add_argument("--events", type=int, default=8)
    p.add_argument("--pairs", type=int, default=600)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--planted-rule", action="store_true", help="label pairs by their latent clusters")
    p.add_argument("--lm-dim", type=int, default=32, help="prompt embedding width")
    p.add_argument("--folds", type=int, default=10, help="folds in the default split files")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="write and audit a fold assignment")
    p.add_argument("--data", required=True)
    p.add_argument("--setting", choices=SETTINGS, default="both-unseen")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="split file (default: inside the data directory)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-eval", help="cross-validated training and evaluation")
    _add_experiment_flags(p)
    p.add_argument("--subset", help="file of drug names for subset metrics")
    p.set_defaults(func=cmd_train_eval)

    p = sub.add_parser("ablate", help="run variants and rank them")
    _add_experiment_flags(p)
    p.add_argument("--variants", help="variant file: name key=value ...")
    p.add_argument("--preset", action="append", choices=list(ABLATION_PRESETS) + ["all"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("frank", help="F-rank of a variant metric matrix")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_frank)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--only", nargs="+", help="restrict to these case names")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("telemetry-report", help="summarise routing telemetry exports")
    p.add_argument("--routing", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_telemetry_report)

    p = sub.add_parser("export-prompts", help="write prompt texts for an external language model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_prompts)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors are configuration errors; exit code 2 is reserved for numeric failures
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ParseError, DomainError, ShapeError, LeakageError, AimFuseError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

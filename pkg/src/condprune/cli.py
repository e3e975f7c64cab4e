"""``condprune`` command line.

Exit codes:
    0  success
    1  ``verify`` found at least one failing check
    2  invalid configuration or unreadable input (missing flag, bad rate, malformed file)
    3  infeasible budget (no rate assignment can reach the requested beta)
    4  policy parameters diverged during training
    5  policy file is corrupt or truncated

Data goes to stdout; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import driver, report
from .cost import total_cost
from .exceptions import (CorruptPolicy, DivergedParameters, InfeasibleBudget, NoFeasibleAssignment,
                         PlanMismatch, PruningError)
from .fixtures import FixtureSpec, fixture_redundant_model
from .graph import load_model, save_model, validate_graph
from .inference import forward, load_dataset, save_dataset
from .policy import load_policy, save_policy
from .pruner import apply_plan, load_plan, zero_pruned
from .validation import check_dataset, check_model, check_rate

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_DIVERGED, EXIT_CORRUPT = range(6)

DEFAULT_GRID = (0.0, 0.25, 0.5, 0.75)
ZEROING_SAMPLES = 8
ZEROING_SEED = 0
ZEROING_TOL = 1e-5
# reported percentages are recomputed from the artifacts; this only absorbs float formatting
REPORT_TOL = 1e-9
BUDGET_METHODS = ("cacp", "oracle")

# argparse dest -> TrainConfig field
FLAG_FIELDS = {"beta": "beta_support", "alpha_max": "alpha_max", "episodes": "episodes",
               "seed": "seed", "jobs": "jobs"}


class ConfigError(Exception):
    """Invalid command-line or config-file input; maps to exit code 2."""


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required for '{args.command}'")


def _read_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"--config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"--config {path}: expected a JSON object")
    known = {f.name for f in dataclasses.fields(driver.TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"--config {path}: unknown keys {unknown}")
    return data


def resolve_config(args, require_seed: bool = False) -> driver.TrainConfig:
    """Flags override the config file, which overrides the defaults."""
    values = _read_config_file(getattr(args, "config", None))
    if require_seed and getattr(args, "seed", None) is None and "seed" not in values:
        raise ConfigError(f"--seed is required for '{args.command}'")
    for dest, field in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[field] = value
    if "beta_support" in values:
        values["beta_support"] = tuple(sorted({check_rate(b) for b in values["beta_support"]}))
    try:
        return driver.TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _load_inputs(args):
    model = check_model(load_model(args.model))
    return model, check_dataset(model, load_dataset(args.dataset))


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    _require(args, "model", "dataset")
    if args.policy is None and args.out is None:
        raise ConfigError("--policy or --out is required for 'train'")
    config = resolve_config(args, require_seed=True)
    model, dataset = _load_inputs(args)
    out = Path(args.out) if args.out is not None else Path(args.policy).parent
    policy_path = Path(args.policy) if args.policy is not None else out / "policy.bin"
    log_path = out / "episodes.jsonl"
    out.mkdir(parents=True, exist_ok=True)
    with log_path.open("w") as fh:
        def record(entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        theta = driver.train(model, dataset, config, log=record)
    save_policy(theta, policy_path)
    print(f"policy {policy_path}")
    print(f"log {log_path}")
    return EXIT_OK


def cmd_compress(args) -> int:
    _require(args, "model", "dataset", "policy", "out")
    config = resolve_config(args)
    grid = tuple(check_rate(g, "grid", allow_zero=True) for g in (args.grid or DEFAULT_GRID))
    theta = load_policy(args.policy)
    model, dataset = _load_inputs(args)
    out = Path(args.out)
    for beta in config.beta_support:
        runs = [driver.compress(model, theta, beta, dataset)]
        if "uniform" in args.baseline:
            runs.append(driver.baseline_uniform(model, beta, dataset))
        if "oracle" in args.baseline:
            runs.append(driver.oracle_report(model, beta, grid, dataset))
        for pruned, rep in runs:
            path = report.write_artifacts(out, pruned, rep)
            print(f"{rep.method} beta={beta:.2f} acc={rep.accuracy:.4f} "
                  f"flops_drop={rep.flops_drop_pct:.2f}% -> {path}")
    return EXIT_OK


def _collect_reports(args):
    paths = list(args.paths) or ([args.out] if args.out is not None else [])
    if not paths:
        raise ConfigError("no report inputs: pass report files/directories or --out")
    found = report.find_reports(paths)
    if not found:
        raise ConfigError(f"no *{report.REPORT_SUFFIX} files under {[str(p) for p in paths]}")
    return found


def cmd_report(args) -> int:
    found = _collect_reports(args)
    records = [report.load_report(p) for p in found]
    sys.stdout.write(report.render_table(records))
    if args.csv is not None:
        csv_path = Path(args.csv)
    else:
        first = Path(args.out if args.out is not None else args.paths[0])
        csv_path = (first if first.is_dir() else first.parent) / "report.csv"
    _write_text(csv_path, report.render_csv(records))
    print(f"csv {csv_path}", file=sys.stderr)
    return EXIT_OK


def verify_report(original, report_path: Path) -> list[tuple[str, bool, str]]:
    """Run every artifact check for one report; returns ``(check, ok, detail)`` triples."""
    results = []

    def check(name, fn):
        try:
            ok, detail = fn()
        except (PruningError, KeyError, ValueError) as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
        return ok

    record = report.load_report(report_path)
    base = report_path.parent
    state = {}

    def graph_validity():
        state["model"] = load_model(base / record["model_file"])
        problems = validate_graph(state["model"])
        return not problems, "; ".join(problems) or "ok"

    def plan_validity():
        state["plan"] = plan = load_plan(base / record["plan_file"])
        if abs(plan.beta - float(record["beta"])) > REPORT_TOL:
            raise PlanMismatch(f"plan beta {plan.beta} != report beta {record['beta']}")
        state["rebuilt"] = apply_plan(original, plan)
        return True, "ok"

    def plan_cost():
        rebuilt, saved = state["rebuilt"], state["model"]
        if rebuilt != saved:
            return False, "model file differs from original with plan applied"
        summary = driver.cost_summary(original, rebuilt, state["plan"])
        diffs = [k for k, v in summary.items() if not abs(v - float(record.get(k, np.nan))) <= REPORT_TOL]
        state.update(summary)
        return not diffs, f"mismatched fields {diffs}" if diffs else "ok"

    def budget():
        if record["method"] not in BUDGET_METHODS:
            return True, f"not applicable to method {record['method']!r}"
        need = 100.0 * (float(record["beta"]) - state["rounding_slack"])
        got = min(float(record["flops_drop_pct"]), state["flops_drop_pct"])
        return got >= need - REPORT_TOL, f"reduction {got:.4f}% vs required {need:.4f}%"

    def zeroing():
        rng = np.random.default_rng(ZEROING_SEED)
        x = rng.standard_normal((ZEROING_SAMPLES, *original.input_shape)).astype(np.float32)
        err = float(np.max(np.abs(forward(state["model"], x) - forward(zero_pruned(original, state["plan"]), x))))
        return err <= ZEROING_TOL, f"max |diff| = {err:.3g}"

    steps = [("graph validity", graph_validity), ("plan validity", plan_validity),
             ("plan-cost consistency", plan_cost), ("budget guarantee", budget),
             ("zeroing equivalence", zeroing)]
    for i, (name, fn) in enumerate(steps):
        if not check(name, fn):
            results.extend((later, False, "skipped after earlier failure") for later, _ in steps[i + 1:])
            break
    return results


def cmd_verify(args) -> int:
    _require(args, "model")
    original = check_model(load_model(args.model))
    found = _collect_reports(args)
    failed = 0
    for path in found:
        for name, ok, detail in verify_report(original, path):
            failed += not ok
            print(f"{'PASS' if ok else 'FAIL'} {path.name}: {name} ({detail})")
    print(f"{len(found)} report(s), {failed} failed check(s)")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_fixture(args) -> int:
    _require(args, "seed", "out")
    try:
        spec = FixtureSpec(widths=tuple(args.widths), redundancy=args.redundancy, seed=args.seed,
                           num_classes=args.classes, n_samples=args.samples)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model, dataset = fixture_redundant_model(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.json")
    save_dataset(dataset, out / "dataset.json")
    print(f"model {out / 'model.json'} ({total_cost(model)} MACs)")
    print(f"dataset {out / 'dataset.json'} ({len(dataset)} samples)")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condprune", description="Rate-conditioned channel pruning.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        if "model" in flags:
            p.add_argument("--model", help="model manifest (.json)")
        if "dataset" in flags:
            p.add_argument("--dataset", help="dataset manifest (.json)")
        if "policy" in flags:
            p.add_argument("--policy", help="policy parameter file")
        if "beta" in flags:
            p.add_argument("--beta", action="append", type=float, help="target rate; repeatable")
        if "config" in flags:
            p.add_argument("--config", help="JSON file with TrainConfig fields")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="fit one policy over a set of target rates")
    common(p, "model", "dataset", "policy", "beta", "config")
    p.add_argument("--alpha-max", type=float)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="prune at one or more rates with a trained policy")
    common(p, "model", "dataset", "policy", "beta", "config")
    p.add_argument("--baseline", action="append", choices=("uniform", "oracle"), default=[],
                   help="also write a baseline; repeatable")
    p.add_argument("--grid", action="append", type=float, help="oracle rate grid; repeatable")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("report", help="tabulate compression reports")
    p.add_argument("paths", nargs="*", help="report files or directories")
    p.add_argument("--out", help="directory holding reports")
    p.add_argument("--csv", help="CSV output path (default: report.csv next to the inputs)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="re-check compression artifacts")
    p.add_argument("paths", nargs="*", help="report files or directories")
    p.add_argument("--model", help="original model manifest")
    p.add_argument("--out", help="directory holding reports")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("fixture", help="write a synthetic model with removable channels")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--widths", type=int, nargs="+", default=list(FixtureSpec.widths))
    p.add_argument("--redundancy", type=float, default=FixtureSpec.redundancy)
    p.add_argument("--classes", type=int, default=FixtureSpec.num_classes)
    p.add_argument("--samples", type=int, default=FixtureSpec.n_samples)
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InfeasibleBudget, NoFeasibleAssignment) as exc:
        code, exc_ = EXIT_INFEASIBLE, exc
    except DivergedParameters as exc:
        code, exc_ = EXIT_DIVERGED, exc
    except CorruptPolicy as exc:
        code, exc_ = EXIT_CORRUPT, exc
    except (ConfigError, PruningError, ValueError, OSError) as exc:
        code, exc_ = EXIT_CONFIG, exc
    print(f"condprune: error: {type(exc_).__name__}: {exc_}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

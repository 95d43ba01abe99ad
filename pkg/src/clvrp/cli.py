"""Command line: generate-data, train, evaluate, ablate, inspect.

Exit codes: 0 ok, 1 runtime/numeric failure, 2 usage or input error.
The default output root is ``$CLVRP_RUNS`` (``runs`` when unset).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import torch

from . import __version__, config as cfgmod, evaluation, instances
from .policy import CheckpointError, InfeasibleReplayError, NumericError, load_checkpoint
from .trainer import ScheduleError, TrainConfig, run_training

log = logging.getLogger("clvrp")

RUNS_ENV = "CLVRP_RUNS"


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out_dir(path: str | None, default_name: str) -> Path:
    out = Path(path) if path else Path(os.environ.get(RUNS_ENV, "runs")) / default_name
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"output directory {out} already holds a run; refusing to modify it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --- datasets ---------------------------------------------------------------

def write_sets(out: Path, problem: str, sizes: list[int], count: int | None, seed: int) -> dict:
    """Generate one JSONL file per size; returns {size: {path, sha256, count}}."""
    entries = {}
    for size in sizes:
        n = count if count is not None else instances.desk_eval_count(size)
        insts = instances.generate_set(problem, size, n, seed)
        path = out / f"{problem}{size}_seed{seed}.jsonl"
        digest = instances.save_set(insts, path)
        entries[str(size)] = {"path": path.name, "sha256": digest, "count": n}
    return entries


def read_sets(root: Path, entries: dict) -> tuple[dict, dict]:
    sets, hashes = {}, {}
    for size, entry in entries.items():
        path = root / entry["path"]
        digest = instances.file_hash(path)
        if digest != entry["sha256"]:
            raise UsageError(f"{path} does not match its recorded hash")
        sets[int(size)] = instances.load_set(path)
        hashes[int(size)] = digest
    return sets, hashes


def load_data_arg(data: str) -> tuple[dict, dict]:
    """``--data`` may name a run directory, a data directory, or a single JSONL file."""
    path = Path(data)
    if path.is_file():
        insts = instances.load_set(path)
        size = insts[0].n_customers
        return {size: insts}, {size: instances.file_hash(path)}
    for name in ("run_manifest.json", "data_manifest.json"):
        manifest = path / name
        if manifest.exists():
            m = json.loads(manifest.read_text())
            root = path / m.get("data_dir", ".")
            return read_sets(root, m["datasets"])
    raise UsageError(f"{data}: no dataset manifest found")


def cmd_generate(args) -> int:
    out = _out_dir(args.out, f"data-{args.problem}-s{args.seed}")
    entries = write_sets(out, args.problem, args.sizes, args.count, args.seed)
    _write_json(out / "data_manifest.json", {
        "problem": args.problem, "seed": args.seed, "sizes": args.sizes,
        "count": args.count, "datasets": entries, "version": __version__,
    })
    print(f"wrote {len(entries)} dataset(s) to {out}")
    return 0


# --- train ------------------------------------------------------------------

def _overrides(args) -> list:
    out = [cfgmod.parse_override(s) for s in args.set or []]
    if args.seed is not None:
        out.append(("train", "seed", args.seed))
    if getattr(args, "problem", None):
        out.append(("train", "problem", args.problem))
    return out


def _eval_sets_for(run: cfgmod.RunConfig, data_dir: Path) -> dict:
    settings = run.eval
    sizes = settings.sizes or run.train.schedule.sizes
    return write_sets(data_dir, run.train.problem, sizes, settings.count, settings.seed)


def _evaluate_run(policy, run: cfgmod.RunConfig, sets, hashes, label, method) -> evaluation.EvalReport:
    refs = None
    if run.eval.reference:
        refs = {size: evaluation.reference_costs(insts) for size, insts in sets.items()}
    return evaluation.evaluate(policy, sets, run.eval.n_starts, run.eval.augmentation, refs,
                               method=method, checkpoint=label,
                               datasets={s: h[:12] for s, h in hashes.items()})


def train_run(run: cfgmod.RunConfig, out: Path, timestamps: bool = True, method: str = "clvrp") -> dict:
    data_dir = out / "data"
    data_dir.mkdir()
    datasets = _eval_sets_for(run, data_dir)
    manifest = {
        "version": __version__,
        "config": run.to_dict(),
        "config_hash": run.hash(),
        "seed": run.train.seed,
        "data_dir": "data",
        "datasets": datasets,
        "checkpoints": [],
    }
    _write_json(out / "run_manifest.json", manifest)
    result = run_training(run.train, out_dir=out, timestamps=timestamps)
    manifest["checkpoints"] = [c.path.name for c in result.checkpoints]
    sets, hashes = read_sets(data_dir, datasets)
    final = result.checkpoints[-1]
    report = _evaluate_run(result.policy, run, sets, hashes, final.path.name, method)
    (out / "final_eval.jsonl").write_text(report.to_jsonl())
    (out / "final_eval.csv").write_text(report.to_csv())
    manifest["final_eval"] = {str(r.size): r.mean_obj for r in report.records}
    manifest["final_average"] = report.average
    _write_json(out / "run_manifest.json", manifest)
    with open(out / "train_log.jsonl", "a") as fh:
        fh.write(json.dumps({"event": "final_eval", "checkpoint": final.path.name,
                             "mean_obj": manifest["final_eval"], "average": report.average}) + "\n")
    print(report.to_table())
    return manifest


def cmd_train(args) -> int:
    run = cfgmod.load(args.config, _overrides(args))
    out = _out_dir(args.out, f"train-{run.hash()}-s{run.train.seed}")
    train_run(run, out, timestamps=not args.no_timestamps)
    print(f"run written to {out}")
    return 0


# --- evaluate ---------------------------------------------------------------

def cmd_evaluate(args) -> int:
    policy, payload = load_checkpoint(args.checkpoint)
    problem = policy.config.problem
    if args.data:
        sets, hashes = load_data_arg(args.data)
        if args.sizes:
            missing = set(args.sizes) - set(sets)
            if missing:
                raise UsageError(f"sizes {sorted(missing)} are not in {args.data}")
            sets = {s: sets[s] for s in args.sizes}
            hashes = {s: hashes[s] for s in args.sizes}
    else:
        if not args.sizes:
            raise UsageError("evaluate needs --sizes or --data")
        sets, hashes = {}, {}
        for size in args.sizes:
            n = args.count if args.count is not None else instances.desk_eval_count(size)
            sets[size] = instances.generate_set(problem, size, n, args.seed)
    refs = None
    if args.reference:
        refs = {size: evaluation.reference_costs(insts) for size, insts in sets.items()}
    report = evaluation.evaluate(policy, sets, args.n_starts, args.aug, refs, method=args.method,
                                 checkpoint=Path(args.checkpoint).name,
                                 datasets={s: h[:12] for s, h in hashes.items()} or None)
    print(report.to_table())
    if args.out:
        out = _out_dir(args.out, "eval")
        (out / "report.jsonl").write_text(report.to_jsonl())
        (out / "report.csv").write_text(report.to_csv())
        _write_json(out / "report_manifest.json", {
            "checkpoint": str(args.checkpoint), "config_hash": payload.get("config_hash"),
            "seed": payload.get("seed"), "eval_seed": args.seed, "datasets": {str(k): v for k, v in hashes.items()},
        })
    return 0


# --- ablate -----------------------------------------------------------------

ABLATION_ROWS = (  # (replay, regularization)
    (False, "none"),
    (False, "inter"),
    (False, "intra"),
    (True, "none"),
    (True, "inter"),
    (True, "intra"),
)


def ablation_rows(toggles: list[str]) -> list[tuple[bool, str]]:
    unknown = set(toggles) - {"er", "inter", "intra"}
    if unknown:
        raise UsageError(f"unknown ablation toggles: {sorted(unknown)}")
    rows = []
    for er, reg in ABLATION_ROWS:
        if er and "er" not in toggles:
            continue
        if reg != "none" and reg not in toggles:
            continue
        rows.append((er, reg))
    return rows


def row_name(er: bool, reg: str) -> str:
    return f"er-{'on' if er else 'off'}_reg-{reg}"


def cmd_ablate(args) -> int:
    base = cfgmod.load(args.config, _overrides(args))
    toggles = [t.strip() for t in args.grid.split(",") if t.strip()]
    rows = ablation_rows(toggles)
    out = _out_dir(args.out, f"ablate-{base.hash()}-s{base.train.seed}")
    summary = []
    for er, reg in rows:
        train = replace(base.train, replay=er, regularization=reg)
        run = cfgmod.RunConfig(train, base.eval)
        sub = out / row_name(er, reg)
        sub.mkdir()
        manifest = train_run(run, sub, timestamps=not args.no_timestamps, method=row_name(er, reg))
        summary.append({"er": er, "regularization": reg, "config_hash": run.hash(),
                        "mean_obj": manifest["final_eval"], "average": manifest["final_average"]})
    _write_json(out / "ablation_summary.json", summary)
    print(f"{'ER':<4} {'Inter':<6} {'Intra':<6} {'Average':>10}")
    for row in summary:
        print(f"{'x' if row['er'] else '-':<4} {'x' if row['regularization'] == 'inter' else '-':<6} "
              f"{'x' if row['regularization'] == 'intra' else '-':<6} {row['average']:>10.4f}")
    return 0


# --- inspect ----------------------------------------------------------------

def cmd_inspect(args) -> int:
    policy, payload = load_checkpoint(args.checkpoint)
    info = {
        "version": payload.get("version"),
        "policy_config": asdict(policy.config),
        "parameters": sum(p.numel() for p in policy.parameters()),
        "epoch": payload.get("epoch"),
        "task_index": payload.get("task_index"),
        "seed": payload.get("seed"),
        "config_hash": payload.get("config_hash"),
        "has_exemplar": payload.get("exemplar") is not None,
        "exemplar_last_update": payload.get("exemplar_last_update"),
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clvrp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--workers", type=int, default=1, help="torch intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write cached evaluation instance sets")
    g.add_argument("--problem", choices=["tsp", "cvrp"], required=True)
    g.add_argument("--sizes", type=_int_list, required=True)
    g.add_argument("--count", type=int, default=None, help="instances per size (default: desk counts)")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    def run_flags(q):
        q.add_argument("--config", help="TOML config file")
        q.add_argument("--seed", type=int)
        q.add_argument("--problem", choices=["tsp", "cvrp"])
        q.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        q.add_argument("--out")
        q.add_argument("--no-timestamps", action="store_true", help="omit wall-clock times from logs")

    t = sub.add_parser("train", help="run continual-learning training")
    run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--sizes", type=_int_list)
    e.add_argument("--data", help="run directory, data directory, or JSONL instance file")
    e.add_argument("--count", type=int)
    e.add_argument("--seed", type=int, default=2024)
    e.add_argument("--n-starts", type=int)
    e.add_argument("--aug", action=argparse.BooleanOptionalAction, default=True)
    e.add_argument("--reference", action="store_true", help="compute gaps against oracle/2-opt references")
    e.add_argument("--method", default="policy")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run the replay/regularization toggle matrix")
    run_flags(a)
    a.add_argument("--grid", default="er,inter,intra")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect", help="print checkpoint metadata")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    torch.set_num_threads(args.workers)
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError, ScheduleError, CheckpointError,
            FileNotFoundError, instances.ParseError, ValueError) as exc:
        print(f"clvrp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, InfeasibleReplayError, RuntimeError) as exc:
        print(f"clvrp {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

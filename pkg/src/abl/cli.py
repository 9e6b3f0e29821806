"""Command-line harness: gen-data, train, eval, report.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datasets, trainer
from .neural import TrainConfig
from .perception import GlyphFamilySpec, labeled_glyphs, perception_accuracy

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
SEMANTICS = {"add": "binary_add", "xor": "xor"}


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def parse_range(text: str) -> tuple:
    """'5..8' -> (5, 8); '7' -> (7, 7)."""
    try:
        if ".." in text:
            a, b = text.split("..")
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError:
        raise ValidationError(f"bad range {text!r}; expected A..B") from None
    if lo > hi:
        raise ValidationError(f"empty range {text!r}")
    return lo, hi


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: dict
    artifacts: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    versions: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _versions() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "abl": "0.1.0"}


def _checksums(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            if q.name != "run_manifest.json":
                out[str(q)] = sha256_file(q)
    return out


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> RunManifest:
    lo, hi = parse_range(args.lengths)
    if lo < 5:
        raise ValidationError(f"length {lo} is infeasible (minimum 5)")
    if args.per_length < 1:
        raise ValidationError("--per-length must be >= 1")
    spec = datasets.DatasetSpec(SEMANTICS[args.semantics], args.glyphs, tuple(range(lo, hi + 1)),
                                args.per_length, args.positive_fraction, args.seed, args.noise)
    ds = datasets.generate(spec)
    datasets.save(ds, args.out)
    return RunManifest("gen-data", [], {"spec": spec.to_json()},
                       {"seed": args.seed, "effective_seed": ds.effective_seed},
                       _checksums([args.out]))


def _monitor(glyphs: str, noise, per_class: int, seed: int):
    if per_class <= 0:
        return None
    X, y = labeled_glyphs(GlyphFamilySpec(glyphs, noise=noise), per_class, seed)
    return lambda p: perception_accuracy(p, X, y)


def trainer_config(args) -> trainer.TrainerConfig:
    lo, hi = parse_range(args.subsample)
    stages = tuple(int(s) for s in args.stages.split(",")) if args.stages else trainer.TrainerConfig.stages
    base = trainer.TrainerConfig()
    return trainer.TrainerConfig(
        iterations=args.iters, subsample=(lo, hi), k=args.k, n_features=args.features,
        stages=stages, seed=args.seed,
        perception=replace(base.perception, seed=args.seed),
        decision=replace(base.decision, seed=args.seed),
        dfo=replace(base.dfo, seed=args.seed))


def cmd_train(args) -> RunManifest:
    if args.freeze_perception and args.freeze_knowledge:
        raise ValidationError("--freeze-perception and --freeze-knowledge are exclusive")
    if (args.freeze_perception or args.freeze_knowledge) and not args.source:
        raise ValidationError("transfer modes need --from MODEL")
    try:
        cfg = trainer_config(args)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    ds = datasets.load(args.data)
    view = ds.training_view()
    monitor = _monitor(ds.spec.glyphs, ds.spec.glyph_noise, args.monitor_per_class, args.seed + 10_000)
    mode = "scratch"
    if args.freeze_perception:
        mode = "transfer_perception"
        src = trainer.load_model(args.source)
        model = trainer.transfer_perception(src.perception, view, cfg, monitor)
    elif args.freeze_knowledge:
        mode = "transfer_knowledge"
        src = trainer.load_model(args.source)
        model = trainer.transfer_knowledge(src, view, cfg, monitor)
    else:
        model = trainer.fit(view, cfg, monitor)
    out = Path(args.out)
    trainer.save_model(model, out, {"mode": mode, "data": str(args.data),
                                    "curriculum": list(cfg.stages)})
    trainer.write_log(model.log, out / "train_log.csv")
    return RunManifest("train", [], {"trainer": cfg.to_json(), "mode": mode, "data": str(args.data),
                                     "from": args.source},
                       {"seed": args.seed}, _checksums([out]))


def evaluate(model: trainer.AbductiveModel, ds) -> list[dict]:
    """Per-length accuracy rows plus an overall row."""
    pred = trainer.predict_many(model, ds.images)
    correct = pred == ds.labels
    lengths = ds.lengths
    rows = []
    for L in sorted(set(lengths.tolist())):
        c = correct[lengths == L]
        rows.append(_row(str(L), c))
    rows.append(_row("overall", correct))
    return rows


def _row(name, c) -> dict:
    n = len(c)
    acc = float(np.mean(c)) if n else float("nan")
    se = float(np.sqrt(acc * (1 - acc) / n)) if n else float("nan")
    return {"length": name, "n": n, "accuracy": round(acc, 6), "stderr": round(se, 6)}


def cmd_eval(args) -> RunManifest:
    model_dir = Path(args.model)
    manifest = json.loads((model_dir / "manifest.json").read_text())
    try:
        model = trainer.load_model(model_dir)
    except ValueError as e:
        raise ValidationError(f"inconsistent model bundle: {e}") from None
    if model.decision is None or model.decision.spec.input_shape[0] != manifest["n_features"]:
        raise ValidationError("decision arity does not match the bundle's features")
    ds = datasets.load(args.data)
    rows = evaluate(model, ds)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["length", "n", "accuracy", "stderr"])
        w.writeheader()
        w.writerows(rows)
    return RunManifest("eval", [], {"model": str(args.model), "data": str(args.data)}, {},
                       _checksums([args.out]))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_report(args) -> RunManifest:
    if not args.logs:
        raise ValidationError("report needs at least one --logs file")
    logs = {}
    for p in args.logs:
        rows = trainer.read_log(p)
        if not rows:
            raise ValidationError(f"empty training log {p}")
        logs[Path(p).parent.name or Path(p).stem] = rows
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = list(logs)
    n_iter = max(len(r) for r in logs.values())
    table_a = []
    for i in range(n_iter):
        table_a.append([i + 1] + [logs[n][i].perception_accuracy if i < len(logs[n]) else "" for n in names])
    _write_csv(out / "perception_vs_iteration.csv", ["iteration"] + names, table_a)
    table_b = [[n, r.iteration, r.perception_accuracy, r.consistency, r.subsample_size,
                int(r.consistency == r.subsample_size)] for n in names for r in logs[n]]
    _write_csv(out / "consistency_scatter.csv",
               ["run", "iteration", "perception_accuracy", "consistency", "subsample_size", "success"], table_b)
    table_c = []
    for n in names:
        conv = trainer.convergence_iteration(logs[n])
        table_c.append([n, "" if conv is None else conv, logs[n][-1].perception_accuracy])
    _write_csv(out / "convergence.csv", ["run", "convergence_iteration", "final_perception_accuracy"], table_c)
    if args.evals:
        rows = []
        for p in args.evals:
            with open(p, newline="") as fh:
                for r in csv.DictReader(fh):
                    rows.append([Path(p).stem, r["length"], r["n"], r["accuracy"], r["stderr"]])
        _write_csv(out / "accuracy_vs_length.csv", ["run", "length", "n", "accuracy", "stderr"], rows)
    return RunManifest("report", [], {"logs": list(args.logs), "evals": list(args.evals or [])}, {},
                       _checksums([out]))


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="abl", description="Abductive learning experiments on binary equations.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate an equation dataset")
    g.add_argument("--semantics", choices=sorted(SEMANTICS), default="add")
    g.add_argument("--glyphs", choices=["easy", "hard"], default="easy")
    g.add_argument("--lengths", default="5..8")
    g.add_argument("--per-length", type=int, default=300)
    g.add_argument("--positive-fraction", type=float, default=0.5)
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model bundle")
    defaults = trainer.TrainerConfig()
    t.add_argument("--data", required=True)
    t.add_argument("--iters", type=int, default=defaults.iterations)
    t.add_argument("--subsample", default=f"{defaults.subsample[0]}..{defaults.subsample[1]}")
    t.add_argument("--k", type=int, default=defaults.k)
    t.add_argument("--features", type=int, default=defaults.n_features)
    t.add_argument("--stages", default=None, help="comma-separated length caps")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--monitor-per-class", type=int, default=50,
                   help="held-out labelled glyphs per class for the accuracy log (0 disables)")
    t.add_argument("--freeze-perception", action="store_true")
    t.add_argument("--freeze-knowledge", action="store_true")
    t.add_argument("--from", dest="source", default=None)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="per-length accuracy of a model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)

    r = sub.add_parser("report", help="summary tables from training logs and eval CSVs")
    r.add_argument("--logs", nargs="*", default=[])
    r.add_argument("--evals", nargs="*", default=[])
    r.add_argument("--out", required=True)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def _manifest_path(args) -> Path:
    out = Path(args.out)
    if args.command in ("gen-data", "train", "report"):
        return out / "run_manifest.json"
    return out.with_name(out.name + ".manifest.json")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    t0 = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        manifest = COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"abl: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except datasets.UnsatisfiableLength as e:
        print(f"abl: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"abl: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest.argv = argv
    manifest.wall_clock_s = round(time.perf_counter() - t0, 3)
    manifest.versions = _versions()
    manifest.write(_manifest_path(args))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``hybrid-debias {generate,train,eval,sweep,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import plotting
from .datagen import DatasetSpec, generate_dataset, make_unbiased_test, read_dataset, reduce_dataset, write_dataset
from .debias import METHODS, REDUCTIONS, SELECTION_MODES, DebiasConfig, train
from .evaluation import accuracy, export_features
from .experiment import (ExperimentConfig, aggregate_from_dir, rows_to_csv, run_experiment, sweep, write_run)
from .nncore import load_model, save_model

log = logging.getLogger("hybrid_debias")

# flag dest -> config field name
DATASET_FLAGS = {
    "samples_per_class": int, "sigma": float, "p": float, "num_classes": int, "height": int, "width": int,
    "template_density": float, "pixel_flip_prob": float, "color_noise_std": float, "max_shift": int,
    "data_seed": int,
}
DEBIAS_FLAGS = {
    "alpha": float, "beta": float, "t_bc": float, "selection_mode": str, "threshold": float,
    "loss_reduction": str, "q": float, "epochs": int, "batch_size": int, "lr": float,
}


def _flag(name: str) -> str:
    return {"t_bc": "--tbc", "pixel_flip_prob": "--flip-prob", "color_noise_std": "--color-noise",
            "loss_reduction": "--reduction"}.get(name, "--" + name.replace("_", "-"))


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dataset")
    for name, typ in DATASET_FLAGS.items():
        g.add_argument(_flag(name), dest=name, type=typ, default=None)


def _add_debias_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    for name, typ in DEBIAS_FLAGS.items():
        kw = {}
        if name == "selection_mode":
            kw["choices"] = SELECTION_MODES
        elif name == "loss_reduction":
            kw["choices"] = REDUCTIONS
        g.add_argument(_flag(name), dest=name, type=typ, default=None, **kw)


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="UTF-8 JSON experiment config; flags override it")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")], help="comma separated, e.g. 0,1,2")
    p.add_argument("--test-n", dest="test_n", type=int)
    _add_dataset_flags(p)
    _add_debias_flags(p)


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def experiment_config(args) -> ExperimentConfig:
    base = ExperimentConfig.from_dict(json.loads(args.config.read_text(encoding="utf-8"))) if args.config \
        else ExperimentConfig()
    kw = _overrides(args, [*DATASET_FLAGS, *DEBIAS_FLAGS, "method", "seeds", "test_n"])
    if "data_seed" in kw:
        kw["seed"] = kw.pop("data_seed")
    if getattr(args, "out_dir", None):
        kw["output_dir"] = str(args.out_dir)
    return base.with_overrides(**kw)


def _dataset_spec(args) -> DatasetSpec:
    kw = _overrides(args, DATASET_FLAGS)
    kw.setdefault("samples_per_class", 600)
    kw.setdefault("sigma", 0.05)
    if "data_seed" in kw:
        kw["seed"] = kw.pop("data_seed")
    return DatasetSpec(**kw)


def cmd_generate(args) -> int:
    spec = _dataset_spec(args)
    if args.unbiased_test:
        ds = make_unbiased_test(spec, args.unbiased_test, args.test_seed)
    else:
        ds = generate_dataset(spec)
        if spec.p < 1.0:
            ds = reduce_dataset(ds, spec.p, args.reduce_seed)
    write_dataset(ds, args.out)
    print(json.dumps({"path": str(args.out), "n": len(ds), "conflicting": int((~ds.aligned_flags).sum())}))
    return 0


def cmd_train(args) -> int:
    if args.data:
        ds = read_dataset(args.data)
    else:
        spec = _dataset_spec(args)
        ds = reduce_dataset(generate_dataset(spec), spec.p, args.seed)
    cfg = DebiasConfig(seed=args.seed, **_overrides(args, DEBIAS_FLAGS))
    eval_ds = read_dataset(args.eval_data) if args.eval_data else None
    history_f = open(args.history, "w", encoding="utf-8") if args.history else None
    try:
        def emit(rec):
            log.info("epoch %d: %s", rec["epoch"], {k: v for k, v in rec.items() if k != "epoch"})
            if history_f:
                history_f.write(json.dumps(rec) + "\n")
                history_f.flush()

        res = train(args.method, ds, cfg, eval_ds=eval_ds, log=emit)
    finally:
        if history_f:
            history_f.close()
    save_model(res.model_d, args.out_model)
    if args.out_model_b and res.model_b is not None:
        save_model(res.model_b, args.out_model_b)
    if args.plot and res.history:
        plotting.plot_dynamics(res.history, args.plot, title=args.method)
    print(json.dumps({"model": str(args.out_model), "final": res.history[-1] if res.history else None}))
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = read_dataset(args.data)
    report = accuracy(model, ds)
    text = json.dumps(report.to_dict(), indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    if args.export_features:
        export_features(model, ds, args.export_features)
    print(text)
    return 0


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        name, _, values = item.partition("=")
        name = {"tbc": "t_bc"}.get(name, name)
        grid[name] = [float(v) for v in values.split(",") if v]
    return grid


def cmd_sweep(args) -> int:
    cfg = experiment_config(args)
    grid = _parse_grid(args.grid)
    out = Path(args.out_dir)
    rows, _ = sweep(cfg.with_overrides(output_dir=None), grid, out)
    for param in grid:
        if len(grid[param]) > 1:
            plotting.plot_sweep(rows, param, out / f"sweep_{param}.png")
    sys.stdout.write(rows_to_csv(rows))
    return 0


def cmd_report(args) -> int:
    out = Path(args.out_dir)
    if args.from_dir:
        report = aggregate_from_dir(args.from_dir)
        write_run(report, out)
        reports = {report.config["method"]: report}
    else:
        cfg = experiment_config(args)
        methods = args.methods.split(",") if args.methods else [cfg.method]
        reports = {}
        for m in methods:
            reports[m] = run_experiment(cfg.with_overrides(method=m, output_dir=str(out / m)))
    rows = [r.csv_row() for r in reports.values()]
    (out / "results.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    for m, rep in reports.items():
        for r in rep.per_seed:
            if r.history:
                plotting.plot_dynamics(r.history, out / m / f"dynamics_seed{r.seed}.png", title=f"{m}, seed {r.seed}")
    plotting.plot_method_comparison(reports, out / "accuracy.png")
    sys.stdout.write(rows_to_csv(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybrid-debias", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic biased dataset (DBDS file)")
    _add_dataset_flags(p)
    p.add_argument("--unbiased-test", type=int, default=0, metavar="N", help="write an N-sample unbiased test set")
    p.add_argument("--test-seed", type=int, default=10_000)
    p.add_argument("--reduce-seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model and write a DBMW checkpoint")
    p.add_argument("--data", type=Path, help="DBDS training file; generated from dataset flags if omitted")
    p.add_argument("--eval-data", type=Path, help="DBDS file evaluated after every epoch")
    p.add_argument("--method", choices=METHODS, default="hybrid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-model", type=Path, required=True)
    p.add_argument("--out-model-b", type=Path)
    p.add_argument("--history", type=Path, help="JSON-lines epoch history")
    p.add_argument("--plot", type=Path, help="write a training-dynamics figure")
    _add_dataset_flags(p)
    _add_debias_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a DBDS file")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--export-features", type=Path, help="write last hidden layer activations (DBFT file)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over alpha / beta / t_bc")
    _add_experiment_flags(p)
    p.add_argument("--grid", action="append", required=True, metavar="NAME=V1,V2",
                   help="e.g. --grid alpha=0.5,0.9 (repeatable; names alpha, beta, tbc)")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="seed-aggregated run(s) with JSON, CSV and figures")
    _add_experiment_flags(p)
    p.add_argument("--methods", help="comma separated methods to compare, e.g. vanilla,reweight,hybrid")
    p.add_argument("--from-dir", type=Path, help="re-aggregate an existing run directory instead of training")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())

"""Command line entry point.

Subcommands cover the whole workflow: generate a dataset, train, evaluate
a checkpoint, run the variant ablation, sweep the skip-gate strength,
audit gradients, and export plot-ready CSVs from saved run logs.

Conventions: results go to files under --out (default from the AMAA_OUT
environment variable, else ./amaa_out) plus a short summary on stdout;
progress and diagnostics go to stderr. Exit code 0 means success, 1 a
configuration or usage error, 2 a runtime failure. Every run writes a
run_manifest.json recording the resolved config, seeds, and artifacts;
the CSVs themselves carry no timestamps so identical runs produce
identical bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone

from . import __version__
from .config import (RunConfig, default_config_text, default_run_config,
                     load_config, parse_config)
from .errors import ConfigError, DataFormatError, ShapeError, TrainingError
from .experiments import (DEFAULT_ALPHA_GRID, ablation_csv, alpha_csv,
                          alpha_metadata, category_csv, gradcheck_csv,
                          gradcheck_suite, loss_csv, median_miou,
                          records_from_jsonable, records_to_jsonable,
                          run_ablation, run_alpha_sweep)
from .metrics import MetricsReport
from .model import VARIANTS, build_model
from .params import load_params
from .scene import generate_split, load_dataset, make_dataset
from .training import evaluate, train


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default="default", metavar="PATH",
                        help="JSON run config, or the literal 'default'")
    common.add_argument("--seed", type=int, default=None,
                        help="override every seed in the config")
    common.add_argument("--out", default=None, metavar="DIR",
                        help="output directory (default: $AMAA_OUT or "
                             "./amaa_out)")
    common.add_argument("--n-train", type=int, default=None,
                        help="override dataset.n_train")
    common.add_argument("--n-val", type=int, default=None,
                        help="override dataset.n_val")
    common.add_argument("--epochs", type=int, default=None,
                        help="override train.epochs")

    parser = _Parser(prog="amaa", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version",
                        version=f"amaa {__version__}")
    parser.add_argument("--print-default-config", action="store_true",
                        help="write the built-in config to stdout and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-scenes", parents=[common],
                       help="render the synthetic dataset to --out")
    p.set_defaults(func=_cmd_gen_scenes)

    p = sub.add_parser("train", parents=[common],
                       help="train one model and save its checkpoint")
    p.add_argument("--variant", choices=sorted(VARIANTS),
                   help="force an ablation variant instead of the config's "
                        "toggles")
    p.add_argument("--data", metavar="MANIFEST",
                   help="train from a gen-scenes manifest.json instead of "
                        "regenerating in memory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on the validation split")
    p.add_argument("--params", required=True, metavar="FILE",
                   help="checkpoint written by train")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--data", metavar="MANIFEST")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="train every variant x seed and tabulate")
    p.add_argument("--seeds", default="0,1,2", metavar="LIST",
                   help="comma-separated training seeds")
    p.add_argument("--variants", default=",".join(VARIANTS), metavar="LIST")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep-alpha", parents=[common],
                       help="train the full model across skip-gate "
                            "strengths")
    p.add_argument("--alphas",
                   default=",".join(f"{a:g}" for a in DEFAULT_ALPHA_GRID),
                   metavar="LIST")
    p.set_defaults(func=_cmd_sweep_alpha)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="compare tape gradients to finite differences")
    p.add_argument("--seeds", default="0,1,2,3,4", metavar="LIST")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("export-plots", parents=[common],
                       help="turn saved run logs into plot-ready CSVs")
    p.add_argument("--runs", metavar="FILE",
                   help="runs.json from ablate (default: <out>/runs.json)")
    p.set_defaults(func=_cmd_export_plots)
    return parser


def _int_list(text: str, flag: str):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip() != "")
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated integers, "
                          f"got {text!r}") from None


def _float_list(text: str, flag: str):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated numbers, "
                          f"got {text!r}") from None


def _resolve_config(args) -> RunConfig:
    if args.config == "default":
        cfg = default_run_config()
    else:
        cfg = load_config(args.config)
    data = cfg.to_dict()
    changed = False
    if args.seed is not None:
        for section in ("model", "train", "scene"):
            data[section]["seed"] = args.seed
        changed = True
    if getattr(args, "variant", None):
        data["model"].update(VARIANTS[args.variant])
        changed = True
    for flag, section, key in (("n_train", "dataset", "n_train"),
                               ("n_val", "dataset", "n_val"),
                               ("epochs", "train", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            data[section][key] = value
            changed = True
    if changed:
        cfg = parse_config(json.dumps(data), source="<command line>")
    return cfg


def _out_dir(args) -> str:
    out = args.out or os.environ.get("AMAA_OUT") or "amaa_out"
    os.makedirs(out, exist_ok=True)
    return out


def _write(path: str, text: str):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_manifest(out: str, command: str, cfg: RunConfig, artifacts: dict):
    manifest = {
        "tool": "amaa",
        "version": __version__,
        "command": command,
        "created_utc": datetime.now(timezone.utc).isoformat(
            timespec="seconds"),
        "seeds": {"model": cfg.model.seed, "train": cfg.train.seed,
                  "scene": cfg.scene.seed},
        "config": cfg.to_dict(),
        "artifacts": artifacts,
    }
    _write(os.path.join(out, "run_manifest.json"), _dump_json(manifest))


def _load_split(args, cfg: RunConfig):
    """Training and validation samples, from disk or regenerated."""
    data = getattr(args, "data", None)
    if data is None:
        return generate_split(cfg.scene, cfg.grid, cfg.n_train, cfg.n_val)
    try:
        train_s, val_s = load_dataset(data)
    except FileNotFoundError:
        raise ConfigError(f"{data}: no such dataset manifest") from None
    for sample in train_s + val_s:
        if sample.labels.shape != tuple(cfg.grid.dims):
            raise ConfigError(
                f"{data}: labels shape {sample.labels.shape} does not match "
                f"grid.dims {tuple(cfg.grid.dims)}")
    return train_s, val_s


def _epoch_progress(log):
    print(f"epoch {log.epoch}: total={log.total:.6f} "
          f"val_miou={log.val.miou:.4f}", file=sys.stderr)


def _run_progress(rec):
    print(f"[{rec.label} seed {rec.seed}] miou={rec.report.miou:.4f} "
          f"sc_iou={rec.report.sc_iou:.4f}", file=sys.stderr)


def _summary_line(report: MetricsReport) -> str:
    return (f"val: sc_iou={report.sc_iou:.4f} miou={report.miou:.4f} "
            f"precision={report.precision:.4f} recall={report.recall:.4f}")


def _cmd_gen_scenes(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    make_dataset(cfg.scene, cfg.grid, out, cfg.n_train, cfg.n_val)
    _write_manifest(out, "gen-scenes", cfg, {"dataset": "manifest.json"})
    print(f"wrote {cfg.n_train} train and {cfg.n_val} val scenes "
          f"under {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    train_s, val_s = _load_split(args, cfg)
    model = build_model(cfg.model, cfg.grid)
    result = train(model, train_s, val_s, cfg.train,
                   on_epoch=_epoch_progress)
    model.store.save(os.path.join(out, "params.vpar"))
    _write(os.path.join(out, "report.json"),
           result.final_val.to_json() + "\n")
    _write(os.path.join(out, "train_log.json"),
           _dump_json([log.to_dict() for log in result.logs]))
    _write_manifest(out, "train", cfg,
                    {"params": "params.vpar", "report": "report.json",
                     "train_log": "train_log.json"})
    print(_summary_line(result.final_val))
    print(f"params: {os.path.join(out, 'params.vpar')}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    _, val_s = _load_split(args, cfg)
    model = build_model(cfg.model, cfg.grid)
    try:
        state = load_params(args.params)
    except FileNotFoundError:
        raise ConfigError(f"{args.params}: no such parameter file") from None
    model.store.load_state(state)
    report = evaluate(model, val_s)
    _write(os.path.join(out, "report.json"), report.to_json() + "\n")
    _write(os.path.join(out, "metrics.csv"), report.to_csv())
    _write_manifest(out, "eval", cfg,
                    {"report": "report.json", "metrics": "metrics.csv"})
    print(_summary_line(report))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    seeds = _int_list(args.seeds, "--seeds")
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    records = run_ablation(cfg, seeds=seeds, variants=variants,
                           progress=_run_progress)
    _write(os.path.join(out, "ablation.csv"), ablation_csv(records))
    _write(os.path.join(out, "runs.json"),
           _dump_json(records_to_jsonable(records)))
    _write_manifest(out, "ablate", cfg,
                    {"table": "ablation.csv", "runs": "runs.json"})
    for variant in variants:
        print(f"{variant}: median miou={median_miou(records, variant):.4f}")
    print(f"table: {os.path.join(out, 'ablation.csv')}")
    return 0


def _cmd_sweep_alpha(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    alphas = _float_list(args.alphas, "--alphas")
    records = run_alpha_sweep(cfg, alphas=alphas, seed=cfg.train.seed,
                              progress=_run_progress)
    meta = alpha_metadata(records)
    _write(os.path.join(out, "alpha_sweep.csv"), alpha_csv(records))
    _write(os.path.join(out, "alpha_sweep.json"),
           _dump_json({"metadata": meta,
                       "runs": records_to_jsonable(records)}))
    _write_manifest(out, "sweep-alpha", cfg,
                    {"table": "alpha_sweep.csv",
                     "details": "alpha_sweep.json"})
    print(f"best alpha={meta['best_alpha']:g} "
          f"(miou={meta['best_miou']:.4f}); "
          f"default alpha={meta['default_alpha']:g}")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args)  # validates the config even though the
    out = _out_dir(args)         # audit itself only needs the seeds
    seeds = _int_list(args.seeds, "--seeds")
    results = gradcheck_suite(seeds=seeds)
    _write(os.path.join(out, "gradcheck.csv"), gradcheck_csv(results))
    _write_manifest(out, "gradcheck", cfg, {"table": "gradcheck.csv"})
    worst_by_name: dict = {}
    for r in results:
        if r.name not in worst_by_name or r.max_error > worst_by_name[r.name].max_error:
            worst_by_name[r.name] = r
    failed = False
    for name, r in worst_by_name.items():
        verdict = "PASS" if r.max_error <= r.tolerance else "FAIL"
        failed = failed or verdict == "FAIL"
        print(f"{name}: max_rel_err={r.max_error:.3e} {verdict}")
    if failed:
        print("gradient audit failed", file=sys.stderr)
        return 2
    return 0


def _cmd_export_plots(args) -> int:
    _resolve_config(args)
    out = _out_dir(args)
    runs_path = args.runs or os.path.join(out, "runs.json")
    try:
        with open(runs_path) as fh:
            records = records_from_jsonable(json.load(fh))
    except FileNotFoundError:
        raise ConfigError(f"{runs_path}: no such runs file "
                          "(produce one with 'amaa ablate')") from None
    except json.JSONDecodeError as err:
        raise DataFormatError(f"{runs_path}: invalid JSON at line "
                              f"{err.lineno}: {err.msg}") from None
    if not records:
        raise ConfigError(f"{runs_path}: contains no runs")
    _write(os.path.join(out, "category_iou.csv"), category_csv(records))
    # The loss curve comes from the full method's first seed when present,
    # else from the first stored run.
    full = [r for r in records if r.label == "D"]
    source = min(full, key=lambda r: r.seed) if full else records[0]
    _write(os.path.join(out, "loss_curve.csv"), loss_csv(source.logs))
    print(f"category_iou.csv: {len(records)} runs x "
          f"{len(records[0].report.class_iou)} classes")
    print(f"loss_curve.csv: from run '{source.label}' seed {source.seed}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.print_default_config:
            sys.stdout.write(default_config_text())
            return 0
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            print("amaa: a subcommand is required", file=sys.stderr)
            return 1
        return args.func(args)
    except SystemExit as err:  # argparse --help / --version
        return int(err.code or 0)
    except (ConfigError, ShapeError) as err:
        print(f"amaa: {err}", file=sys.stderr)
        return 1
    except (TrainingError, DataFormatError, OSError) as err:
        print(f"amaa: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Batch command line: generate / train / eval / ablate / report.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime failure.
The run root comes from the config (or the SHAPEWORLD_OWOD_RUN_ROOT
environment variable); every artifact embeds the config hash and seeds.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, load_config
from .data import DataError, generate_dataset, load_dataset
from .evaluation import report_task, run_inference, evaluate_detections, write_report
from .training import new_model_and_stats, run_task

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

TDQI_SWEEP = [(10, 90), (20, 80), (30, 70), (50, 50), (80, 20), (100, 0), (0, 100)]
# full-scale numbers from the original benchmark runs, shown as context only
PAPER_TDQI = {(10, 90): (20.4, 58.8), (20, 80): (20.3, 59.8),
              (30, 70): (19.4, 59.9), (50, 50): (18.8, 59.7)}
PAPER_ETOP_LAYER = {1: (20.7, 58.0), 2: (20.3, 59.8), 3: (19.0, 59.7),
                    4: (18.9, 60.1), 5: (17.9, 59.8), 6: (18.8, 60.4)}
PAPER_SCHEDULE = {("etop", 2): (20.3, 59.8), ("dol", 1): (19.2, 59.1),
                  ("dol", 2): (19.8, 58.2), ("none", None): (18.8, 60.4)}


def _run_root(cfg) -> Path:
    return Path(os.environ.get("SHAPEWORLD_OWOD_RUN_ROOT", cfg.run_root))


def _load(args):
    return load_config(args.config, args.set or ())


def cmd_generate(args) -> int:
    cfg = _load(args)
    generate_dataset(cfg.protocol(), cfg.dataset.root)
    print(f"dataset written to {cfg.dataset.root} (hash {cfg.dataset_hash()})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    dataset = load_dataset(cfg.dataset.root)
    run_root = _run_root(cfg)
    run_root.mkdir(parents=True, exist_ok=True)
    (run_root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    final = run_task(cfg, dataset, args.task, run_root, resume=args.resume)
    print(f"final checkpoint: {final}")
    return EXIT_OK


def _evaluate(cfg, dataset, checkpoint, task_id, out_dir):
    model, stats = new_model_and_stats(cfg)
    load_checkpoint(checkpoint, model, stats, expect_config_hash=cfg.config_hash())
    task = dataset.task(task_id)
    records, gt_known, gt_unknown = run_inference(
        model, stats, dataset, task, cfg.etop, cfg.eval)
    report = evaluate_detections(records, gt_known, gt_unknown, task, cfg.eval)
    report.config_hash = cfg.config_hash()
    report.seed = cfg.train.seed
    paths = write_report(report, out_dir, records_by_scene=records)
    meta = report.to_dict()
    meta["dataset_hash"] = cfg.dataset_hash()
    meta["master_seed"] = cfg.dataset.master_seed
    paths["json"].write_text(json.dumps(meta, indent=2, sort_keys=True))
    return report


def _default_checkpoint(run_root: Path, task_id: int) -> Path:
    ckpt_dir = run_root / f"task{task_id}" / "checkpoints"
    for name in (f"task{task_id}_finetune_final", f"task{task_id}_train_final"):
        if (ckpt_dir / name).exists():
            return ckpt_dir / name
    raise CheckpointError(f"no final checkpoint for task {task_id} under {ckpt_dir}")


def cmd_eval(args) -> int:
    cfg = _load(args)
    dataset = load_dataset(cfg.dataset.root)
    run_root = _run_root(cfg)
    checkpoint = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(run_root, args.task)
    report = _evaluate(cfg, dataset, checkpoint, args.task, run_root / "eval")
    summary = {k: v for k, v in report.to_dict().items()
               if k in ("map_prev", "map_curr", "map_both", "u_recall") and v is not None}
    print(f"task {args.task}: " + ", ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    return EXIT_OK


def _ablation_cells(cfg, sweep):
    if sweep == "tdqi_ratio":
        for n_qs, n_lq in TDQI_SWEEP:
            yield (f"qs{n_qs}_lq{n_lq}",
                   [f"tdqi.n_qs={n_qs}", f"tdqi.n_lq={n_lq}"],
                   {"n_qs": n_qs, "n_lq": n_lq},
                   PAPER_TDQI.get((n_qs, n_lq)))
    elif sweep == "etop_layer":
        for layer in range(1, cfg.model.num_decoder_layers + 1):
            yield (f"layer{layer}",
                   [f"etop.stop_layer={layer}", "etop.schedule=etop"],
                   {"stop_layer": layer},
                   PAPER_ETOP_LAYER.get(layer))
    elif sweep == "schedule":
        for kind in ("etop", "dol", "none"):
            key = (kind, None if kind == "none" else cfg.etop.stop_layer)
            yield (kind, [f"etop.schedule={kind}"], {"schedule": kind},
                   PAPER_SCHEDULE.get(key))
    else:
        raise ConfigError(f"unknown sweep {sweep!r}")


def cmd_ablate(args) -> int:
    from .config import apply_overrides, config_from_dict

    cfg = _load(args)
    dataset = load_dataset(cfg.dataset.root)
    run_root = _run_root(cfg)
    sweep_dir = run_root / f"ablate_{args.sweep}"
    rows = []
    for cell_name, overrides, cell_keys, paper in _ablation_cells(cfg, args.sweep):
        cell_cfg = config_from_dict(apply_overrides(cfg.to_dict(), overrides))
        cell_dir = sweep_dir / cell_name
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "config.json").write_text(
            json.dumps(cell_cfg.to_dict(), indent=2, sort_keys=True))
        final = run_task(cell_cfg, dataset, 1, cell_dir)
        report = _evaluate(cell_cfg, dataset, final, 1, cell_dir / "eval")
        row = dict(cell_keys)
        row["u_recall"] = report.u_recall
        row["map"] = report.map_both
        row["paper_u_recall"] = paper[0] if paper else ""
        row["paper_map"] = paper[1] if paper else ""
        rows.append(row)
        print(f"{cell_name}: u_recall={report.u_recall} map={report.map_both}")

    keys = list(rows[0].keys())
    csv_path = sweep_dir / f"{args.sweep}.csv"
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join("" if row[k] == "" else repr(row[k]) if isinstance(row[k], float)
                              else str(row[k]) for k in keys))
    csv_path.write_text("\n".join(lines) + "\n")
    print(f"sweep table: {csv_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    eval_dir = run_dir / "eval"
    reports = sorted(eval_dir.glob("eval_task*.json"))
    if not reports:
        raise DataError(f"no evaluation reports under {eval_dir}")
    loaded = [json.loads(p.read_text()) for p in reports]
    hashes = {r.get("dataset_hash") for r in loaded}
    if len(hashes) > 1:
        raise DataError(f"refusing to merge reports with mismatched dataset hashes: {hashes}")

    csv_lines = ["task,metric,value"]
    md = ["# Run summary", "",
          f"config hash: `{loaded[0].get('config_hash', '')}`; "
          f"dataset hash: `{loaded[0].get('dataset_hash', '')}`", "",
          "| task | U-Recall | mAP prev | mAP curr | mAP both |",
          "|------|----------|----------|----------|----------|"]
    for r in loaded:
        cells = [str(r["task_id"])]
        for key in ("u_recall", "map_prev", "map_curr", "map_both"):
            value = r.get(key)
            cells.append("-" if value is None else f"{value:.4f}")
            if value is not None:
                csv_lines.append(f"{r['task_id']},{key},{value!r}")
        md.append("| " + " | ".join(cells[:1] + [cells[1], cells[2], cells[3], cells[4]]) + " |")
    (run_dir / "summary.csv").write_text("\n".join(csv_lines) + "\n")
    (run_dir / "summary.md").write_text("\n".join(md) + "\n")
    print(f"wrote {run_dir / 'summary.md'} and {run_dir / 'summary.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapeworld-owod",
                                     description="open-world shape detector workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override, repeatable")

    p = sub.add_parser("generate", help="generate the dataset")
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train one incremental task")
    common(p)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task's test split")
    common(p)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--checkpoint", help="checkpoint dir (default: the task's final)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run a configuration sweep on task 1")
    common(p)
    p.add_argument("--sweep", required=True, choices=["tdqi_ratio", "etop_layer", "schedule"])
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="consolidate evaluation artifacts of a run")
    p.add_argument("--run", required=True, help="run directory")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

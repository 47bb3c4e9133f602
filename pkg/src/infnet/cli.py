"""Batch command-line front end.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 I/O error.
Outputs go under ``--out`` in a fixed layout::

    predictions/  reports/  checkpoints/  history.jsonl
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_config
from .data import (
    DatasetSplit,
    _list_images,
    derive_edge_map,
    load_dataset,
    load_multiclass_mask,
    load_slice,
    read_gray,
    save_mask_png,
    save_probability_png,
    write_manifest,
)
from .errors import CheckpointError, ConfigError, ContractError, LoadError, ValidationError
from .metrics import CSV_HEADER, METRIC_KEYS, evaluate_dir, read_metrics_csv
from .model.infnet import InfNet, load_infnet, save_checkpoint
from .multiclass import (
    CLASS_BLOCKS,
    guided_infer,
    guided_train,
    load_mc_model,
    mean_tables,
    per_class_metrics,
    render_overlay,
    save_palette_png,
    multiclass_columns,
    write_multiclass_csv,
)
from .semisup import semi_inf_net, two_step_train
from .synthetic import write_synthetic_dataset
from .training import Trainer

log = logging.getLogger("infnet")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO = 0, 2, 3, 4


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _dirs(out: Path) -> dict[str, Path]:
    d = {k: out / k for k in ("predictions", "reports", "checkpoints")}
    for p in d.values():
        p.mkdir(parents=True, exist_ok=True)
    return d


def _make_trainer(cfg: RunConfig):
    def factory():
        torch.manual_seed(cfg.seed)
        return Trainer(InfNet(cfg.model_config()), cfg.train_config())
    return factory


def _split(cfg: RunConfig, root) -> DatasetSplit:
    return load_dataset(root, cfg.split_spec())


def _write_curves(path: Path, curves: dict):
    path.write_text(json.dumps(curves, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_prepare_data(args, cfg: RunConfig) -> int:
    split = _split(cfg, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(split, out / "split_manifest.txt")
    edges = out / "edges"
    edges.mkdir(exist_ok=True)
    for s, m in split.train_labeled + split.val + split.test:
        save_mask_png(derive_edge_map(m).values, edges / f"{s.id}.png")
    sizes = {k: len(v) for k, v in split.partitions().items()}
    print("split " + " ".join(f"{k}={v}" for k, v in sizes.items()))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    d = _dirs(Path(args.out))
    split = _split(cfg, args.data)
    trainer = _make_trainer(cfg)()
    result = two_step_train(trainer, [], split.finetune_pairs(cfg.finetune_set), cfg.schedule(), split.val)
    save_checkpoint(trainer.model, d["checkpoints"] / "infnet.pt")
    trainer.write_log(d["reports"] / "train_log.csv")
    _write_curves(d["reports"] / "curves.json", result.curves)
    print(f"saved {d['checkpoints'] / 'infnet.pt'}")
    return EXIT_OK


def cmd_semi_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    d = _dirs(out)
    split = _split(cfg, args.data)
    final, state, result = semi_inf_net(split, _make_trainer(cfg), cfg.semi_config(), cfg.schedule(),
                                        cfg.finetune_set, out)
    save_checkpoint(final.model, d["checkpoints"] / "semi_infnet.pt")
    final.write_log(d["reports"] / "train_log.csv")
    _write_curves(d["reports"] / "curves.json", result.curves)
    print(f"pseudo-label rounds={state.iteration} training={len(state.training)}; "
          f"saved {d['checkpoints'] / 'semi_infnet.pt'}")
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    d = _dirs(Path(args.out))
    model = load_infnet(args.checkpoint)
    trainer = Trainer(model, cfg.train_config())
    trainer.cfg.input_size = model.config.input_size
    files = _list_images(Path(args.images))
    if not files:
        raise LoadError(f"no images found in {args.images}")
    slices = [load_slice(p) for _, p in sorted(files.items())]
    for s, prob in zip(slices, trainer.predict(slices)):
        save_probability_png(prob, d["predictions"] / f"{s.id}.png")
    print(f"wrote {len(slices)} predictions to {d['predictions']}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    d = _dirs(Path(args.out))
    report = evaluate_dir(args.pred, args.gt, cfg.threshold, cfg.alpha)
    path = report.to_csv(d["reports"] / args.name)
    agg = report.aggregate
    print("MEAN " + " ".join(f"{k}={agg[k]:.4f}" for k in METRIC_KEYS))
    print(f"wrote {path}")
    return EXIT_OK


def _infection_maps(args, cfg: RunConfig, slices) -> list[np.ndarray]:
    if args.infection:
        files = _list_images(Path(args.infection))
        missing = [s.id for s in slices if s.id not in files]
        if missing:
            raise ValidationError(f"no infection map for: {', '.join(missing)}")
        maps = [read_gray(files[s.id]).astype(np.float32) / 255.0 for s in slices]
        for s, m in zip(slices, maps):
            if m.shape != s.shape:
                raise ValidationError(f"infection map for {s.id!r} is {m.shape}, slice is {s.shape}")
        return maps
    if args.infnet:
        model = load_infnet(args.infnet)
        trainer = Trainer(model, cfg.train_config())
        trainer.cfg.input_size = model.config.input_size
        return trainer.predict(slices)
    raise ValidationError("provide --infection DIR or --infnet CHECKPOINT")


def cmd_mc_train(args, cfg: RunConfig) -> int:
    d = _dirs(Path(args.out))
    split = _split(cfg, args.data)
    pairs = [(s, m) for s, m in split.finetune_pairs(cfg.finetune_set) if s.id in split.multiclass]
    if not pairs:
        raise ValidationError("no training slices have multiclass_masks/ labels")
    slices = [s for s, _ in pairs]
    maps = _infection_maps(args, cfg, slices)
    samples = [(s, m, split.multiclass[s.id]) for s, m in zip(slices, maps)]
    mc_cfg = cfg.mc_config()
    model, curve = guided_train(samples, mc_cfg)
    save_checkpoint(model, d["checkpoints"] / "mc.pt", config=mc_cfg)
    with open(d["reports"] / "mc_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss"))
        w.writerows((i + 1, f"{v:.6f}") for i, v in enumerate(curve))
    print(f"saved {d['checkpoints'] / 'mc.pt'}")
    return EXIT_OK


def cmd_mc_infer(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    d = _dirs(out)
    model, mc_cfg = load_mc_model(args.checkpoint)
    files = _list_images(Path(args.images))
    if not files:
        raise LoadError(f"no images found in {args.images}")
    slices = [load_slice(p) for _, p in sorted(files.items())]
    maps = _infection_maps(args, cfg, slices)
    pred_dir = d["predictions"] / "multiclass"
    pred_dir.mkdir(exist_ok=True)
    if args.render:
        (out / "renders").mkdir(exist_ok=True)
    tables = {}
    gt_files = _list_images(Path(args.gt)) if args.gt else {}
    for s, m in zip(slices, maps):
        pred = guided_infer(s, m, model, mc_cfg.input_size)
        save_palette_png(pred, pred_dir / f"{s.id}.png")
        if args.render:
            render_overlay(s, pred, out / "renders" / f"{s.id}.png")
        if args.gt:
            if s.id not in gt_files:
                raise ValidationError(f"no multi-class ground truth for {s.id!r}")
            tables[s.id] = per_class_metrics(pred, load_multiclass_mask(gt_files[s.id]), cfg.threshold)
    if tables:
        rows = dict(tables)
        rows["MEAN"] = mean_tables(list(tables.values()))
        path = write_multiclass_csv(rows, d["reports"] / "mc_metrics.csv")
        print(f"wrote {path}")
    print(f"wrote {len(slices)} multi-class masks to {pred_dir}")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    d = _dirs(Path(args.out))
    names = args.names or [Path(p).stem for p in args.inputs]
    if len(names) != len(args.inputs):
        raise ValidationError("--names must match the number of inputs")
    binary, multi = {}, {}
    for name, path in zip(names, args.inputs):
        with open(path, newline="") as fh:
            header = tuple(next(csv.reader(fh), ()))
        if header == CSV_HEADER:
            rows = read_metrics_csv(path)
            if "MEAN" not in rows:
                raise ValidationError(f"{path} has no MEAN row")
            binary[name] = rows["MEAN"]
        elif header[1:] == tuple(multiclass_columns()[1:]):
            with open(path, newline="") as fh:
                rows = {r[header[0]]: r for r in csv.DictReader(fh)}
            if "MEAN" not in rows:
                raise ValidationError(f"{path} has no MEAN row")
            multi[name] = {b: {k: float(rows["MEAN"][f"{b}_{k}"]) for k in METRIC_KEYS} for b in CLASS_BLOCKS}
        else:
            raise ValidationError(f"{path}: not a metrics CSV")
    if binary:
        path = d["reports"] / "summary.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for name, row in binary.items():
                w.writerow([name] + [f"{row[k]:.6f}" for k in METRIC_KEYS])
        _plot_summary(binary, d["reports"] / "summary.png")
        print(f"wrote {path}")
    if multi:
        path = write_multiclass_csv(multi, d["reports"] / "summary_multiclass.csv")
        _plot_summary({n: t["Average"] for n, t in multi.items()}, d["reports"] / "summary_multiclass.png")
        print(f"wrote {path}")
    return EXIT_OK


def _plot_summary(rows: dict[str, dict[str, float]], path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 3.5))
    n = len(rows)
    width = 0.8 / max(n, 1)
    x = np.arange(len(METRIC_KEYS))
    for i, (name, row) in enumerate(rows.items()):
        ax.bar(x + i * width, [row[k] for k in METRIC_KEYS], width, label=name)
    ax.set_xticks(x + 0.4 - width / 2, METRIC_KEYS)
    ax.set_ylim(0, 1)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_synth_data(args, cfg: RunConfig) -> int:
    root = write_synthetic_dataset(args.dest, args.labeled, args.unlabeled, args.size, cfg.seed)
    print(f"wrote synthetic dataset to {root}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--device", help="torch device, e.g. cpu")
    common.add_argument("--ablation", help='enabled components, e.g. "EA,PPD,RA"; "" = backbone only')
    common.add_argument("--checkpoint-every", type=int, dest="checkpoint_every",
                        help="save a checkpoint every N pseudo-label rounds (0 = final only)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--out", default="runs", help="output directory")

    parser = argparse.ArgumentParser(prog="infnet", description="Lung infection segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", parents=[common], help="split dataset, derive edge maps, write manifest")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", parents=[common], help="supervised training (fine-tune step only)")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("semi-train", parents=[common], help="pseudo-label loop followed by pretrain + fine-tune")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_semi_train)

    p = sub.add_parser("infer", parents=[common], help="write probability PNGs for a directory of slices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="metrics CSV for predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--name", default="metrics.csv", help="report file name under reports/")
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("mc-train", cmd_mc_train, "train the infection-guided multi-class head"),
                              ("mc-infer", cmd_mc_infer, "multi-class masks (palette PNGs)")):
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "mc-train":
            p.add_argument("--data", required=True)
        else:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--images", required=True)
            p.add_argument("--gt", help="multi-class ground truth dir; enables the per-class metrics CSV")
            p.add_argument("--render", action="store_true", help="also write red/green overlays")
        p.add_argument("--infection", help="directory of infection probability PNGs")
        p.add_argument("--infnet", help="infection-network checkpoint used when --infection is absent")
        p.set_defaults(func=func)

    p = sub.add_parser("report", parents=[common], help="merge metric CSVs into a summary table and plot")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--names", nargs="+")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth-data", parents=[common], help="write a procedural demo dataset")
    p.add_argument("dest")
    p.add_argument("--labeled", type=int, default=20)
    p.add_argument("--unlabeled", type=int, default=10)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_synth_data)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    for key in ("seed", "device", "ablation", "checkpoint_every"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = str(value)
    cfg = load_config(args.config, overrides)
    cfg.model_config()  # surface bad ablation / model keys before any work
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        seed_everything(cfg.seed)
        return args.func(args, cfg)
    except (ConfigError, ValidationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (LoadError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

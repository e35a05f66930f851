"""Command-line pipeline: gen -> train -> index -> eval, plus a sweep mode.

Every command writes its resolved configuration beside its outputs, prints a
one-line JSON summary on success, and exits 0 on success, 1 on validation
errors (bad flags, bad config, missing upstream artifacts), 2 on runtime
failures.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import annindex, evalkit, synthdata, trainer
from .evalkit import EvalConfig
from .geogrid import build_label_map, discretize, load_label_map, save_label_map
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .synthdata import SynthConfig, load_manifest, save_manifest
from .trainer import TrainConfig


class CliError(ValueError):
    """Validation problem the user can fix (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; bad usage is code 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise CliError(f"config file {path} does not exist") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CliError(f"{path}:{e.lineno}:{e.colno}: invalid JSON ({e.msg})") from None
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config root must be a JSON object")
    known = {"synth", "model", "train", "eval"}
    for key in doc:
        if key not in known:
            raise CliError(f"{path}: unknown config section {key!r}; expected {sorted(known)}")
    return doc


def _dataclass_from(cls, section: dict, where: str, **overrides):
    fields = {f.name for f in dataclasses.fields(cls)}
    merged = dict(section)
    for key in merged:
        if key not in fields:
            raise CliError(f"{where}: unknown field {key!r}; expected one of {sorted(fields)}")
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    if "point_widths" in merged:
        merged["point_widths"] = tuple(merged["point_widths"])
    if "extra_k" in merged:
        merged["extra_k"] = tuple(merged["extra_k"])
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise CliError(f"{where}: {e}") from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, command: str, sections: dict) -> None:
    doc = {"command": command}
    for name, value in sections.items():
        doc[name] = dataclasses.asdict(value) if dataclasses.is_dataclass(value) else value
    (out / "run_config.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _summary(**kv) -> int:
    print(json.dumps(kv, sort_keys=True))
    return 0


def _require(path, producer: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing artifact {p}; produce it with `gridloc {producer}` first")
    return p


def _load_dataset(manifest_path):
    manifest = load_manifest(_require(manifest_path, "gen"))
    container_path = Path(manifest_path).parent / manifest.container
    container = synthdata.CloudContainer.load(_require(container_path, "gen"))
    return manifest, container


def _database_label_map(manifest):
    cells = [
        discretize(s.pose(), manifest.grid) for s in manifest.by_role("database")
    ]
    if not cells:
        raise CliError("manifest has no database samples; did filtering remove everything?")
    return build_label_map(cells)


def _split_stats(manifest) -> dict:
    per_map: dict[str, dict] = {}
    splits = sorted({s.split for s in manifest.samples if s.split})
    for m in range(manifest.maps):
        row: dict[str, int] = {}
        for split in splits:
            in_split = [s for s in manifest.samples if s.map_id == m and s.split == split]
            row[f"n_{split}"] = len(in_split)
            if split != "train":
                row[f"n_{split}_kept"] = sum(1 for s in in_split if s.role == "query")
        db_cells = {
            discretize(s.pose(), manifest.grid)
            for s in manifest.samples
            if s.map_id == m and s.role == "database"
        }
        row["c_db"] = len(db_cells)
        for split in splits:
            if split == "train":
                continue
            q_cells = {
                discretize(s.pose(), manifest.grid)
                for s in manifest.samples
                if s.map_id == m and s.split == split and s.role == "query"
            }
            row[f"c_q_{split}"] = len(q_cells)
        per_map[str(m)] = row
    all_db_cells = {
        discretize(s.pose(), manifest.grid) for s in manifest.by_role("database")
    }
    return {"per_map": per_map, "num_classes": len(all_db_cells)}


def cmd_gen(args) -> int:
    config = _load_config_file(args.config)
    synth_cfg = _dataclass_from(
        SynthConfig, config.get("synth", {}), "synth config", seed=args.seed
    )
    out = _out_dir(args)
    manifest, container = synthdata.generate(synth_cfg)
    synthdata.split_train_val(manifest, args.k_percent)
    synthdata.assign_roles(manifest)
    manifest, _ = synthdata.filter_queries(manifest, args.radius)
    save_manifest(manifest, out / "manifest.json")
    container.save(out / "clouds.pcc")
    stats = _split_stats(manifest)
    (out / "stats.json").write_text(json.dumps(stats, sort_keys=True, indent=1) + "\n")
    _write_run_config(
        out, "gen",
        {"synth": synth_cfg, "k_percent": args.k_percent, "filter_radius": args.radius,
         "holdout_map": args.holdout_map},
    )
    extra = {}
    if args.holdout_map is not None:
        train_part, held_part = synthdata.holdout_split(
            copy.deepcopy(manifest), args.holdout_map, args.k_percent
        )
        synthdata.split_train_val(train_part, args.k_percent)
        synthdata.assign_roles(train_part)
        synthdata.filter_queries(train_part, args.radius)
        synthdata.filter_queries(held_part, args.radius)
        save_manifest(train_part, out / "manifest_holdout_train.json")
        save_manifest(held_part, out / "manifest_holdout_eval.json")
        extra = {
            "holdout_map": args.holdout_map,
            "holdout_train_manifest": str(out / "manifest_holdout_train.json"),
            "holdout_eval_manifest": str(out / "manifest_holdout_eval.json"),
        }
    return _summary(
        command="gen",
        manifest=str(out / "manifest.json"),
        samples=len(manifest.samples),
        num_classes=stats["num_classes"],
        warn_no_revisits=manifest.warn_no_revisits,
        **extra,
    )


def cmd_train(args) -> int:
    config = _load_config_file(args.config)
    manifest, container = _load_dataset(args.manifest)
    label_map = _database_label_map(manifest)
    model_cfg = _dataclass_from(
        ModelConfig,
        {**config.get("model", {}), "num_classes": label_map.num_classes},
        "model config",
        embed_dim=args.emb_size,
        normalize=args.normalize,
        seed=args.model_seed,
    )
    train_cfg = _dataclass_from(
        TrainConfig, config.get("train", {}), "train config",
        epochs=args.epochs, batch_size=args.batch, lr=args.lr,
        decimation_k=args.decimation, seed=args.seed,
    )
    out = _out_dir(args)
    params, logs = trainer.train(
        manifest, container, label_map, model_cfg, train_cfg,
        log_path=out / "train_log.jsonl",
        checkpoint_dir=out if train_cfg.checkpoint_every > 0 else None,
        verbose=args.verbose,
    )
    save_checkpoint(out / "checkpoint.lnck", params)
    _write_run_config(out, "train", {"model": model_cfg, "train": train_cfg,
                                     "manifest": str(args.manifest)})
    return _summary(
        command="train",
        checkpoint=str(out / "checkpoint.lnck"),
        epochs=train_cfg.epochs,
        final_loss=logs[-1]["mean_loss"],
        param_count=logs[-1]["param_count"],
    )


def cmd_index(args) -> int:
    manifest, container = _load_dataset(args.manifest)
    params = load_checkpoint(_require(args.checkpoint, "train"))
    label_map = _database_label_map(manifest)
    out = _out_dir(args)
    db = annindex.build_db(params, manifest, container, label_map, metric=args.metric)
    annindex.save_db(db, out / "db.emdb")
    save_label_map(label_map, manifest.grid, out / "label_map.txt")
    _write_run_config(out, "index", {"manifest": str(args.manifest),
                                     "checkpoint": str(args.checkpoint),
                                     "metric": args.metric})
    return _summary(
        command="index",
        db=str(out / "db.emdb"),
        label_map=str(out / "label_map.txt"),
        entries=len(db),
        num_classes=label_map.num_classes,
    )


def cmd_eval(args) -> int:
    config = _load_config_file(args.config)
    manifest, container = _load_dataset(args.manifest)
    params = load_checkpoint(_require(args.checkpoint, "train"))
    db = annindex.load_db(_require(args.db, "index"))
    label_map, _grid = load_label_map(_require(args.label_map, "index"))
    extra_k = tuple(int(k) for k in args.k_list.split(",") if k.strip()) if args.k_list else ()
    eval_cfg = _dataclass_from(
        EvalConfig, config.get("eval", {}), "eval config",
        radius=args.radius, extra_k=extra_k or None,
        weighted_mar=True if args.weighted_mar else None,
    )
    report = evalkit.evaluate(db, manifest, container, params, label_map, eval_cfg)
    out = _out_dir(args)
    (out / "report.json").write_text(report.to_json())
    if args.csv:
        (out / "report.csv").write_text(report.to_csv())
    _write_run_config(out, "eval", {"eval": eval_cfg, "manifest": str(args.manifest),
                                    "checkpoint": str(args.checkpoint), "db": str(args.db)})
    return _summary(
        command="eval",
        report=str(out / "report.json"),
        mar_at_1=report.mar_at_1,
        mar_at_1pct=report.mar_at_1pct,
        radius=eval_cfg.radius,
    )


def cmd_sweep(args) -> int:
    config = _load_config_file(args.config)
    manifest, container = _load_dataset(args.manifest)
    label_map = _database_label_map(manifest)
    emb_sizes = [int(v) for v in args.emb_sizes.split(",")]
    decimations = [int(v) for v in args.decimations.split(",")]
    norms = []
    for v in args.norms.split(","):
        if v not in ("on", "off"):
            raise CliError(f"--norms entries must be on/off, got {v!r}")
        norms.append(v == "on")
    out = _out_dir(args)
    maps = sorted({s.map_id for s in manifest.by_role("database")})
    header = ["emb_size", "decimation", "norm"]
    header += [f"recall@1_map{m}" for m in maps]
    header += [f"recall@1pct_map{m}" for m in maps]
    header += ["MAR@1", "MAR@1pct", "epoch_time_s", "param_count"]
    rows = [",".join(header)]
    combos = [(e, k, n) for e in emb_sizes for k in decimations for n in norms]
    for emb_size, k, norm in combos:  # sequential on purpose: comparable timings
        run_dir = out / f"run_emb{emb_size}_k{k}_norm{'on' if norm else 'off'}"
        run_dir.mkdir(parents=True, exist_ok=True)
        model_cfg = _dataclass_from(
            ModelConfig,
            {**config.get("model", {}), "num_classes": label_map.num_classes},
            "model config", embed_dim=emb_size, normalize=norm, seed=args.model_seed,
        )
        train_cfg = _dataclass_from(
            TrainConfig, config.get("train", {}), "train config",
            epochs=args.epochs, batch_size=args.batch, lr=args.lr,
            decimation_k=k, seed=args.seed,
        )
        params, logs = trainer.train(
            manifest, container, label_map, model_cfg, train_cfg,
            log_path=run_dir / "train_log.jsonl", verbose=args.verbose,
        )
        save_checkpoint(run_dir / "checkpoint.lnck", params)
        db = annindex.build_db(params, manifest, container, label_map)
        annindex.save_db(db, run_dir / "db.emdb")
        save_label_map(label_map, manifest.grid, run_dir / "label_map.txt")
        eval_cfg = _dataclass_from(EvalConfig, config.get("eval", {}),
                                   "eval config", radius=args.radius)
        report = evalkit.evaluate(db, manifest, container, params, label_map, eval_cfg)
        (run_dir / "report.json").write_text(report.to_json())
        mean_epoch = float(np.mean([rec["epoch_seconds"] for rec in logs]))
        cells = [str(emb_size), str(k), "on" if norm else "off"]
        k1p = report.k_top1pct
        cells += [f"{report.per_map.get(m, {}).get('recall@1', float('nan')):.6f}" for m in maps]
        cells += [
            f"{report.per_map.get(m, {}).get(f'recall@{k1p}', float('nan')):.6f}" for m in maps
        ]
        cells += [f"{report.mar_at_1:.6f}", f"{report.mar_at_1pct:.6f}",
                  f"{mean_epoch:.3f}", str(logs[-1]["param_count"])]
        rows.append(",".join(cells))
    (out / "sweep.csv").write_text("\n".join(rows) + "\n")
    _write_run_config(out, "sweep", {"manifest": str(args.manifest),
                                     "emb_sizes": emb_sizes, "decimations": decimations,
                                     "norms": args.norms, "epochs": args.epochs})
    return _summary(command="sweep", csv=str(out / "sweep.csv"), runs=len(combos))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[], help="generate a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--config", default=None, help="JSON config with a 'synth' section")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--k-percent", type=float, default=90.0,
                     help="share of scenes that go to training")
    gen.add_argument("--radius", type=float, default=18.0,
                     help="query filtering radius in meters")
    gen.add_argument("--holdout-map", type=int, default=None,
                     help="also emit hold-one-map-out manifests for this map")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a checkpoint on a manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--batch", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--emb-size", type=int, default=None)
    tr.add_argument("--decimation", type=int, default=None)
    tr.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--model-seed", type=int, default=None)
    tr.add_argument("--verbose", action="store_true")
    tr.set_defaults(func=cmd_train)

    ix = sub.add_parser("index", help="build the embedding database")
    ix.add_argument("--manifest", required=True)
    ix.add_argument("--checkpoint", required=True)
    ix.add_argument("--out", required=True)
    ix.add_argument("--metric", choices=annindex.METRICS, default="euclidean")
    ix.set_defaults(func=cmd_index)

    ev = sub.add_parser("eval", help="score retrieval recall")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--db", required=True)
    ev.add_argument("--label-map", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--config", default=None)
    ev.add_argument("--radius", type=float, default=None)
    ev.add_argument("--k-list", default=None, help="extra comma-separated K values")
    ev.add_argument("--weighted-mar", action="store_true")
    ev.add_argument("--csv", action="store_true", help="also write report.csv")
    ev.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep", help="cross product over hyperparameters")
    sw.add_argument("--manifest", required=True)
    sw.add_argument("--out", required=True)
    sw.add_argument("--config", default=None)
    sw.add_argument("--emb-sizes", default="16,512")
    sw.add_argument("--decimations", default="20")
    sw.add_argument("--norms", default="off,on")
    sw.add_argument("--epochs", type=int, default=None)
    sw.add_argument("--batch", type=int, default=None)
    sw.add_argument("--lr", type=float, default=None)
    sw.add_argument("--radius", type=float, default=None)
    sw.add_argument("--seed", type=int, default=None)
    sw.add_argument("--model-seed", type=int, default=None)
    sw.add_argument("--verbose", action="store_true")
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, IndexError, FileNotFoundError) as e:
        print(f"gridloc: error: {e}", file=sys.stderr)
        return 1
    except trainer.TrainingDiverged as e:
        print(f"gridloc: runtime failure: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"gridloc: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""``hyperdas`` command line: generate, pretrain, train, eval, sweep, analyze.

Exit codes: 0 success, 2 configuration error, 3 integrity error, 4 training
failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from hyperdas.autodiff.checkpoint import IntegrityError
from hyperdas.config import DEFAULT_CONFIG, ConfigError, RunConfig, load_config
from hyperdas.evaluate import (categorize_locations, evaluate, export_projection, export_vectors, geometry,
                               multi_token_fraction, self_everywhere_fraction, summary_table, sweep_layers,
                               write_records)
from hyperdas.pipeline import build_world, pretrained_target
from hyperdas.ravel import dataset_hash, to_jsonl
from hyperdas.selector import export_grid
from hyperdas.store import RunDir, load_model, load_target, output_root, save_model, save_target
from hyperdas.target import TrainingFailure
from hyperdas.train import TrainingDiverged, train

log = logging.getLogger("hyperdas")

EXIT_CONFIG, EXIT_INTEGRITY, EXIT_TRAINING = 2, 3, 4


def _config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "layer", None) is not None and args.command in ("train",):
        cfg.train = dataclasses.replace(cfg.train, layer=args.layer)
        cfg.overrides["layer"] = args.layer
    return cfg


def _need_checkpoint(args) -> Path:
    if not args.checkpoint:
        raise ConfigError(f"--checkpoint is required for {args.command}")
    return Path(args.checkpoint)


def _world(cfg: RunConfig, run: RunDir):
    world = build_world(cfg.world)
    run.manifest["dataset_hash"] = dataset_hash(world.train + world.test)
    return world


def _check_dataset(upstream: dict, run: RunDir) -> None:
    recorded = upstream.get("dataset_hash")
    if recorded and recorded != run.manifest["dataset_hash"]:
        raise IntegrityError("checkpoint was built on a different dataset than this config generates")


def _metrics(res) -> dict:
    return {"snapped": res.snapped.to_dict(), "soft": res.soft.to_dict(), "gap": res.gap,
            "multi_token_fraction": multi_token_fraction(res.records),
            "self_everywhere_iso": self_everywhere_fraction(res.records)}


def cmd_generate(args) -> Path:
    cfg = _config(args)
    with RunDir(output_root(args.out), "generate", cfg.digest, cfg.world.seed) as run:
        world = _world(cfg, run)
        run.write_text("config.ini", cfg.text)
        run.write_text("vocab.json", world.vocab.to_json())
        run.write_text("train.jsonl", to_jsonl(world.train))
        run.write_text("test.jsonl", to_jsonl(world.test))
        run.write_text("splits.json", world.manifest.to_json())
        log.info("generated %d train / %d test examples in %s", len(world.train), len(world.test), run.path)
    return run.path


def cmd_pretrain(args) -> Path:
    cfg = _config(args)
    with RunDir(output_root(args.out), "pretrain", cfg.digest, cfg.world.seed) as run:
        world = _world(cfg, run)
        run.write_text("config.ini", cfg.text)
        target, report = pretrained_target(world, strict=False)
        run.write_json("pretrain_report.json", report)
        save_target(run, target)
        log.info("target held-out accuracy %.4f after %d steps", report.test_accuracy, report.steps)
        if report.test_accuracy < 0.95:
            raise TrainingFailure(f"target held-out accuracy {report.test_accuracy:.3f} < 0.95",
                                  dataclasses.asdict(report))
    return run.path


def _train_into(run: RunDir, cfg: RunConfig, target_path: Path, layer: int | None = None):
    target, upstream = load_target(target_path)
    run.upstream(target_path)
    world = _world(cfg, run)
    _check_dataset(upstream, run)
    tcfg = cfg.train if layer is None else dataclasses.replace(cfg.train, layer=layer)
    run.write_text("config.ini", cfg.text)
    model, record = train(target, world.vocab, world.attributes, world.train, tcfg,
                          dataset_hash=run.manifest["dataset_hash"])
    run.write_text("run_record.json", record.to_json() + "\n")
    save_model(run, model, tcfg, target_path)
    res = evaluate(model, world.test, world.vocab)
    write_records(run.file("records.jsonl"), res.records)
    run.add("records.jsonl")
    run.write_json("metrics.json", {"final_loss": record.final_loss, **_metrics(res)})
    run.write_text("summary.txt", summary_table({"snapped": res.snapped, "soft": res.soft}))
    return res


def cmd_train(args) -> Path:
    cfg = _config(args)
    target_path = _need_checkpoint(args)
    with RunDir(output_root(args.out), "train", cfg.digest, cfg.train.seed) as run:
        res = _train_into(run, cfg, target_path)
        log.info("snapped disentangle %.4f, soft %.4f", res.snapped.disentangle, res.soft.disentangle)
    return run.path


def cmd_eval(args) -> Path:
    cfg = _config(args)
    model_path = _need_checkpoint(args)
    with RunDir(output_root(args.out), "eval", cfg.digest, cfg.world.seed) as run:
        model, tcfg, upstream = load_model(model_path)
        run.upstream(model_path)
        world = _world(cfg, run)
        _check_dataset(upstream, run)
        if args.layer is not None:
            if not 0 <= args.layer <= model.target.n_layers:
                raise ConfigError(f"--layer {args.layer} outside [0, {model.target.n_layers}]")
            model.cfg.layer = args.layer
        res = evaluate(model, world.test, world.vocab)
        write_records(run.file("records.jsonl"), res.records)
        run.add("records.jsonl")
        report = res.snapped if args.mode == "snapped" else res.soft
        run.write_json("metrics.json", {"mode": args.mode, "layer": model.cfg.layer, **_metrics(res)})
        run.write_text("summary.txt", summary_table({args.mode: report}))
        print(summary_table({args.mode: report}), end="")
    return run.path


def cmd_sweep(args) -> Path:
    cfg = _config(args)
    target_path = _need_checkpoint(args)
    root = output_root(args.out)
    layers = sweep_layers(cfg.world.n_layers, cfg.sweep_stride)
    with RunDir(root, "sweep", cfg.digest, cfg.train.seed) as sweep:
        series = {}
        for layer in layers:
            with RunDir(root, f"sweep-layer{layer:02d}", cfg.digest, cfg.train.seed) as run:
                res = _train_into(run, cfg, target_path, layer)
            series[layer] = {"run": run.path.name, "snapped": res.snapped.disentangle,
                             "soft": res.soft.disentangle}
            log.info("layer %d snapped %.4f", layer, res.snapped.disentangle)
        best = max(series, key=lambda k: series[k]["snapped"])
        sweep.write_json("sweep.json", {"layers": series, "best_layer": best})
    return sweep.path


def cmd_analyze(args) -> Path:
    cfg = _config(args)
    model_path = _need_checkpoint(args)
    with RunDir(output_root(args.out), "analyze", cfg.digest, cfg.world.seed) as run:
        model, tcfg, upstream = load_model(model_path)
        run.upstream(model_path)
        world = _world(cfg, run)
        _check_dataset(upstream, run)
        res = evaluate(model, world.test, world.vocab, keep_grids=True)
        hist = categorize_locations(res.records, world.test, world.vocab)
        run.write_json("locations.json", hist.to_dict())
        if res.vectors is not None:
            export_vectors(run.file("vectors.tsv"), res.vectors, res.records)
            run.add("vectors.tsv")
            geo = geometry(res.vectors, [r["target_attribute"] for r in res.records],
                           seed=cfg.world.seed)
            run.write_json("geometry.json", geo.to_dict())
            export_projection(run.file("projection.tsv"), geo)
            run.add("projection.tsv")
        grid_dir = run.file("grids")
        grid_dir.mkdir()
        for i, (soft, snapped) in enumerate(res.grids[:args.grids]):
            ex = world.test[i]
            export_grid(grid_dir / f"grid-{i:04d}.txt", ex.base, ex.counterfactual, soft, snapped)
            run.add(f"grids/grid-{i:04d}.txt")
        run.write_json("metrics.json", _metrics(res))
    return run.path


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperdas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output root (default $HYPERDAS_OUT or ./runs)")
        p.add_argument("--checkpoint", help="upstream target (train/sweep) or model (eval/analyze)")
        p.add_argument("--layer", type=int, help="intervention layer override")
        p.add_argument("--mode", choices=("soft", "snapped"), default="snapped")
        if name == "analyze":
            p.add_argument("--grids", type=int, default=20, help="number of grids to export")
    sub.add_parser("default-config", help="print the default configuration")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "default-config":
        print(DEFAULT_CONFIG, end="")
        return 0
    try:
        path = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (TrainingFailure, TrainingDiverged) as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

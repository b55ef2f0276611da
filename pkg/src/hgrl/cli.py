"""Command line entry point: ``hgrl <verb> [--config FILE] [--seed N] [--out DIR] [--checkpoint FILE]``.

Every verb writes ``manifest.json`` into its output directory with the fully
resolved configuration. Failures print one ``error: {...}`` JSON line on
stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from . import experiments as X
from .config import ConfigError, RunConfig, format_config, load_config, parse_config
from .data import GenerationError, KINDS, build_split, save_dataset, split_seeds
from .metrics import CSV_HEADER
from .train import TrainingError, _write_csv, evaluate_model, load_data, train

log = logging.getLogger("hgrl")

EXIT_CONFIG, EXIT_TRAINING, EXIT_IO, EXIT_OTHER = 2, 3, 4, 1


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        cfg = parse_config("format_version = 1\n" + "\n".join(args.set), base=cfg)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _manifest(out: Path, verb: str, cfg: RunConfig, outputs, **extra) -> None:
    data = {"command": verb, "version": __version__, "config": format_config(cfg),
            "outputs": sorted(str(p) for p in outputs)}
    data.update(extra)
    (out / "manifest.json").write_text(json.dumps(data, indent=2) + "\n")


def _need_checkpoint(args) -> Path:
    if not args.checkpoint:
        raise ConfigError(f"{args.verb} needs --checkpoint")
    path = Path(args.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return path


def cmd_train(args, cfg, out):
    t0 = time.perf_counter()
    _, record = train(cfg, out)
    return ["train.csv", "best.ckpt", "last.ckpt", "config.txt"], {
        "best_f1": record.best_f1, "best_epoch": record.best_epoch,
        "seconds_per_image": record.infer_seconds, "wall_seconds": time.perf_counter() - t0}


def cmd_eval(args, cfg, out):
    model = X.load_model(cfg, _need_checkpoint(args))
    _, test_set = load_data(cfg)
    report = evaluate_model(model, test_set)
    _write_csv(out / "eval.csv", CSV_HEADER, [report.csv_row(Path(args.checkpoint).name)])
    print(f"f1 {report.f1:.6f} mcc {report.mcc:.6f}")
    return ["eval.csv"], {}


def cmd_ablate(args, cfg, out):
    X.ablate(cfg, out)
    return ["ablation.csv", "ablation_runs.csv"], {}


def cmd_sweep_downsample(args, cfg, out):
    X.sweep_downsample(cfg, out)
    return ["sweep_downsample.csv", "sweep_downsample_runs.csv"], {}


def cmd_sweep_alpha(args, cfg, out):
    X.sweep_alpha(cfg, out)
    return ["sweep_alpha.csv", "sweep_alpha_runs.csv"], {}


def cmd_robustness(args, cfg, out):
    if args.checkpoint:
        models = [X.load_model(cfg, _need_checkpoint(args))]
    else:
        models = [m for _, m, _ in X.train_runs(cfg, out, "model")]
    X.robustness(cfg, models, out)
    return ["robustness.csv"] + (["robustness_runs.csv"] if len(models) > 1 else []), {}


def cmd_gen_data(args, cfg, out):
    train_seeds, test_seeds = split_seeds(cfg.data_seed, cfg.n_train, cfg.n_test)
    for name, seeds in (("train", train_seeds), ("test", test_seeds)):
        save_dataset(build_split(seeds, cfg.image_size), out / name)
    return ["train/manifest.csv", "test/manifest.csv"], {"kinds": list(KINDS)}


VERBS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-downsample": cmd_sweep_downsample,
    "sweep-alpha": cmd_sweep_alpha,
    "robustness": cmd_robustness,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hgrl", description=__doc__.splitlines()[0])
    p.add_argument("verb", choices=sorted(VERBS))
    p.add_argument("--config", help="key = value config file (format_version 1)")
    p.add_argument("--seed", type=int, help="model seed; overrides the config")
    p.add_argument("--out", help="output directory; overrides the config")
    p.add_argument("--checkpoint", help="model checkpoint for eval and robustness")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print("error: " + json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _resolve(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        outputs, extra = VERBS[args.verb](args, cfg, out)
        _manifest(out, args.verb, cfg, outputs, **extra)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except TrainingError as exc:
        return _fail("training", exc, EXIT_TRAINING)
    except GenerationError as exc:
        return _fail("generation", exc, EXIT_OTHER)
    except OSError as exc:
        return _fail("io", exc, EXIT_IO)
    return 0


if __name__ == "__main__":
    sys.exit(main())

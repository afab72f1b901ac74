"""Command-line entry point: gen-data, train, eval, gradcheck, compare.

Exit codes: 0 success, 1 validation error, 2 runtime/numeric failure,
3 acceptance-check failure (gradcheck / compare).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from . import checkpoint as ckpt
from . import pipeline
from .config import ConfigError, RunConfig

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("tripleprompt")


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, args.set)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    manifests = pipeline.write_datasets(cfg, args.out)
    for name, m in manifests.items():
        print(f"{name}: {m['num_images']} images, {m['num_classes']} classes, "
              f"{m['height']}x{m['width']}x{m['feature_dim']}, checksum {m['checksum']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    train_ds = pipeline.load_subset(args.data, pipeline.TRAIN_DIR)
    pipeline.check_dataset(cfg, train_ds)
    resume, prior = None, []
    if args.resume:
        resume = ckpt.load(args.resume)
        log_path = Path(args.resume).parent / "train_log.csv"
        if log_path.exists():
            prior = log_path.read_text().splitlines()[1:]
    out.mkdir(parents=True, exist_ok=True)
    state = pipeline.run_training(cfg, train_ds, resume, args.stop_after, prior)
    meta = {"train_dataset_checksum": train_ds.checksum()}
    ckpt.save(out / "checkpoint.bin", state.checkpoint(meta))
    (out / "train_log.csv").write_text(state.log_text())
    (out / "config.json").write_text(cfg.to_json())
    print(f"trained {state.epoch}/{cfg.train.epochs} epochs, {len(state.log_lines)} steps; "
          f"config {cfg.hash()[:16]}")
    if state.epoch_losses:
        print(f"epoch loss first {state.epoch_losses[0]:.6f} last {state.epoch_losses[-1]:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = ckpt.load(args.checkpoint)
    if args.config is not None or args.set:
        if _config(args).hash() != ck.config_hash:
            raise ConfigError("config hash does not match the checkpoint")
    ds = pipeline.load_subset(args.data, args.subset)
    report = pipeline.evaluate(ck, ds, args.split)
    path = Path(args.report) if args.report else Path(args.checkpoint).parent / f"metrics_{args.split}.json"
    path.write_text(report.to_json())
    print(report.table())
    print(f"report written to {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = pipeline.run_gradcheck(args.instances, args.seed)
    print(report.text(), end="")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_compare(args) -> int:
    cfg = _config(args)
    train_ds = pipeline.load_subset(args.data, pipeline.TRAIN_DIR)
    test_ds = pipeline.load_subset(args.data, pipeline.TEST_DIR)
    pipeline.check_dataset(cfg, train_ds)
    report = pipeline.run_compare(cfg, train_ds, test_ds)
    print(report.table(), end="")
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_CHECK if report.violations else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tripleprompt", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="run config JSON")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")

    sp = sub.add_parser("gen-data", help="write a synthetic planted dataset")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train prompt contexts")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--stop-after", type=int, help="stop once this many epochs are complete")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--subset", default=pipeline.TEST_DIR)
    sp.add_argument("--split", choices=pipeline.SPLITS, default="all")
    sp.add_argument("--report", help="where to write the MetricsReport JSON")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the prompt gradients")
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("compare", help="ablation table over head modes and WTA")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="write the comparison JSON here")
    sp.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    except ImportError:
        limiter = nullcontext()
    with limiter:
        try:
            return args.fn(args)
        except ConfigError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_VALIDATION
        except (ValueError, OSError, FloatingPointError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``prefdistill train|label|eval|retrieve|synth``.

Exit codes: 0 success, 1 other library error, 2 configuration error,
3 teacher failure, 4 resumable abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import defaults_help, load_config
from .errors import ConfigError, PrefDistillError, ResumableAbort, TeacherError

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_TEACHER, EXIT_ABORT = 0, 1, 2, 3, 4

log = logging.getLogger("prefdistill")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", "-c", required=True, help="run configuration (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefdistill",
        description="Distil teacher image preferences into a persona-to-image retrieval embedding table.",
        epilog="configuration defaults (every key optional):\n" + defaults_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the distillation loop")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from checkpoints/last")
    p.add_argument("--dry-run", action="store_true",
                   help="validate inputs and print the per-step teacher budget; no teacher calls")

    p = sub.add_parser("label", help="tournament labels for the configured persona splits")
    _common(p)

    p = sub.add_parser("eval", help="mean percentile rank of tournament winners")
    _common(p)
    p.add_argument("--checkpoint", default=None, help="best | last | checkpoint directory")
    p.add_argument("--split", default=None, choices=["val", "test"])

    p = sub.add_parser("retrieve", help="top-k images for one persona (JSON Lines)")
    _common(p)
    p.add_argument("--persona", required=True, help="persona id from any persona file")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("synth", help="write a synthetic world (inputs plus config.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=512)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=20)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _run(args) -> int:
    if args.command == "synth":
        from .synth import make_world, write_world

        world = make_world(args.images, args.train, args.val, args.test, args.dim, seed=args.seed)
        path = write_world(world, args.out, tau=args.tau, teacher_seed=args.seed, extra_config={"seed": args.seed})
        print(path)
        return EXIT_OK

    cfg = _load(args)
    if args.command == "train":
        result = pipeline.train(cfg, resume=args.resume, dry_run=args.dry_run)
        if args.dry_run:
            print(json.dumps(result, indent=2))
            return EXIT_OK
        print(json.dumps({
            "steps": result.steps,
            "stopped_early": result.stopped_early,
            "initial_val_mean_percentile": result.initial_metric,
            "best_val_mean_percentile": result.stopper.best_metric,
            "best_step": result.stopper.best_tag,
            "teacher_calls": result.teacher_calls,
            "cache_hits": result.cache_hits,
            "output_dir": str(result.output_dir),
        }))
    elif args.command == "label":
        out = pipeline.label(cfg)
        for split, labels in out.items():
            print(json.dumps({"split": split, "labels": len(labels),
                              "comparisons": sum(l.comparisons for l in labels)}))
    elif args.command == "eval":
        if args.split:
            cfg.eval.split = args.split
        report = pipeline.evaluate(cfg, checkpoint=args.checkpoint)
        print(json.dumps({"split": cfg.eval.split, "mean_percentile": report.mean,
                          "n_personas": report.n_personas,
                          "report": str(cfg.output_dir / f"report_{cfg.eval.split}.json")}))
    elif args.command == "retrieve":
        res = pipeline.retrieve(cfg, args.persona, args.k, checkpoint=args.checkpoint)
        for rank, (i, s) in enumerate(zip(res.ids, res.scores), start=1):
            print(json.dumps({"persona_id": res.persona_id, "rank": rank, "id": i, "score": s}))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TeacherError as exc:
        print(f"teacher failure: {exc}", file=sys.stderr)
        return EXIT_TEACHER
    except ResumableAbort as exc:
        print(f"aborted (resume with --resume): {exc}", file=sys.stderr)
        return EXIT_ABORT
    except PrefDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``latent-lens <command> --config cfg.json --out run_dir``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import LatentLensError


def _config(args) -> pipeline.RunConfig:
    cfg = pipeline.RunConfig.load(args.config) if args.config else pipeline.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="latent-lens", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, default=None)
        return p

    add("train", "train the VAE variants")
    p = add("traverse", "decode traversal grids and write strips")
    p.add_argument("--params", help="single parameter file (default: every file in OUT/params)")
    p = add("explain", "sample explanations, score certainty, select")
    p.add_argument("--params")
    p.add_argument("--epsilon", type=float)
    p = add("calibrate", "fit the display threshold against labeled sequences")
    p.add_argument("--annotations", required=True)
    p.add_argument("--scores", help="certainty JSONL (default: OUT/certainty.jsonl)")
    p = add("select", "re-apply a threshold to an explain run")
    p.add_argument("--epsilon", type=float)
    p = add("evaluate", "score explanations against reference annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--explanations", help="default: OUT/explanations.jsonl")
    add("report", "write report.md for a run directory")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = _config(args)
        if args.command == "train":
            paths = pipeline.cmd_train(cfg, out)
            _print_json({k: str(v) for k, v in paths.items()})
        elif args.command == "traverse":
            records = pipeline.cmd_traverse(cfg, out, args.params)
            print(f"{len(records)} sequences written to {out}")
        elif args.command == "explain":
            records = pipeline.cmd_explain(cfg, out, args.params, args.epsilon)
            for r in records:
                shown = r["displayed"] if r["status"] == "ok" else f"[{r['error']}]"
                print(f"{r['sequence_id']}: {shown}")
        elif args.command == "calibrate":
            scores = args.scores or out / "certainty.jsonl"
            results = pipeline.cmd_calibrate(args.annotations, scores, out, cfg.similarity.kinds)
            _print_json({k: v.to_dict() for k, v in results.items()})
        elif args.command == "select":
            eps = args.epsilon
            if eps is None and (out / "calibration.json").exists() and cfg.epsilon == "calibrate":
                eps = cfg.resolve_epsilon()
            records = pipeline.cmd_select(cfg, out, eps)
            print(f"{len(records)} selections updated")
        elif args.command == "evaluate":
            expl = args.explanations or out / "explanations.jsonl"
            rows = pipeline.cmd_evaluate(expl, args.annotations, out, cfg.similarity)
            _print_json(rows)
        elif args.command == "report":
            pipeline.cmd_report(out)
            print(out / "report.md")
    except (LatentLensError, FileNotFoundError, ValueError) as exc:
        print(f"latent-lens {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

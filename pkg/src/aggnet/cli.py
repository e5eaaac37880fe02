"""Command-line entry point.

Verbs: ``train`` one configuration, ``eval`` a checkpoint under optional
noise, ``sweep`` a configuration matrix, ``gradcheck`` the analytic
gradients, and ``fetch-data`` for the CIFAR-10 binary archive.  Exits
nonzero on a failed gradcheck or an aborted run.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as datamod
from . import gradcheck
from .checkpoint import load_checkpoint, read_header
from .experiment import (
    ExperimentConfig,
    TrainingDiverged,
    build_model,
    evaluate,
    format_results_table,
    load_datasets,
    robustness_score,
    sweep,
    train,
)


def _cmd_train(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    try:
        report = train(config, out_dir=args.out, log=print)
    except TrainingDiverged as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return 2
    print(
        f"clean {100 * report.clean_accuracy:.2f}%  "
        f"noisy {100 * report.noisy_accuracy:.2f}%  rho {report.rho:.3f}  "
        f"best epoch {report.best_epoch}"
    )
    return 0


def _cmd_eval(args) -> int:
    header = read_header(args.checkpoint)
    cfg_dict = header.get("extra", {}).get("config")
    if cfg_dict is None:
        print("checkpoint carries no config echo; cannot rebuild model", file=sys.stderr)
        return 2
    config = ExperimentConfig(**cfg_dict)
    model = build_model(config)
    load_checkpoint(model, args.checkpoint)
    _, _, test = load_datasets(config)
    noise = None
    if args.noise_sigma > 0:
        noise = datamod.NoiseSpec(sigma_noise=args.noise_sigma, seed=args.noise_seed)
    acc = evaluate(model, test, config.arch, noise=noise)
    print(f"accuracy {100 * acc:.2f}%  (noise sigma {args.noise_sigma})")
    if args.noise_sigma > 0:
        clean = evaluate(model, test, config.arch)
        print(f"clean {100 * clean:.2f}%  rho {robustness_score(clean, acc):.3f}")
    return 0


def _cmd_sweep(args) -> int:
    matrix = json.loads(Path(args.matrix).read_text())
    rows = sweep(matrix, out_dir=args.out, log=print)
    print(format_results_table(rows))
    return 0 if all(r["status"] == "ok" for r in rows) else 2


def _cmd_gradcheck(args) -> int:
    ok = gradcheck.run(module=args.module, cases=args.cases)
    return 0 if ok else 1


def _cmd_fetch_data(args) -> int:
    sha = None if args.skip_checksum else (args.sha256 or datamod.CIFAR10_SHA256)
    try:
        where = datamod.fetch_cifar10(args.dir, sha256=sha)
    except Exception as exc:
        print(f"fetch failed: {exc}", file=sys.stderr)
        return 2
    print(f"CIFAR-10 binaries available under {where}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="aggnet",
        description="Learnable input-aggregation networks: training and evaluation",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True, help="JSON ExperimentConfig file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--noise-seed", type=int, default=1234)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("sweep", help="train a configuration matrix")
    p.add_argument("--matrix", required=True, help="JSON sweep matrix file")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    p.add_argument("--module", default="all",
                   choices=["all", "layers", "fmean", "gaussian", "hybrid"])
    p.add_argument("--cases", type=int, default=gradcheck.CASES)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("fetch-data", help="download and verify CIFAR-10")
    p.add_argument("--dir", required=True)
    p.add_argument("--sha256", default=None, help="override the recorded archive digest")
    p.add_argument("--skip-checksum", action="store_true")
    p.set_defaults(fn=_cmd_fetch_data)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

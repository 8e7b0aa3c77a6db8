"""Command-line entry point.

Verbs::

    gmmct simulate        --config C [--seed S] --out DIR [--force]
    gmmct reconstruct     --sinogram F [--config C] [--truth T] --out DIR [--stage 1|2|all]
    gmmct run             [--config C] [--seed S] --out DIR [--stage 1|2|all] [--force]
    gmmct check-gradients [--config C] [--seed S]
    gmmct report          --out DIR [--truth T]

Exit codes: 0 success, 1 failed gradient audit, 2 configuration error,
3 stage-1 failure, 4 stage-2 failure, 5 I/O error. ``GMMCT_THREADS`` caps
the number of worker threads (0 picks the CPU count).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiment import (ConfigError, ExperimentConfig, GenerationError, OutputExistsError,
                         _Writer, default_config_dict, dumps_json, experiment_truth, format_table,
                         meets_acceptance, metrics_name, metrics_report, morphology_from_dict, parse_modes,
                         read_sinogram, run_pipeline, sinogram_text, stage2_gradient_errors,
                         trajectory_from_dict)
from .model import Scene, simulate_sinogram
from .stage1 import Stage1Error
from .stage2 import Stage2Error

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_STAGE1 = 3
EXIT_STAGE2 = 4
EXIT_IO = 5

GRADIENT_TOL = 1e-5

logger = logging.getLogger("gmmct")


def _seed(text: str) -> int:
    val = int(text)
    if not 0 <= val < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return val


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmmct", description="Dynamic tomography of Gaussian particles.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, help="experiment JSON (default: packaged benchmark)")
        p.add_argument("--seed", type=_seed, help="override the config seed")
        p.add_argument("--out", type=Path, required=out_required, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing files")

    p = sub.add_parser("simulate", help="generate a scene and its sinogram")
    common(p)
    p = sub.add_parser("reconstruct", help="reconstruct from a sinogram file")
    common(p)
    p.add_argument("--sinogram", type=Path, help="sinogram file (needed unless --stage 2)")
    p.add_argument("--truth", type=Path, help="truth JSON for metrics")
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p = sub.add_parser("run", help="simulate then reconstruct")
    common(p)
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p = sub.add_parser("check-gradients", help="finite-difference audit of the stage-2 gradient")
    common(p, out_required=False)
    p.add_argument("--points", type=int, default=20)
    p = sub.add_parser("report", help="metrics for a finished run directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--truth", type=Path)
    p.add_argument("--force", action="store_true", help="rewrite metrics.json")
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig.from_dict(default_config_dict(), args.seed)
    return ExperimentConfig.load(args.config, args.seed)


def _load_truth(path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


def _print_metrics(metrics: dict) -> None:
    print(format_table(metrics))
    for key, val in sorted(metrics["summary"].items()):
        print(f"{key} = {val:.6g}")
    if "max_alpha_rel_error" in metrics["summary"]:
        print("acceptance:", "pass" if meets_acceptance(metrics) else "fail")


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    truth = experiment_truth(cfg)
    writer = _Writer(args.out, args.force)
    writer.check(["config.json", "truth.json", "sinogram.txt"])
    writer.write("config.json", dumps_json(cfg.to_dict()))
    writer.write("truth.json", dumps_json(truth.to_dict()))
    writer.write("sinogram.txt", sinogram_text(simulate_sinogram(truth, cfg.geometry)))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_pipeline(args, sinogram=None, truth=None) -> int:
    cfg = _load_config(args)
    result = run_pipeline(cfg, args.out, args.stage, args.force, sinogram=sinogram, truth=truth)
    if result.metrics is not None:
        _print_metrics(result.metrics)
    print(f"wrote {', '.join(result.files)} to {args.out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    truth = _load_truth(args.truth) if args.truth else None
    if args.stage == "2":
        return cmd_pipeline(args, truth=truth)
    if args.sinogram is None:
        raise ConfigError("reconstruct needs --sinogram")
    sino = read_sinogram(args.sinogram)
    if args.config is not None:
        cfg_geom = ExperimentConfig.load(args.config, args.seed).geometry
        if cfg_geom != sino.geometry:
            raise ConfigError("sinogram header geometry differs from the config geometry")
    return cmd_pipeline(args, sinogram=sino, truth=truth)


def cmd_check_gradients(args) -> int:
    cfg = _load_config(args)
    scene = experiment_truth(cfg)
    errs = stage2_gradient_errors(scene, cfg.geometry, args.points, seed=cfg.seed, cfg=cfg.stage2)
    for k, e in enumerate(errs):
        print(f"point {k:3d}  max relative error {e:.3e}")
    worst = max(errs)
    ok = worst <= GRADIENT_TOL
    print(f"worst {worst:.3e} ({'pass' if ok else 'fail'} at {GRADIENT_TOL:g})")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_report(args) -> int:
    out = args.out
    sino = read_sinogram(out / "sinogram.txt")
    modes = parse_modes((out / "modes.tsv").read_text(), sino.geometry)
    truth_path = args.truth or out / "truth.json"
    truth = _load_truth(truth_path)
    traj = trajectory_from_dict(json.loads((out / "trajectories.json").read_text()))
    morph_path = out / "morphology.json"
    morph = morphology_from_dict(json.loads(morph_path.read_text())) if morph_path.exists() else None
    metrics = metrics_report(truth, traj, morph, sino.geometry, modes)
    _print_metrics(metrics)
    name = metrics_name("all" if morph is not None else "1")
    if args.force or not (out / name).exists():
        (out / name).write_text(dumps_json(metrics))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "run": cmd_pipeline,
    "check-gradients": cmd_check_gradients,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, GenerationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Stage1Error as exc:
        print(f"stage 1 failed: {exc}", file=sys.stderr)
        return EXIT_STAGE1
    except Stage2Error as exc:
        print(f"stage 2 failed: {exc}", file=sys.stderr)
        return EXIT_STAGE2
    except (OSError, OutputExistsError, ValueError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

from .evaluation import EvaluationError, evaluate_run, write_report
from .pipeline import (ConfigError, ImputationError, PipelineConfig, disaggregate,
                       load_config, segment_scene, write_result)
from .raster import RasterError, read_fgrid, write_fgrid
from .scene import read_scene, write_scene
from .segmentation import SegmentationError, memberships_to_csv
from .svr import SvrConvergenceError, SvrError
from .synth import generate_scene, noisy_reference, scenario_params

DEFAULT_SEED = 42
REFERENCE_NOISE_K = 5.0

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("srrm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _k_value(raw: str):
    if raw.lower() == "auto":
        return "auto"
    try:
        k = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AUTO or a positive integer, got {raw!r}") from None
    if k < 1:
        raise argparse.ArgumentTypeError(f"k must be positive, got {k}")
    return k


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srrm", description="Multiscale brightness-temperature disaggregation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("synth", help="write a synthetic scene directory")
    s.add_argument("scenario")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)

    s = sub.add_parser("segment", help="segment a scene's coarse brightness temperature")
    s.add_argument("--scene", required=True, type=Path)
    s.add_argument("--k", type=_k_value, default="auto")
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("disaggregate", help="run the full disaggregation on a scene")
    s.add_argument("--scene", required=True, type=Path)
    s.add_argument("--config", type=Path, help="key = value configuration file")
    s.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("evaluate", help="write the comparison report for a result directory")
    s.add_argument("--result", required=True, type=Path)
    s.add_argument("--reference", type=Path)
    s.add_argument("--truth", type=Path)
    s.add_argument("--scene-name", default=None)
    s.add_argument("--day", default="0")
    s.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("pipeline", help="synthesize, disaggregate and evaluate in one go")
    s.add_argument("--scenario", required=True)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--config", type=Path)
    s.add_argument("--out", required=True, type=Path)
    return p


def _synth(scenario: str, seed: int, with_reference: bool = False):
    try:
        params = scenario_params(scenario, seed)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    scene, truth = generate_scene(params)
    scene.extras["truth"] = truth
    if with_reference:
        # the noise stream is derived from the seed but distinct from the scene's
        scene.extras["reference"] = noisy_reference(truth, REFERENCE_NOISE_K, seed=seed + 1)
    return scene, truth


def cmd_synth(args) -> None:
    scene, _ = _synth(args.scenario, args.seed)
    write_scene(scene, args.out)


def cmd_segment(args) -> None:
    scene = read_scene(args.scene)
    labels, mm, table = segment_scene(scene, PipelineConfig(k=args.k, seed=args.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    write_fgrid(labels, args.out / "labels_coarse.fgrid")
    memberships_to_csv(mm, args.out / "memberships.csv", table.sample_index)
    with open(args.out / "cost_trace.csv", "w") as fh:
        fh.write("evaluation,j_cs\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(mm.cost_trace))


def _config(path: Path | None, seed: int | None = None) -> PipelineConfig:
    cfg = load_config(path) if path is not None else PipelineConfig()
    return cfg if seed is None else replace(cfg, seed=seed)


def cmd_disaggregate(args) -> None:
    cfg = _config(args.config)
    scene = read_scene(args.scene)
    write_result(disaggregate(scene, cfg), args.out, cfg)


def cmd_evaluate(args) -> None:
    d = args.result
    fine = read_fgrid(d / "tb_fine.fgrid", name="tb_fine")
    coarse = read_fgrid(d / "tb_coarse.fgrid", name="tb_coarse")
    reference = read_fgrid(args.reference) if args.reference else None
    truth = read_fgrid(args.truth) if args.truth else None
    report = evaluate_run(SimpleNamespace(tb_fine=fine, tb_coarse=coarse), reference, truth,
                          scene=args.scene_name or d.name, day=args.day)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report.rows, args.out)


def cmd_pipeline(args) -> None:
    cfg = _config(args.config, args.seed)
    out = args.out
    scene, truth = _synth(args.scenario, args.seed, with_reference=True)
    write_scene(scene, out / "scene")
    reference = scene.extras["reference"]
    result = disaggregate(scene, cfg)
    write_result(result, out / "result", cfg)
    report = evaluate_run(result, reference, truth, scene=args.scenario)
    write_report(report.rows, out / "report.csv")


COMMANDS = {"synth": cmd_synth, "segment": cmd_segment, "disaggregate": cmd_disaggregate,
            "evaluate": cmd_evaluate, "pipeline": cmd_pipeline}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"srrm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SvrConvergenceError, SegmentationError) as exc:
        print(f"srrm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        detail = f"{exc.filename}: {exc.strerror}" if exc.filename else str(exc)
        print(f"srrm: data error: {detail}", file=sys.stderr)
        return EXIT_DATA
    except (RasterError, ConfigError, ImputationError, EvaluationError, SvrError) as exc:
        print(f"srrm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()

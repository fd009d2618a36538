"""
Command-line driver.

    python -m evaluation.run_msd generate --config configs/horizon_scene.json --override guidance.omega=0
    python -m evaluation.run_msd sweep --config configs/horizon_scene.json --param omega --values 0 2 40 10000 --seeds 0 1 2
    python -m evaluation.run_msd verify

Exit codes: 0 success, 1 verification failure, 2 config error, 3 numerical abort,
4 any other sampler or I/O failure.
"""
import argparse
import os
import sys
from typing import List, Optional

from pydantic import ValidationError

from evaluation.sweep import SweepSpec, generate, run_sweep, write_sweep
from evaluation.verify import run_checks
from msd.core import config_digest, load_config
from msd.errors import ConfigError, MSDError, NumericalError
from msd.models import get_denoiser
from msd.sampling import reference_windows
from tools.image_export import export_templates, write_png, write_raw_dump
from utils import get_logger

logger = get_logger("run_msd")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_FAILURE = 0, 1, 2, 3, 4


def cmd_generate(config_path: str, overrides: Optional[List[str]] = None) -> int:
    config = load_config(config_path, overrides)
    out = config.output
    base = os.path.join(out.directory, out.name)
    denoiser, scene = get_denoiser(config, config.build_schedule())
    sizes = config.pyramid.canvas_sizes()
    logger.info(f"levels={config.pyramid.levels} canvas sizes={sizes} config={config_digest(config)[:12]}")
    if out.export_templates and scene is not None:
        export_templates(scene.all_templates(), out.directory, out.name)

    reference_set = reference_windows(config, denoiser)
    result, report, counts = generate(
        config, denoiser, scene, reference_set, trace_path=f"{base}_trace.jsonl" if out.trace else None
    )
    logger.info(f"windows per level {counts}, total {sum(counts.values())}")
    if out.image:
        write_png(result.canvas, f"{base}.png")
    if out.raw:
        write_raw_dump(result.canvas, f"{base}.raw")
    report.config_digest = config_digest(config)
    report.seeds = [config.seed]
    report.write(f"{base}_metrics.json", f"{base}_metrics.csv")
    logger.info(f"wrote {base}.* ({', '.join(f'{k}={v.value:.4g}' for k, v in report.metrics.items())})")
    return EXIT_OK


def cmd_sweep(config_path: str, spec: SweepSpec, out_path: str, overrides: Optional[List[str]] = None) -> int:
    config = load_config(config_path, overrides)
    frame, aborted = run_sweep(config, spec)
    write_sweep(frame, out_path)
    logger.info(f"{len(spec.runs())} runs, {len(frame)} rows -> {out_path}")
    if aborted:
        logger.error(f"{aborted} run(s) aborted")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_verify(corrupt_merge_weights: bool = False) -> int:
    table = run_checks(corrupt_merge_weights=corrupt_merge_weights)
    print(table.to_string(index=False))
    failed = table.loc[~table["passed"], "check"].tolist()
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="run_msd")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate")
    gen.add_argument("--config", type=str, required=True)
    gen.add_argument("--override", type=str, action="append", default=[], help="dotted.key=value")

    sweep = sub.add_parser("sweep")
    sweep.add_argument("--config", type=str, required=True)
    sweep.add_argument("--param", type=str, default="omega", choices=["omega", "tau_fraction"])
    sweep.add_argument("--values", type=float, nargs="+", required=True)
    sweep.add_argument("--seeds", type=int, nargs="+", default=[0])
    sweep.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    sweep.add_argument("--out", type=str, default="outputs/sweep.csv")
    sweep.add_argument("--override", type=str, action="append", default=[], help="dotted.key=value")

    verify = sub.add_parser("verify")
    verify.add_argument("--corrupt_merge_weights", action="store_true", help="negative control for merge_argmin")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(args.config, args.override)
        if args.command == "sweep":
            try:
                spec = SweepSpec(param=args.param, values=args.values, seeds=args.seeds, workers=args.workers)
            except ValidationError as e:
                raise ConfigError(f"invalid sweep arguments: {e}", key="--values") from e
            return cmd_sweep(args.config, spec, args.out, args.override)
        return cmd_verify(args.corrupt_merge_weights)
    except ConfigError as e:
        logger.error(f"config error: {e}")
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        logger.error(f"numerical abort at level {e.level}, t={e.timestep}: {e}")
        print(f"numerical abort at level {e.level}, t={e.timestep}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (MSDError, OSError) as e:
        logger.error(f"{e.__class__.__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

"""
IRPS CLI

Batch command-line front end:
- render: synthesize a dataset from a scene preset or key = value file
- calibrate: estimate lights from a calibration-sphere dataset
- solve: estimate normals (woodham | robust | nayar | irnet) with live progress
- eval: mean angular error between two normal maps

Exit codes: 0 ok, 2 usage/config, 3 calibration failure, 4 solver failure.
"""

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from dotenv import load_dotenv
from rich.console import Console, Group
from rich.live import Live
from rich.logging import RichHandler
from rich.text import Text

from .context import FIT_PRESETS, SCENE_PRESETS, RunContext, load_config
from .core import NormalMap, mean_angular_error
from .errors import CalibrationError, ConfigError, DatasetError, IrpsError, SolverError
from .forwardsim import SceneSpec
from .io import read_float_map, read_mask
from .pipeline import CalibrateJob, Pipeline, RenderJob, SolveJob
from .solvers import SOLVERS, FitConfig, SolveOptions
from .stream import (
    DisplayLimits,
    ResultFormatter,
    StageStatus,
    STATUS_STYLES,
    format_seconds,
    get_status_symbol,
    truncate,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3
EXIT_SOLVER = 4

# Diagnostics go to stderr; stdout carries only command results (eval's MAE)
console = Console(
    stderr=True,
    legacy_windows=(sys.platform == 'win32'),
    no_color=os.getenv('NO_COLOR') is not None,
)

formatter = ResultFormatter()


def setup_logging(verbose: int) -> None:
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=verbose > 1)],
        force=True,
    )


def exit_code_for(exc: BaseException, command: str) -> int:
    """Map a failure to the documented exit code"""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, CalibrationError):
        return EXIT_CALIBRATION
    if isinstance(exc, DatasetError) and command != "solve":
        return EXIT_CONFIG
    if isinstance(exc, IrpsError):
        return EXIT_SOLVER
    return EXIT_CONFIG


# === Streaming state ===

class StreamState:
    """Streaming state container"""

    def __init__(self):
        self.stages: dict[str, dict] = {}
        self.progress: Optional[dict] = None
        self.events: list[str] = []
        self.warnings: list[str] = []
        self.results: list[tuple[str, str]] = []
        self.summary: dict = {}
        self.error: Optional[dict] = None

    def handle_event(self, event: dict) -> str:
        """Handle a single streaming event"""
        event_type = event.get("type")

        if event_type == "stage":
            self.stages[event["name"]] = {"detail": event.get("detail", ""), "status": StageStatus.RUNNING}
            self.progress = None

        elif event_type == "stage_done":
            stage = self.stages.setdefault(event["name"], {"detail": ""})
            stage["status"] = StageStatus.SUCCESS if event.get("success", True) else StageStatus.ERROR
            stage["seconds"] = event.get("seconds")

        elif event_type == "progress":
            self.progress = event

        elif event_type == "event":
            self.events.append(f"iteration {event['iteration']}: {event['kind']} {event.get('detail', '')}".strip())
            self.events = self.events[-DisplayLimits.EVENTS_SHOWN:]

        elif event_type == "warning":
            self.warnings.append(event.get("message", ""))

        elif event_type == "result":
            self.results.append((event.get("name", ""), event.get("path", "")))

        elif event_type == "done":
            self.summary = event.get("summary", {})

        elif event_type == "error":
            self.error = event
            stage = self.stages.get(event.get("stage", ""))
            if stage is not None:
                stage["status"] = StageStatus.ERROR

        return event_type


def _progress_line(progress: dict) -> Text:
    step, total = progress.get("step"), progress.get("total")
    head = f"{progress.get('stage', '')} {step}" + (f"/{total}" if total else "")
    metrics = "  ".join(
        f"{k}={v:.4g}" for k, v in progress.get("metrics", {}).items() if k not in ("lr",)
    )
    return Text(f"  {head}  {metrics}", style="cyan")


def create_streaming_display(state: StreamState) -> Group:
    """Live view: stage list, current progress, recent schedule events"""
    elements = []
    for name, stage in state.stages.items():
        status = stage.get("status", StageStatus.PENDING)
        line = Text()
        line.append(f"{get_status_symbol(status)} ", style=STATUS_STYLES[status])
        line.append(name, style="bold")
        if stage.get("detail"):
            line.append(f"  {stage['detail']}", style="dim")
        if stage.get("seconds") is not None:
            line.append(f"  {format_seconds(stage['seconds'])}", style="dim")
        elements.append(line)
    if state.progress is not None:
        elements.append(_progress_line(state.progress))
    for text in state.events:
        elements.append(Text(f"  {text}", style="dim"))
    return Group(*elements)


def display_final_results(state: StreamState, pipeline: Pipeline) -> None:
    """Print stage timings, fit summary and artifacts after the live view closes"""
    console.print(formatter.stage_table(pipeline.stages.get_all()))
    loss_table = formatter.loss_table(pipeline.losses.summary())
    if loss_table is not None:
        console.print(loss_table)
    for message in state.warnings:
        console.print(f"[yellow]warning:[/yellow] {truncate(message, DisplayLimits.MESSAGE)}")
    artifacts = formatter.artifact_table(state.results)
    if artifacts is not None:
        console.print(artifacts)
    if state.error is not None:
        for elem in formatter.format(state.error.get("stage") or "error", state.error["message"]).elements:
            console.print(elem)
    elif "mae" in state.summary:
        console.print(f"[green]MAE vs ground truth: {state.summary['mae']:.2f}°[/green]")


def run_job(job, context: RunContext, command: str) -> int:
    """Stream one pipeline job through the live display; returns the exit code"""
    pipeline = Pipeline(context)
    state = StreamState()
    with Live(console=console, refresh_per_second=8, transient=True) as live:
        for event in pipeline.stream_events(job):
            event_type = state.handle_event(event)
            if event_type == "progress" and event.get("total"):
                if event["step"] % DisplayLimits.PROGRESS_EVERY != 0 and event["step"] != event["total"]:
                    continue
            live.update(create_streaming_display(state))
    display_final_results(state, pipeline)
    if state.error is not None:
        return exit_code_for(state.error["exception"], command)
    return EXIT_OK


# === Commands ===

def _parse_sphere(text: str) -> tuple[float, float, float]:
    try:
        cx, cy, r = (float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--sphere expects cx,cy,r, got {text!r}")
    if r <= 0:
        raise ConfigError(f"sphere radius must be positive, got {r}")
    return cx, cy, r


def cmd_render(args, context: RunContext) -> int:
    spec = load_config(SceneSpec, args.scene, SCENE_PRESETS)
    overrides = {}
    if args.noise is not None:
        overrides["noise"] = args.noise
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        try:
            spec = dataclasses.replace(spec, **overrides)
        except ValueError as e:
            raise ConfigError(str(e))
    return run_job(RenderJob(spec, Path(args.out), args.format), context, "render")


def cmd_calibrate(args, context: RunContext) -> int:
    job = CalibrateJob(Path(args.images), _parse_sphere(args.sphere), Path(args.out), args.albedo)
    return run_job(job, context, "calibrate")


def cmd_solve(args, context: RunContext) -> int:
    cfg = load_config(FitConfig, args.config, FIT_PRESETS)
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.no_interreflection:
        overrides["interreflection"] = False
    if overrides:
        try:
            cfg = dataclasses.replace(cfg, **overrides)
        except ValueError as e:
            raise ConfigError(str(e))
    options = SolveOptions(nayar_iters=args.nayar_iters, factor=cfg.factor, init=args.init, fit=cfg)
    return run_job(SolveJob(Path(args.images), args.method, Path(args.out), options), context, "solve")


def cmd_eval(args, context: RunContext) -> int:
    try:
        est = read_float_map(context.resolve(args.est)).astype(np.float64)
        gt = read_float_map(context.resolve(args.gt)).astype(np.float64)
        mask = read_mask(context.resolve(args.mask))
    except (DatasetError, OSError) as e:
        console.print(f"[red][FAILED] {e}[/red]")
        return EXIT_CONFIG
    if est.shape != gt.shape or est.shape[:2] != mask.shape or est.ndim != 3 or est.shape[2] != 3:
        console.print(f"[red][FAILED] shape mismatch: est {est.shape}, gt {gt.shape}, mask {mask.shape}[/red]")
        return EXIT_CONFIG
    maps = []
    for label, vectors in (("est", est), ("gt", gt)):
        try:
            maps.append(NormalMap.from_vectors(vectors, mask))
        except SolverError:
            console.print(f"[red][FAILED] {label} has zero-length normals inside the mask[/red]")
            return EXIT_CONFIG
    mae = mean_angular_error(maps[0], maps[1], mask)
    print(f"{mae:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irps",
        description="IRPS - interreflection-aware photometric stereo",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Render the concave bowl preset
  %(prog)s render --scene bowl --out data/bowl

  # Estimate lights from a calibration sphere
  %(prog)s calibrate --images data/sphere --sphere 63.5,63.5,57.6 --out data/sphere

  # Solve with the inverse-rendering network
  %(prog)s solve --images data/bowl --method irnet --out out/bowl

  # Score an estimate
  %(prog)s eval --est out/bowl/normal_est.fmap --gt data/bowl/normal_gt.fmap --mask data/bowl/mask.png
""",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More log output (-vv for debug)")
    parser.add_argument("--cwd", type=str, help="Set working directory")
    sub = parser.add_subparsers(dest="command", required=True)

    render = sub.add_parser("render", help="Render a synthetic dataset")
    render.add_argument("--scene", default="sphere", help=f"Preset ({', '.join(SCENE_PRESETS) or 'none'}) or key = value file")
    render.add_argument("--out", required=True, help="Dataset directory to write")
    render.add_argument("--noise", type=float, help="Gaussian noise sigma (overrides the scene)")
    render.add_argument("--seed", type=int, help="RNG seed (overrides the scene)")
    render.add_argument("--format", choices=("fmap", "png16"), default="fmap", help="Image file format")

    calibrate = sub.add_parser("calibrate", help="Estimate lights from a calibration sphere")
    calibrate.add_argument("--images", required=True, help="Sphere dataset directory")
    calibrate.add_argument("--sphere", required=True, help="Sphere centre and radius in pixels: cx,cy,r")
    calibrate.add_argument("--out", required=True, help="Directory for the light files")
    calibrate.add_argument("--albedo", type=float, default=1.0, help="Sphere albedo (intensity reference)")

    solve = sub.add_parser("solve", help="Estimate surface normals")
    solve.add_argument("--images", required=True, help="Dataset directory")
    solve.add_argument("--method", choices=tuple(SOLVERS), default="irnet")
    solve.add_argument("--out", required=True, help="Directory for the result maps")
    solve.add_argument("--config", help=f"Fit preset ({', '.join(FIT_PRESETS) or 'none'}) or key = value file")
    solve.add_argument("--init", choices=("robust", "woodham"), default="robust", help="Initial normals for irnet")
    solve.add_argument("--iterations", type=int, help="Fit iterations (overrides the config)")
    solve.add_argument("--no-interreflection", action="store_true",
                       help="Fit without the interreflection transfer (irnet)")
    solve.add_argument("--nayar-iters", type=int, default=15, help="Rounds of Nayar's iteration")

    evaluate = sub.add_parser("eval", help="Mean angular error of an estimate")
    evaluate.add_argument("--est", required=True, help="Estimated normals (.fmap)")
    evaluate.add_argument("--gt", required=True, help="Ground-truth normals (.fmap)")
    evaluate.add_argument("--mask", required=True, help="Evaluation mask (.png)")
    return parser


COMMANDS = {
    "render": cmd_render,
    "calibrate": cmd_calibrate,
    "solve": cmd_solve,
    "eval": cmd_eval,
}


def main(argv: Optional[list[str]] = None) -> int:
    """CLI main entry point"""
    load_dotenv(override=True)
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    if args.cwd:
        os.chdir(args.cwd)

    try:
        context = RunContext()
        code = COMMANDS[args.command](args, context)
    except IrpsError as e:
        console.print(f"[red][FAILED] {e}[/red]")
        code = exit_code_for(e, args.command)
    return code


if __name__ == "__main__":
    sys.exit(main())

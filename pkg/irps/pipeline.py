"""
IRPS Pipeline

Runs the render / calibrate / solve jobs as a stream of event dicts, so the
CLI can show live progress. Failures are reported as an `error` event that
carries the exception; the stream always ends with `done` or `error`.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .context import RunContext
from .core import mean_angular_error
from .errors import DatasetError, IrpsError, SolverError
from .forwardsim import SceneSpec, simulate
from .io import (
    DatasetDescriptor,
    read_dataset,
    write_dataset,
    write_fit_events,
    write_float_map,
    write_lights,
    write_loss_trace,
    write_normal_png,
)
from .observability import setup_mlflow_tracking, track_fit
from .solvers import SOLVERS, FitEvent, LossRecord, SolveOptions, calibrate_from_sphere
from .stream import FAILURE_PREFIX, SUCCESS_PREFIX, LossTracker, StageTracker, StreamEventEmitter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RenderJob:
    spec: SceneSpec
    out: Path
    image_format: str = "fmap"


@dataclass(frozen=True)
class CalibrateJob:
    images: Path
    sphere: tuple[float, float, float]
    out: Path
    albedo: float = 1.0


@dataclass(frozen=True)
class SolveJob:
    images: Path
    method: str
    out: Path
    options: SolveOptions = field(default_factory=SolveOptions)


class Pipeline:
    """
    Job runner producing StreamEvent dicts

    Usage example:
        pipeline = Pipeline(RunContext())
        for event in pipeline.stream_events(SolveJob(Path("data"), "woodham", Path("out"))):
            print(event["type"])
    """

    def __init__(self, context: Optional[RunContext] = None):
        self.context = context or RunContext()
        self.stages = StageTracker()
        self.losses = LossTracker()

    def stream_events(self, job) -> Iterator[dict]:
        """Run one job, yielding event dicts"""
        emitter = StreamEventEmitter()
        self.stages.clear()
        self.losses.reset()
        runners = {
            RenderJob: self._render,
            CalibrateJob: self._calibrate,
            SolveJob: self._solve,
        }
        runner = runners.get(type(job))
        if runner is None:
            raise TypeError(f"unknown job type {type(job).__name__}")

        summary: dict = {}
        current = ""
        try:
            with self.context.thread_limits():
                for ev in runner(job, emitter, summary):
                    if ev.type == "stage":
                        current = ev.data["name"]
                    yield ev.data
        except Exception as e:
            # numpy / scipy / cv2 failures surface as solver errors of the running stage
            err = e if isinstance(e, IrpsError) else SolverError(f"{type(e).__name__}: {e}", stage=current or None)
            stage = getattr(err, "stage", None) or current
            if current and self.stages.get(current) is not None:
                self.stages.finish(current, success=False)
            logger.debug("job failed in %s", stage, exc_info=True)
            data = emitter.error(f"{FAILURE_PREFIX} {err}", stage).data
            data["exception"] = err
            yield data
            return
        yield emitter.done(summary).data

    # === Stage helpers ===

    def _begin(self, emitter: StreamEventEmitter, name: str, detail: str = ""):
        self.stages.start(name, detail)
        return emitter.stage(name, detail)

    def _end(self, emitter: StreamEventEmitter, name: str):
        info = self.stages.finish(name)
        return emitter.stage_done(name, info.seconds)

    # === Jobs ===

    def _render(self, job: RenderJob, emitter: StreamEventEmitter, summary: dict):
        yield self._begin(emitter, "render", f"{job.spec.primitive} {job.spec.resolution}px")
        stack, lights, scene = simulate(job.spec)
        yield self._end(emitter, "render")

        yield self._begin(emitter, "write", str(job.out))
        out = self.context.resolve(job.out)
        desc = write_dataset(out, stack, lights, scene.normals, image_format=job.image_format)
        yield self._end(emitter, "write")
        yield emitter.result("dataset", str(out), f"{SUCCESS_PREFIX} {len(desc.images)} images")
        summary.update(images=len(desc.images), out=str(out))

    def _calibrate(self, job: CalibrateJob, emitter: StreamEventEmitter, summary: dict):
        yield self._begin(emitter, "read", str(job.images))
        stack, _, _ = read_dataset(DatasetDescriptor.discover(self.context.resolve(job.images)))
        yield self._end(emitter, "read")

        cx, cy, r = job.sphere
        yield self._begin(emitter, "calibrate", f"sphere ({cx:g}, {cy:g}) r={r:g}")
        lights = calibrate_from_sphere(stack, (cx, cy), r, albedo=job.albedo)
        yield self._end(emitter, "calibrate")

        out = self.context.resolve(job.out)
        out.mkdir(parents=True, exist_ok=True)
        for path in write_lights(out, lights):
            yield emitter.result(path.name, str(path))
        summary.update(lights=lights.n, out=str(out))

    def _solve(self, job: SolveJob, emitter: StreamEventEmitter, summary: dict):
        solver = SOLVERS.get(job.method)
        if solver is None:
            raise SolverError(f"unknown method {job.method!r} (choose from {', '.join(SOLVERS)})", stage="solve")

        yield self._begin(emitter, "read", str(job.images))
        images = self.context.resolve(job.images)
        stack, lights, gt = read_dataset(DatasetDescriptor.discover(images))
        if lights is None:
            raise DatasetError(f"no light_directions.txt in {images}; run `irps calibrate` first")
        yield self._end(emitter, "read")

        options = job.options
        if gt is not None and options.normals_gt is None:
            options = dataclasses.replace(options, normals_gt=gt)

        total = options.fit.iterations if job.method == "irnet" else None
        yield self._begin(emitter, job.method, f"{stack.n} images, {stack.m} pixels")
        gen = solver(stack, lights, options)
        while True:
            try:
                item = next(gen)
            except StopIteration as stop:
                outcome = stop.value
                break
            if isinstance(item, LossRecord):
                self.losses.update(item)
                metrics = {"L_rec": item.rec, "L_weak": item.weak, "lambda_w": item.lambda_w, "lr": item.lr}
                if item.mae is not None:
                    metrics["mae"] = item.mae
                yield emitter.progress(job.method, item.iteration, total, metrics)
            elif isinstance(item, FitEvent):
                yield emitter.event(item.kind, item.iteration, item.detail)
            else:
                name, step, value = item
                yield emitter.progress(name, step, None, {"value": float(value)})
        yield self._end(emitter, job.method)

        yield self._begin(emitter, "write", str(job.out))
        out = self.context.resolve(job.out)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        write_float_map(out / "normal_est.fmap", outcome.normals.normals)
        written.append(out / "normal_est.fmap")
        write_normal_png(out / "normal_est.png", outcome.normals)
        written.append(out / "normal_est.png")
        if outcome.depth is not None:
            write_float_map(out / "depth.fmap", np.where(outcome.depth.mask, outcome.depth.depth, 0.0))
            written.append(out / "depth.fmap")
        if outcome.fit is not None:
            for i, psi in enumerate(outcome.fit.reflectance):
                path = out / f"reflectance_{i + 1:03d}.fmap"
                write_float_map(path, psi)
                written.append(path)
            write_loss_trace(out / "loss_trace.csv", outcome.fit.trace)
            written.append(out / "loss_trace.csv")
            write_fit_events(out / "events.csv", outcome.fit.events)
            written.append(out / "events.csv")
        yield self._end(emitter, "write")
        for path in written:
            yield emitter.result(path.name, str(path))

        if outcome.fit is not None and setup_mlflow_tracking():
            track_fit(options.fit, outcome.fit.trace, images.name)

        summary.update(method=job.method, out=str(out), artifacts=len(written))
        if gt is not None:
            summary["mae"] = mean_angular_error(outcome.normals, gt, stack.mask)

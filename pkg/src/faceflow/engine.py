"""Offline streaming engine: replays scenarios through the full pipeline.

For every implicit tick (one per T motion frames) the engine asks the
scheduler for the next labeled audio window, extracts layered features,
fuses and aligns them to motion rate, assembles the conditioning tuple
(rolling generated-motion history, identity, listening/speaking states,
magnitude dials), then integrates the velocity field from a fresh noise
draw to produce T motion frames.  Generated frames and their states feed
the next window's history, zero-filled with listening states at cold start.

Determinism contract: given the same scenario, checkpoint, and seed, the
emitted trace is byte-identical across runs and across producer thread
counts.  Every run uses a single torch thread, one PCG64 noise draw per
window, and a virtual clock that interleaves producer ingests and engine
ticks in a fixed merged order (events sort before a tick at the same
millisecond; ties keep file order), so wall-clock scheduling never leaks
into the output.
"""

from __future__ import annotations

import json
import math
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import AudioBuffer, extract_features
from .errors import ConfigError
from .flow import DEFAULT_SAMPLING_STEPS, euler_integrate
from .model import ConditionSet, ModelConfig
from .motion import (
    FRAME_MS,
    LISTEN,
    MOTION_DIM,
    AvatarIdentity,
    MagnitudePair,
    format_trace_rows,
)
from .scenario import Scenario
from .scheduler import FRAME_SAMPLES, StreamScheduler
from .training import FaceFlowModel

ENV_OUTPUT_DIR = "FACEFLOW_OUTPUT_DIR"

TRACE_FILENAME = "trace.csv"
WINDOW_LOG_FILENAME = "window_log.json"

# Reference throughput figures reported for the original large-scale system
# (different hardware, pretrained renderer); printed for comparison, never
# asserted against this implementation.
REFERENCE_COEF_FPS = 900.0
REFERENCE_E2E_FPS = 59.0

_MODEL_CONFIG_KEYS = (
    "window", "history_len", "group_spans", "tokens_per_group", "model_dim",
    "blocks", "heads", "mlp_ratio", "locality_radius", "rope_base",
)


@dataclass(frozen=True)
class EngineConfig:
    """Inference-time knobs: architecture, checkpoint, sampling, guidance."""

    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint: str | None = None
    steps: int = DEFAULT_SAMPLING_STEPS
    magnitude_rot: float = 0.3
    magnitude_trans: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampling steps must be >= 1")
        for name in ("magnitude_rot", "magnitude_trans"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")

    @property
    def magnitude(self) -> MagnitudePair:
        return MagnitudePair(self.magnitude_rot, self.magnitude_trans)


def load_model_config(path) -> ModelConfig:
    """Read a ModelConfig from a JSON file of keyword overrides."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read model config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: model config must be a JSON object")
    unknown = set(doc) - set(_MODEL_CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown model config keys {sorted(unknown)}")
    if "group_spans" in doc:
        doc["group_spans"] = tuple(doc["group_spans"])
    try:
        return ModelConfig(**doc)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def build_model(config: EngineConfig) -> FaceFlowModel:
    """Instantiate the model and load the configured checkpoint, if any."""
    from .checkpoint import load_checkpoint

    model = FaceFlowModel(config.model, seed=config.seed)
    if config.checkpoint is not None:
        load_checkpoint(model, config.checkpoint)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# virtual clock


@dataclass(frozen=True)
class PlanStep:
    """One slot in the merged replay order: an ingest or an engine tick."""

    time_ms: int
    kind: str          # "ingest" | "tick"
    event_index: int   # scenario event position, -1 for ticks
    window_index: int  # emitted window position, -1 for ingests


def plan_schedule(scenario: Scenario, window_frames: int) -> list:
    """Merge scenario events and implicit ticks into one deterministic order.

    Ticks land every T frames (window k at (k+1)*T*40 ms); an event due at
    the same millisecond as a tick is ingested first.  Without an explicit
    duration the plan covers every event and then keeps ticking until the
    speaking queue would drain.
    """
    window_ms = window_frames * FRAME_MS
    if scenario.duration_ms is not None:
        ticks = max(1, math.ceil(scenario.duration_ms / window_ms))
    else:
        ticks = max(1, math.ceil(scenario.horizon_ms / window_ms))

    def merged(num_ticks):
        steps = [PlanStep(ev.at_ms, "ingest", i, -1) for i, ev in enumerate(scenario.events)]
        steps.extend(PlanStep((k + 1) * window_ms, "tick", -1, k) for k in range(num_ticks))
        steps.sort(key=lambda s: (s.time_ms, s.kind != "ingest",
                                  s.event_index if s.kind == "ingest" else s.window_index))
        return steps

    if scenario.duration_ms is None:
        # frame-count replay of the plan to size the drain tail
        appended = consumed = 0
        for step in merged(ticks):
            if step.kind == "ingest":
                ev = scenario.events[step.event_index]
                if ev.source == "llm":
                    appended += ev.samples.size
            else:
                u = (appended - consumed * FRAME_SAMPLES) // FRAME_SAMPLES
                consumed += min(window_frames, u)
        leftover = (appended - consumed * FRAME_SAMPLES) // FRAME_SAMPLES
        ticks += math.ceil(leftover / window_frames)
    return merged(ticks)


class _TurnGate:
    """Serializes plan steps across threads: step i runs when the count hits i."""

    def __init__(self):
        self._turn = 0
        self._cv = threading.Condition()

    def wait_for(self, turn: int):
        with self._cv:
            self._cv.wait_for(lambda: self._turn >= turn)

    def advance(self):
        with self._cv:
            self._turn += 1
            self._cv.notify_all()


# ---------------------------------------------------------------------------
# the engine


@dataclass
class EngineResult:
    """Everything one replay produced, before serialization."""

    coeffs: np.ndarray   # (windows*T, 115)
    states: np.ndarray   # (windows*T,) of +/-1
    window_log: list     # one dict per window (RLE states, frames consumed)
    sample_seconds: float
    render_seconds: float = 0.0

    @property
    def trace_text(self) -> str:
        return format_trace_rows(self.coeffs, self.states)

    @property
    def frames(self) -> int:
        return self.coeffs.shape[0]


class StreamingEngine:
    """Drives scheduler -> frontend -> sampler and maintains motion history."""

    def __init__(self, model: FaceFlowModel, config: EngineConfig,
                 identity: AvatarIdentity | None = None):
        self.model = model
        self.config = config
        self.identity = AvatarIdentity.neutral() if identity is None else identity
        cfg = model.config
        self.scheduler = StreamScheduler(capacity_frames=max(cfg.window, 200))
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        self.history_coeffs = np.zeros((cfg.history_len, MOTION_DIM))
        self.history_states = np.full(cfg.history_len, LISTEN, dtype=np.int8)

    def ingest(self, source: str, samples: np.ndarray):
        self.scheduler.ingest(source, samples)

    def step_window(self):
        """Emit one scheduled window and generate its motion frames."""
        cfg = self.model.config
        window = self.scheduler.next_window(cfg.window)
        layers = extract_features(AudioBuffer(window.samples)).layers
        with torch.no_grad():
            local, glob = self.model.fusion(torch.as_tensor(layers))
        cond = ConditionSet(
            audio_tokens=local,
            audio_tokens_global=glob,
            identity=self.identity,
            history_coeffs=self.history_coeffs,
            history_states=self.history_states,
            current_states=window.states,
            magnitude=self.config.magnitude,
        )
        x0 = self.rng.standard_normal((cfg.window, MOTION_DIM))
        coeffs = euler_integrate(
            lambda x, t, _c: self.model.field.predict_velocity(x, cond, t=t),
            x0, steps=self.config.steps,
        )
        joined = np.concatenate([self.history_coeffs, coeffs])
        self.history_coeffs = joined[-cfg.history_len:]
        joined_states = np.concatenate([self.history_states, window.states])
        self.history_states = joined_states[-cfg.history_len:].astype(np.int8)
        return window, coeffs


def run_scenario(scenario: Scenario, model: FaceFlowModel, config: EngineConfig,
                 identity: AvatarIdentity | None = None,
                 producer_threads: int = 0) -> EngineResult:
    """Replay a scenario deterministically; see the module docstring.

    ``producer_threads`` > 0 moves ingests onto that many worker threads
    (round-robin over events) serialized by the virtual clock; the output
    is identical to the inline replay.
    """
    torch.set_num_threads(1)
    engine = StreamingEngine(model, config, identity)
    steps = plan_schedule(scenario, model.config.window)

    coeffs_parts, states_parts, log = [], [], []
    sample_seconds = 0.0

    def run_tick(step):
        nonlocal sample_seconds
        t0 = time.perf_counter()
        window, coeffs = engine.step_window()
        sample_seconds += time.perf_counter() - t0
        coeffs_parts.append(coeffs)
        states_parts.append(window.states)
        log.append(window.log_entry())

    if producer_threads <= 0:
        for step in steps:
            if step.kind == "ingest":
                ev = scenario.events[step.event_index]
                engine.ingest(ev.source, ev.samples)
            else:
                run_tick(step)
    else:
        gate = _TurnGate()
        ingest_steps = [(i, s) for i, s in enumerate(steps) if s.kind == "ingest"]
        assignments = [[] for _ in range(producer_threads)]
        for j, (i, s) in enumerate(ingest_steps):
            assignments[j % producer_threads].append((i, s))

        def producer(work):
            for i, s in work:
                gate.wait_for(i)
                ev = scenario.events[s.event_index]
                engine.ingest(ev.source, ev.samples)
                gate.advance()

        workers = [threading.Thread(target=producer, args=(w,)) for w in assignments]
        for w in workers:
            w.start()
        try:
            for i, step in enumerate(steps):
                if step.kind == "tick":
                    gate.wait_for(i)
                    run_tick(step)
                    gate.advance()
        finally:
            for w in workers:
                w.join()

    return EngineResult(
        coeffs=np.concatenate(coeffs_parts),
        states=np.concatenate(states_parts).astype(np.int8),
        window_log=log,
        sample_seconds=sample_seconds,
    )


def default_output_dir() -> str:
    return os.environ.get(ENV_OUTPUT_DIR, os.getcwd())


def write_outputs(result: EngineResult, output_dir) -> tuple:
    """Write trace.csv and window_log.json; returns their paths."""
    os.makedirs(output_dir, exist_ok=True)
    trace_path = os.path.join(output_dir, TRACE_FILENAME)
    log_path = os.path.join(output_dir, WINDOW_LOG_FILENAME)
    with open(trace_path, "w") as f:
        f.write(result.trace_text)
    with open(log_path, "w") as f:
        json.dump(result.window_log, f, indent=2, sort_keys=True)
        f.write("\n")
    return trace_path, log_path


# ---------------------------------------------------------------------------
# throughput benchmark


@dataclass(frozen=True)
class BenchReport:
    """Measured throughput of the coefficient path and the rendered path."""

    windows: int
    frames: int
    steps: int
    coef_seconds: float
    render_seconds: float

    @property
    def coef_fps(self) -> float:
        return self.frames / self.coef_seconds

    @property
    def seconds_per_window(self) -> float:
        return self.coef_seconds / self.windows

    @property
    def e2e_fps(self) -> float:
        return self.frames / (self.coef_seconds + self.render_seconds)


def run_bench(config: EngineConfig, windows: int = 3) -> BenchReport:
    """Time pure-speaking windows through the sampler, then the renderer.

    The coefficient path covers scheduler, frontend, fusion, and Euler
    sampling; the end-to-end rate adds rendering every generated frame.
    """
    from .scenario import ScenarioEvent, synth_samples

    if windows < 1:
        raise ConfigError("bench needs at least one window")
    t_frames = config.model.window
    dur_ms = windows * t_frames * FRAME_MS
    tone = synth_samples("tone", dur_ms, freq_hz=220.0)
    scenario = Scenario(
        events=(ScenarioEvent(at_ms=0, source="llm", samples=tone),),
        duration_ms=dur_ms,
    )
    model = build_model(config)
    result = run_scenario(scenario, model, config)
    t0 = time.perf_counter()
    with torch.no_grad():
        model.renderer(torch.as_tensor(result.coeffs))
    render_seconds = time.perf_counter() - t0
    return BenchReport(
        windows=len(result.window_log),
        frames=result.frames,
        steps=config.steps,
        coef_seconds=result.sample_seconds,
        render_seconds=render_seconds,
    )


def format_bench(report: BenchReport) -> str:
    lines = [
        f"windows: {report.windows}",
        f"frames: {report.frames}",
        f"sampling steps: {report.steps}",
        f"coefficient seconds/window: {report.seconds_per_window:.3f}",
        f"coefficient fps: {report.coef_fps:.1f} (reference system: {REFERENCE_COEF_FPS:.0f})",
        f"end-to-end fps: {report.e2e_fps:.1f} (reference system: {REFERENCE_E2E_FPS:.0f})",
    ]
    return "\n".join(lines) + "\n"

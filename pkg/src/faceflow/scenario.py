"""Conversation scenario files: timed mic/llm audio events for offline replay.

A scenario is a JSON document describing when each producer delivers audio:

    {
      "duration_ms": 4000,            // optional; derived from events if absent
      "events": [
        {"at_ms": 0,    "source": "mic", "audio": {"synth": "noise", "dur_ms": 1000}},
        {"at_ms": 1000, "source": "llm", "audio": {"synth": "tone", "dur_ms": 2000,
                                                   "freq_hz": 220.0}},
        {"at_ms": 1500, "source": "mic", "audio": "path/to/clip.ffau"}
      ]
    }

Each event delivers its entire buffer at the instant ``at_ms``; audio is
either a waveform file path (resolved against the scenario's directory) or a
synthesized segment (``tone``, ``noise``, or ``silence``).  Noise draws from
a PCG64 generator seeded by the event's optional ``seed`` field (default: the
event index), so replays are bit-identical.  Events must be ordered by
``at_ms``.  Parse and validation failures raise ScenarioError carrying the
offending line or event index.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .audio import SAMPLE_RATE, read_waveform
from .errors import ScenarioError

SYNTH_TONE = "tone"
SYNTH_NOISE = "noise"
SYNTH_SILENCE = "silence"
SYNTH_KINDS = (SYNTH_TONE, SYNTH_NOISE, SYNTH_SILENCE)

TONE_AMPLITUDE = 0.5
NOISE_AMPLITUDE = 0.3

_EVENT_KEYS = {"at_ms", "source", "audio", "seed"}
_SYNTH_KEYS = {"synth", "dur_ms", "freq_hz"}
_TOP_KEYS = {"events", "duration_ms"}


@dataclass(frozen=True)
class ScenarioEvent:
    """One timed delivery of audio from a single producer."""

    at_ms: int
    source: str
    samples: np.ndarray

    @property
    def dur_ms(self) -> int:
        return math.ceil(self.samples.size * 1000 / SAMPLE_RATE)

    @property
    def end_ms(self) -> int:
        return self.at_ms + self.dur_ms


@dataclass(frozen=True)
class Scenario:
    """Ordered event list plus an optional fixed run length."""

    events: tuple
    duration_ms: int | None = None

    def __post_init__(self):
        last = -1
        for i, ev in enumerate(self.events):
            if ev.at_ms < last:
                raise ScenarioError("events must be ordered by at_ms", event=i)
            last = ev.at_ms
        if self.duration_ms is not None and self.duration_ms <= 0:
            raise ScenarioError("duration_ms must be positive")

    @property
    def horizon_ms(self) -> int:
        """Time by which all event audio has been delivered."""
        return max((ev.end_ms for ev in self.events), default=0)


def synth_samples(kind: str, dur_ms: int, freq_hz: float | None = None,
                  seed: int = 0) -> np.ndarray:
    """Generate a synthetic 16 kHz segment; noise is seeded for replay."""
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synth kind {kind!r}")
    if dur_ms <= 0:
        raise ValueError("dur_ms must be positive")
    n = dur_ms * SAMPLE_RATE // 1000
    if kind == SYNTH_SILENCE:
        return np.zeros(n)
    if kind == SYNTH_NOISE:
        rng = np.random.Generator(np.random.PCG64(seed))
        return np.clip(NOISE_AMPLITUDE * rng.standard_normal(n), -1.0, 1.0)
    if freq_hz is None or freq_hz <= 0:
        raise ValueError("tone requires a positive freq_hz")
    t = np.arange(n) / SAMPLE_RATE
    return TONE_AMPLITUDE * np.sin(2.0 * math.pi * freq_hz * t)


def _require_int(value, name: str, index: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(f"{name} must be an integer", event=index)
    return value


def _event_from_json(obj, index: int, base_dir: str) -> ScenarioEvent:
    if not isinstance(obj, dict):
        raise ScenarioError("event must be an object", event=index)
    unknown = set(obj) - _EVENT_KEYS
    if unknown:
        raise ScenarioError(f"unknown event keys {sorted(unknown)}", event=index)
    for key in ("at_ms", "source", "audio"):
        if key not in obj:
            raise ScenarioError(f"event is missing {key!r}", event=index)
    at_ms = _require_int(obj["at_ms"], "at_ms", index)
    if at_ms < 0:
        raise ScenarioError("at_ms must be nonnegative", event=index)
    source = obj["source"]
    if source not in ("mic", "llm"):
        raise ScenarioError(f"source must be 'mic' or 'llm', got {source!r}", event=index)

    audio = obj["audio"]
    if isinstance(audio, str):
        path = audio if os.path.isabs(audio) else os.path.join(base_dir, audio)
        try:
            samples = read_waveform(path).samples
        except (OSError, ValueError) as exc:
            raise ScenarioError(f"cannot read audio file {audio!r}: {exc}", event=index) from exc
    elif isinstance(audio, dict):
        unknown = set(audio) - _SYNTH_KEYS
        if unknown:
            raise ScenarioError(f"unknown synth keys {sorted(unknown)}", event=index)
        kind = audio.get("synth")
        if kind not in SYNTH_KINDS:
            raise ScenarioError(f"synth must be one of {SYNTH_KINDS}, got {kind!r}", event=index)
        if "dur_ms" not in audio:
            raise ScenarioError("synth audio is missing dur_ms", event=index)
        dur_ms = _require_int(audio["dur_ms"], "dur_ms", index)
        freq = audio.get("freq_hz")
        if kind != SYNTH_TONE and freq is not None:
            raise ScenarioError("freq_hz only applies to tone", event=index)
        if kind == SYNTH_TONE and (not isinstance(freq, (int, float)) or isinstance(freq, bool)):
            raise ScenarioError("tone requires a numeric freq_hz", event=index)
        seed = _require_int(obj.get("seed", index), "seed", index)
        try:
            samples = synth_samples(kind, dur_ms, None if freq is None else float(freq), seed)
        except ValueError as exc:
            raise ScenarioError(str(exc), event=index) from exc
    else:
        raise ScenarioError("audio must be a file path or a synth object", event=index)
    if samples.size == 0:
        raise ScenarioError("event carries no audio", event=index)
    return ScenarioEvent(at_ms=at_ms, source=source, samples=samples)


def parse_scenario(text: str, base_dir: str = ".") -> Scenario:
    """Parse a scenario JSON document; errors carry line or event positions."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ScenarioError(f"unknown scenario keys {sorted(unknown)}")
    raw_events = doc.get("events")
    if not isinstance(raw_events, list):
        raise ScenarioError("scenario must contain an 'events' list")
    duration = doc.get("duration_ms")
    if duration is not None:
        duration = _require_int(duration, "duration_ms", -1)
    events = tuple(_event_from_json(ev, i, base_dir) for i, ev in enumerate(raw_events))
    if not events and duration is None:
        raise ScenarioError("scenario has no events and no duration_ms")
    return Scenario(events=events, duration_ms=duration)


def load_scenario(path) -> Scenario:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return parse_scenario(text, base_dir=os.path.dirname(os.path.abspath(path)))

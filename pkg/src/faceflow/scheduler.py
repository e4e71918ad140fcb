"""Streaming audio scheduler: merges mic and LLM audio into labeled windows.

Two producers feed the scheduler: microphone audio (the avatar is listening)
and LLM/TTS audio (the avatar is speaking).  Each call to ``next_window``
emits exactly T motion frames of 16 kHz audio (640 samples per frame) plus a
per-frame +/-1 state sequence, chosen causally:

    U = whole unconsumed speaking frames
    U >= T     -> pure speaking window, cursor advances T
    0 < U < T  -> the U remaining speaking frames plus the most recent
                  T - U listening frames; the slice matching the previous
                  window's tail mode goes first so audio stays continuous
    U == 0     -> pure listening window (rolling mic tail)

The listening side is a rolling ring buffer (oldest audio evicted, zero
filled before warm-up, read non-destructively); the speaking side is an
append-only queue with a monotonic consume cursor, so every speaking frame
is emitted exactly once.  Newly arrived mic audio never preempts queued
speech; barge-in is an explicit ``flush_speaking`` call that drops whatever
speech is still unconsumed.

``ingest`` and ``next_window`` are mutually atomic; any number of producer
threads may ingest concurrently against a single window consumer.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer
from .motion import LISTEN, SPEAK

FRAME_SAMPLES = 640  # one 25 Hz motion frame of 16 kHz audio

MODE_LISTEN = "listen"
MODE_SPEAK = "speak"

SOURCE_MIC = "mic"
SOURCE_LLM = "llm"

_STATE_OF_SOURCE = {SOURCE_MIC: LISTEN, SOURCE_LLM: SPEAK}


def label_by_source(assembly) -> np.ndarray:
    """Per-frame states from (source, samples) pairs: mic -> -1, llm -> +1."""
    states = np.empty(len(assembly), dtype=np.int8)
    for i, (source, _samples) in enumerate(assembly):
        if source not in _STATE_OF_SOURCE:
            raise ValueError(f"frame {i} carries unknown source tag {source!r}")
        states[i] = _STATE_OF_SOURCE[source]
    return states


def rle_states(states) -> list:
    """Run-length encode a +/-1 sequence as [[value, count], ...]."""
    out = []
    for s in np.asarray(states).tolist():
        if out and out[-1][0] == s:
            out[-1][1] += 1
        else:
            out.append([int(s), 1])
    return out


def expand_rle(runs) -> np.ndarray:
    return np.concatenate([np.full(count, value, dtype=np.int8) for value, count in runs]) if runs else np.empty(0, dtype=np.int8)


class ListeningQueue:
    """Fixed-capacity ring of the most recent mic samples, zero filled at start."""

    def __init__(self, capacity_frames: int):
        if capacity_frames < 1:
            raise ValueError("capacity must be at least one frame")
        self.capacity = capacity_frames * FRAME_SAMPLES
        self._buf = np.zeros(self.capacity)
        self._pos = 0  # next write index

    def append(self, samples: np.ndarray):
        n = samples.size
        if n >= self.capacity:
            self._buf[:] = samples[-self.capacity:]
            self._pos = 0
            return
        end = self._pos + n
        if end <= self.capacity:
            self._buf[self._pos:end] = samples
        else:
            first = self.capacity - self._pos
            self._buf[self._pos:] = samples[:first]
            self._buf[: end - self.capacity] = samples[first:]
        self._pos = end % self.capacity

    def tail(self, n: int) -> np.ndarray:
        """Most recent n samples, oldest first."""
        if n > self.capacity:
            raise ValueError(f"tail of {n} exceeds capacity {self.capacity}")
        start = (self._pos - n) % self.capacity
        if start + n <= self.capacity:
            return self._buf[start : start + n].copy()
        return np.concatenate([self._buf[start:], self._buf[: n - (self.capacity - start)]])


class SpeakingQueue:
    """Append-only LLM audio with a monotonic frame-granular consume cursor."""

    def __init__(self):
        self._chunks: list[np.ndarray] = []
        self._appended = 0
        self._cursor = 0  # samples consumed, never decreases
        self._head_offset = 0  # consumed samples within _chunks[0]

    @property
    def cursor(self) -> int:
        return self._cursor

    @property
    def appended(self) -> int:
        return self._appended

    @property
    def unconsumed_samples(self) -> int:
        return self._appended - self._cursor

    @property
    def unconsumed_frames(self) -> int:
        return self.unconsumed_samples // FRAME_SAMPLES

    def append(self, samples: np.ndarray):
        if samples.size:
            self._chunks.append(np.asarray(samples, dtype=np.float64))
            self._appended += samples.size

    def consume_frames(self, frames: int) -> np.ndarray:
        n = frames * FRAME_SAMPLES
        if n > self.unconsumed_samples:
            raise ValueError("cannot consume past the queue frontier")
        parts = []
        remaining = n
        while remaining:
            head = self._chunks[0]
            avail = head.size - self._head_offset
            take = min(avail, remaining)
            parts.append(head[self._head_offset : self._head_offset + take])
            remaining -= take
            self._head_offset += take
            if self._head_offset == head.size:
                self._chunks.pop(0)
                self._head_offset = 0
        self._cursor += n
        return np.concatenate(parts) if parts else np.empty(0)

    def flush(self) -> int:
        """Drop all unconsumed audio (including any partial trailing frame)."""
        dropped = self.unconsumed_samples
        self._cursor = self._appended
        self._chunks.clear()
        self._head_offset = 0
        return dropped


@dataclass
class ScheduledWindow:
    """One emitted window: T frames of audio plus per-frame states."""

    index: int
    samples: np.ndarray      # (T * 640,)
    states: np.ndarray       # (T,) of +/-1
    speak_frames: int        # speaking frames consumed by this window

    def log_entry(self) -> dict:
        return {
            "window_idx": self.index,
            "states": rle_states(self.states),
            "speak_frames_consumed": self.speak_frames,
        }


class StreamScheduler:
    """Turn-taking window scheduler over a mic ring and an LLM queue."""

    def __init__(self, capacity_frames: int = 200):
        self.listening = ListeningQueue(capacity_frames)
        self.speaking = SpeakingQueue()
        self.prev_mode = MODE_LISTEN
        self._capacity_frames = capacity_frames
        self._window_count = 0
        self._lock = threading.Lock()

    def ingest(self, source: str, audio, sample_rate: int = SAMPLE_RATE):
        """Feed audio from one producer; validates rate, amplitude, finiteness."""
        if isinstance(audio, AudioBuffer):
            buf = audio
        else:
            if sample_rate != SAMPLE_RATE:
                raise ValueError(f"audio must be {SAMPLE_RATE} Hz, got {sample_rate}")
            buf = AudioBuffer(np.asarray(audio, dtype=np.float64))
        with self._lock:
            if source == SOURCE_MIC:
                self.listening.append(buf.samples)
            elif source == SOURCE_LLM:
                self.speaking.append(buf.samples)
            else:
                raise ValueError(f"unknown source {source!r}")

    def flush_speaking(self) -> int:
        with self._lock:
            return self.speaking.flush()

    @property
    def unconsumed_speak_frames(self) -> int:
        with self._lock:
            return self.speaking.unconsumed_frames

    def next_window(self, frames: int) -> ScheduledWindow:
        """Emit the next T-frame window per the turn-taking rules above."""
        if frames <= 0:
            raise ValueError("window length must be positive")
        if frames > self._capacity_frames:
            raise ValueError(f"window of {frames} frames exceeds listening capacity")
        with self._lock:
            u = self.speaking.unconsumed_frames
            assembly = []
            if u >= frames:
                speak = self.speaking.consume_frames(frames)
                for i in range(frames):
                    assembly.append((SOURCE_LLM, speak[i * FRAME_SAMPLES : (i + 1) * FRAME_SAMPLES]))
                speak_frames = frames
                self.prev_mode = MODE_SPEAK
            elif u > 0:
                speak = self.speaking.consume_frames(u)
                listen = self.listening.tail((frames - u) * FRAME_SAMPLES)
                speak_part = [
                    (SOURCE_LLM, speak[i * FRAME_SAMPLES : (i + 1) * FRAME_SAMPLES]) for i in range(u)
                ]
                listen_part = [
                    (SOURCE_MIC, listen[i * FRAME_SAMPLES : (i + 1) * FRAME_SAMPLES])
                    for i in range(frames - u)
                ]
                if self.prev_mode == MODE_SPEAK:
                    assembly = speak_part + listen_part
                    self.prev_mode = MODE_LISTEN
                else:
                    assembly = listen_part + speak_part
                    self.prev_mode = MODE_SPEAK
                speak_frames = u
            else:
                listen = self.listening.tail(frames * FRAME_SAMPLES)
                for i in range(frames):
                    assembly.append((SOURCE_MIC, listen[i * FRAME_SAMPLES : (i + 1) * FRAME_SAMPLES]))
                speak_frames = 0
                self.prev_mode = MODE_LISTEN
            states = label_by_source(assembly)
            samples = np.concatenate([s for _, s in assembly])
            window = ScheduledWindow(self._window_count, samples, states, speak_frames)
            self._window_count += 1
            return window

"""Synthetic two-tone conversation task for end-to-end training checks.

Each conversation alternates speaking and listening segments over a shared
two-tone waveform.  Mouth motion (jaw plus the first expression channels)
tracks the tone envelopes but only while speaking; head rotation and
translation are slow sinusoids whose per-conversation scales are hidden from
the audio, so the magnitude conditioning is the only route to their size.
Listening windows carry the same kind of audio as speaking ones, which makes
the state channel, not silence, the cue for closing the mouth.

The task is small enough to train in minutes yet exercises every conditioning
path: audio tokens, state channels, history, and magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .audio import SAMPLE_RATE, extract_features
from .model import ModelConfig
from .motion import (
    EXPR,
    FRAME_RATE,
    JAW,
    LISTEN,
    MOTION_DIM,
    ROT,
    SPEAK,
    TRANS,
    NormalizationSpec,
    compute_magnitude,
)
from .training import TrainingBatch

TONE_LOW_HZ = 220.0
TONE_HIGH_HZ = 523.25
WINDOW_FRAMES = 25
WINDOW_SAMPLES = WINDOW_FRAMES * SAMPLE_RATE // int(FRAME_RATE)  # 16000, one second


def micro_model_config() -> ModelConfig:
    """Down-scaled architecture used for trainable-in-minutes checks.

    The width must exceed the 115 motion channels or the token projection
    cannot carry independent per-channel noise, which caps how well the
    inactive coefficients can be denoised.
    """
    return ModelConfig(window=WINDOW_FRAMES, history_len=15, group_spans=(5, 10),
                       tokens_per_group=3, model_dim=128, blocks=2, heads=4)


@dataclass
class Conversation:
    """One generated conversation: waveform, aligned coefficients, gates."""

    waveform: np.ndarray   # (W * 16000,)
    coeffs: np.ndarray     # (W * 25, 115)
    states: np.ndarray     # (W * 25,) of +/-1
    gates: np.ndarray      # (W,) of 0/1, per window

    @property
    def window_count(self) -> int:
        return len(self.gates)

    def window_samples(self, w: int) -> np.ndarray:
        return self.waveform[w * WINDOW_SAMPLES:(w + 1) * WINDOW_SAMPLES]

    def window_coeffs(self, w: int) -> np.ndarray:
        return self.coeffs[w * WINDOW_FRAMES:(w + 1) * WINDOW_FRAMES]


@dataclass
class WindowSample:
    """One training window with its conditioning, all numpy."""

    x1: np.ndarray              # (25, 115)
    audio_layers: np.ndarray    # (3, 50, 24)
    history_coeffs: np.ndarray  # (15, 115)
    history_states: np.ndarray  # (15,)
    current_states: np.ndarray  # (25,)
    magnitude: np.ndarray       # (2,)


def _speak_gates(rng: np.random.Generator, windows: int) -> np.ndarray:
    gates = np.zeros(windows, dtype=np.int64)
    speaking = bool(rng.integers(0, 2))
    w = 0
    while w < windows:
        run = int(rng.integers(1, 4))
        if w == 0:
            run = min(run, windows - 1)  # keep both states present
        gates[w:w + run] = 1 if speaking else 0
        speaking = not speaking
        w += run
    return gates


def _draw_conversation(rng: np.random.Generator, windows: int) -> Conversation:
    gates = _speak_gates(rng, windows)
    amp = rng.uniform(0.5, 1.0, size=2)
    env_freq = rng.uniform(0.3, 1.2, size=2)
    env_phase = rng.uniform(0.0, 2.0 * math.pi, size=2)
    # pose amplitudes are redrawn per window so that past frames cannot
    # predict the current scale; the magnitude input is the only cue
    rot_scale = rng.uniform(0.05, 1.0, size=windows)
    rot_freq = rng.uniform(0.2, 0.5)
    rot_phase = rng.uniform(0.0, 2.0 * math.pi)
    trans_scale = rng.uniform(0.05, 1.0, size=windows)
    trans_freq = rng.uniform(0.2, 0.5)
    trans_phase = rng.uniform(0.0, 2.0 * math.pi)

    def envelopes(times):
        e = 0.5 * (1.0 + np.sin(2.0 * math.pi * env_freq[:, None] * times[None] + env_phase[:, None]))
        # a floor keeps speaking stretches audible and the mouth visibly open
        return amp[:, None] * (0.2 + 0.8 * e)

    u = np.arange(windows * WINDOW_SAMPLES) / SAMPLE_RATE
    env_u = envelopes(u)
    waveform = 0.45 * (env_u[0] * np.sin(2.0 * math.pi * TONE_LOW_HZ * u)
                       + env_u[1] * np.sin(2.0 * math.pi * TONE_HIGH_HZ * u))

    total = windows * WINDOW_FRAMES
    tau = np.arange(total) / FRAME_RATE
    env_f = envelopes(tau)
    gate = np.repeat(gates, WINDOW_FRAMES).astype(np.float64)

    coeffs = np.zeros((total, MOTION_DIM))
    coeffs[:, EXPR.start + 0] = 0.9 * env_f[0] * gate
    coeffs[:, EXPR.start + 1] = 0.9 * env_f[1] * gate
    coeffs[:, EXPR.start + 2] = 0.25 * (env_f[0] + env_f[1]) * gate
    coeffs[:, JAW.start + 0] = 0.5 * env_f[0] * gate
    coeffs[:, JAW.start + 1] = 0.25 * env_f[1] * gate
    rot_amp = np.repeat(rot_scale, WINDOW_FRAMES)
    trans_amp = np.repeat(trans_scale, WINDOW_FRAMES)
    coeffs[:, ROT.start + 2] = 0.2 * rot_amp * np.sin(2.0 * math.pi * rot_freq * tau + rot_phase)
    coeffs[:, TRANS.start + 0] = 0.35 * trans_amp * np.sin(2.0 * math.pi * trans_freq * tau + trans_phase)

    states = np.where(gate > 0, SPEAK, LISTEN).astype(np.int64)
    return Conversation(waveform, coeffs, states, gates)


def _window_samples(conv: Conversation, norm: NormalizationSpec, history_len: int):
    out = []
    for w in range(conv.window_count):
        lo = w * WINDOW_FRAMES
        hist_c = np.zeros((history_len, MOTION_DIM))
        hist_s = np.full(history_len, LISTEN, dtype=np.int64)
        avail = min(history_len, lo)
        if avail:
            hist_c[history_len - avail:] = conv.coeffs[lo - avail:lo]
            hist_s[history_len - avail:] = conv.states[lo - avail:lo]
        x1 = conv.window_coeffs(w)
        m = compute_magnitude(x1, norm)
        out.append(WindowSample(
            x1=x1,
            audio_layers=extract_features(conv.window_samples(w)).layers,
            history_coeffs=hist_c,
            history_states=hist_s,
            current_states=conv.states[lo:lo + WINDOW_FRAMES],
            magnitude=np.array([m.rot_mag, m.trans_mag]),
        ))
    return out


class MicroTask:
    """Seeded dataset of conversations plus batch assembly for training."""

    def __init__(self, seed: int = 11, conversations: int = 24, windows_per_conversation: int = 8):
        self.config = micro_model_config()
        rng = np.random.default_rng(seed)
        self.conversations = [_draw_conversation(rng, windows_per_conversation)
                              for _ in range(conversations)]
        all_windows = [c.window_coeffs(w) for c in self.conversations
                       for w in range(c.window_count)]
        self.norm = NormalizationSpec.fit(all_windows)
        self.samples = [s for c in self.conversations
                        for s in _window_samples(c, self.norm, self.config.history_len)]
        self.mean_frame = np.mean([s.x1 for s in self.samples], axis=(0, 1))

    def batch(self, rng: np.random.Generator, batch_size: int,
              target_renderer=None) -> TrainingBatch:
        """Stack a uniform-with-replacement sample; draws noise and flow times.

        ``target_renderer`` adds rendered ground-truth images for stage 2.
        """
        picks = [self.samples[i] for i in rng.integers(0, len(self.samples), size=batch_size)]
        tt = torch.as_tensor
        x1 = tt(np.stack([s.x1 for s in picks]))
        batch = TrainingBatch(
            x1=x1,
            x0=tt(rng.standard_normal((batch_size, WINDOW_FRAMES, MOTION_DIM))),
            t=tt(rng.uniform(0.0, 1.0, size=batch_size)),
            audio_layers=tt(np.stack([s.audio_layers for s in picks])),
            history_coeffs=tt(np.stack([s.history_coeffs for s in picks])),
            history_states=tt(np.stack([s.history_states for s in picks]).astype(np.float64)),
            current_states=tt(np.stack([s.current_states for s in picks]).astype(np.float64)),
            shape_cond=torch.zeros(batch_size, 100, dtype=torch.float64),
            ref_frame=torch.zeros(batch_size, MOTION_DIM, dtype=torch.float64),
            magnitude=tt(np.stack([s.magnitude for s in picks])),
        )
        if target_renderer is not None:
            with torch.no_grad():
                batch.target_images = target_renderer(x1)
        return batch

    def eval_conversation(self, seed: int = 999, windows: int = 8) -> Conversation:
        """Fresh conversation from the same distribution, for held-out checks."""
        return _draw_conversation(np.random.default_rng(seed), windows)

    def eval_samples(self, conv: Conversation):
        """Conditioning windows for a conversation, using the fitted bounds."""
        return _window_samples(conv, self.norm, self.config.history_len)

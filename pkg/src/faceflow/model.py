"""Multi-condition transformer velocity field over motion-coefficient windows.

The field v(x_t, t, c) maps a noisy 115-dim coefficient window plus its
conditioning to per-frame velocities.  Conditioning enters through four
routes:

  * token channel: each frame (history and current) carries its +/-1
    listening/speaking state as a 116th channel,
  * history context packing: 75 past frames are compressed into 20 tokens
    by per-group learnable linear maps over spans of 40/20/10/5 frames
    (oldest first, so recent context is finest grained),
  * global conditioning: a 896-dim vector (sinusoidal flow time, identity
    reference embedding, pooled global-audio embedding, motion-magnitude
    embedding) drives zero-initialized per-block adaptive layer norms,
  * local audio: the T current tokens cross-attend to state-FiLM-modulated
    audio tokens under a diagonal locality mask (|i - j| <= R, R = 2) with
    rotary positions aligning frame and audio indices.

Every block applies the AdaLN (shift, scale, gate) pattern to its three
sublayers (self-attention over all history + current tokens with rotary
positions, the masked cross-attention, and the feed-forward); all
modulation generators start at zero so the freshly initialized network
reduces to its final projection of the token embeddings.

All parameters are float64; forward passes are pure and deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import NumericError
from .motion import (
    LISTEN,
    MOTION_DIM,
    SHAPE_COND_DIM,
    AvatarIdentity,
    MagnitudePair,
)

TOKEN_CHANNELS = MOTION_DIM + 1  # coefficient dims + state channel
REF_INPUT_DIM = SHAPE_COND_DIM + MOTION_DIM  # 215
LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Architecture constants; defaults are the full-scale configuration."""

    motion_dim: int = MOTION_DIM
    window: int = 100
    history_len: int = 75
    group_spans: tuple = (5, 10, 20, 40)
    tokens_per_group: int = 5
    model_dim: int = 448
    blocks: int = 8
    heads: int = 8
    mlp_ratio: int = 4
    locality_radius: int = 2
    rope_base: float = 10000.0
    time_dim: int | None = None
    ref_dim: int | None = None
    audio_cond_dim: int | None = None
    magnitude_dim: int | None = None
    film_hidden: int | None = None
    audio_token_dim: int | None = None

    def __post_init__(self):
        # derived condition-part sizes keep the full-scale 448/112/224/112
        # split when scaled down proportionally
        def default(name, value):
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)

        default("time_dim", self.model_dim)
        default("ref_dim", self.model_dim // 4)
        default("audio_cond_dim", self.model_dim // 2)
        default("magnitude_dim", self.model_dim // 4)
        default("film_hidden", self.model_dim // 4)
        default("audio_token_dim", self.model_dim)
        if self.motion_dim != MOTION_DIM:
            raise ValueError(f"motion_dim must be {MOTION_DIM}")
        if sum(self.group_spans) != self.history_len:
            raise ValueError("group spans must sum to the history length")
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must divide evenly into heads")
        if (self.model_dim // self.heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary positions")
        if self.time_dim % 2 != 0:
            raise ValueError("time embedding dim must be even")
        if min(self.window, self.history_len, self.tokens_per_group, self.blocks) < 1:
            raise ValueError("window, history, tokens_per_group, blocks must be positive")
        if self.locality_radius < 0:
            raise ValueError("locality radius must be nonnegative")

    @property
    def history_tokens(self) -> int:
        return self.tokens_per_group * len(self.group_spans)

    @property
    def seq_len(self) -> int:
        return self.history_tokens + self.window

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def cond_dim(self) -> int:
        return self.time_dim + self.ref_dim + self.audio_cond_dim + self.magnitude_dim

    @property
    def ffn_dim(self) -> int:
        return self.mlp_ratio * self.model_dim


@dataclass
class ConditionSet:
    """Full conditioning tuple consumed by the velocity field.

    ``audio_tokens`` feeds cross-attention; ``audio_tokens_global`` is the
    same audio fused with the global-branch weights and pooled into the
    conditioning vector.  ``t`` is the flow time used when the sampler does
    not supply one per step.
    """

    audio_tokens: torch.Tensor          # (T, audio_token_dim)
    audio_tokens_global: torch.Tensor   # (T, audio_token_dim)
    identity: AvatarIdentity
    history_coeffs: torch.Tensor        # (L, 115)
    history_states: torch.Tensor        # (L,) of +/-1
    current_states: torch.Tensor        # (T,) of +/-1
    magnitude: MagnitudePair
    t: float = 0.0

    def __post_init__(self):
        self.audio_tokens = _as_tensor(self.audio_tokens)
        self.audio_tokens_global = _as_tensor(self.audio_tokens_global)
        self.history_coeffs = _as_tensor(self.history_coeffs)
        self.history_states = _as_tensor(self.history_states)
        self.current_states = _as_tensor(self.current_states)

    def validate(self, config: ModelConfig):
        t, l = config.window, config.history_len
        if self.audio_tokens.shape != (t, config.audio_token_dim):
            raise ValueError(f"audio tokens must be ({t}, {config.audio_token_dim})")
        if self.audio_tokens_global.shape != self.audio_tokens.shape:
            raise ValueError("global audio tokens must match the local shape")
        if self.history_coeffs.shape != (l, MOTION_DIM):
            raise ValueError(f"history must be ({l}, {MOTION_DIM})")
        for name, states, n in (("history", self.history_states, l),
                                ("current", self.current_states, t)):
            if states.shape != (n,):
                raise ValueError(f"{name} states must have length {n}")
            if not torch.all((states == 1) | (states == -1)):
                raise ValueError(f"{name} states must be +/-1")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _init_linear(fan_in: int, fan_out: int, gen: torch.Generator | None, zero: bool = False) -> nn.Linear:
    lin = nn.Linear(fan_in, fan_out, dtype=torch.float64)
    with torch.no_grad():
        if zero:
            lin.weight.zero_()
        else:
            lin.weight.normal_(0.0, fan_in**-0.5, generator=gen)
        lin.bias.zero_()
    return lin


# ---------------------------------------------------------------------------
# building blocks


def augment_with_state(frames: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
    """Append the +/-1 state as channel 116: (..., N, 115) -> (..., N, 116)."""
    frames = _as_tensor(frames)
    states = _as_tensor(states)
    if frames.shape[:-1] != states.shape:
        raise ValueError(f"frames {tuple(frames.shape)} and states {tuple(states.shape)} disagree")
    return torch.cat([frames, states.unsqueeze(-1)], dim=-1)


def sinusoidal_time_embedding(t: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Interleaved sin/cos embedding of flow time: t=0 maps to [0,1,0,1,...]."""
    t = _as_tensor(t).reshape(-1)
    half = dim // 2
    freqs = base ** (-2.0 * torch.arange(half, dtype=torch.float64) / dim)
    ang = t[:, None] * freqs[None, :]
    emb = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(t.shape[0], dim)
    return emb


def build_locality_mask(window: int, radius: int) -> torch.Tensor:
    """Additive (T, T) mask: 0 where |i - j| <= radius, -inf elsewhere."""
    if window < 1:
        raise ValueError("window must be at least 1")
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    idx = torch.arange(window)
    allowed = (idx[:, None] - idx[None, :]).abs() <= radius
    mask = torch.zeros(window, window, dtype=torch.float64)
    mask[~allowed] = float("-inf")
    return mask


def rope_cos_sin(positions: torch.Tensor, head_dim: int, base: float) -> tuple[torch.Tensor, torch.Tensor]:
    freqs = base ** (-2.0 * torch.arange(head_dim // 2, dtype=torch.float64) / head_dim)
    ang = _as_tensor(positions)[:, None] * freqs[None, :]
    return torch.cos(ang), torch.sin(ang)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate (even, odd) channel pairs of (..., N, head_dim) by position angles."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1).flatten(-2)


class HistoryPacker(nn.Module):
    """Compress history frames group-by-group with learnable time-axis maps.

    Groups are ordered oldest first with descending spans, so the most
    recent frames are compressed least.  Each group has an independent
    (tokens_per_group, span) weight; feature channels pass through.
    """

    def __init__(self, config: ModelConfig, gen: torch.Generator | None = None):
        super().__init__()
        self.spans = tuple(sorted(config.group_spans, reverse=True))
        self.tokens_per_group = config.tokens_per_group
        self.history_len = config.history_len
        self.weights = nn.ParameterList()
        for span in self.spans:
            w = torch.empty(config.tokens_per_group, span, dtype=torch.float64)
            w.normal_(0.0, span**-0.5, generator=gen)
            self.weights.append(nn.Parameter(w))

    def forward(self, history: torch.Tensor) -> torch.Tensor:
        """(..., L, C) -> (..., H, C), oldest group's tokens first."""
        if history.shape[-2] != self.history_len:
            raise ValueError(f"history must have {self.history_len} frames, got {history.shape[-2]}")
        parts = []
        start = 0
        for span, w in zip(self.spans, self.weights):
            group = history[..., start : start + span, :]
            parts.append(torch.einsum("ts,...sc->...tc", w, group))
            start += span
        return torch.cat(parts, dim=-2)


class StateFiLM(nn.Module):
    """Per-block state-conditioned FiLM over audio tokens.

    A two-layer perceptron maps each frame's scalar +/-1 state to per-channel
    (alpha, beta); the output layer starts at zero so modulation is the
    identity until trained.
    """

    def __init__(self, hidden: int, token_dim: int, gen: torch.Generator | None = None):
        super().__init__()
        self.inner = _init_linear(1, hidden, gen)
        self.out = _init_linear(hidden, 2 * token_dim, gen, zero=True)
        self.token_dim = token_dim

    def forward(self, audio: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        """audio (..., T, A), states (..., T) -> modulated (..., T, A)."""
        h = torch.nn.functional.silu(self.inner(_as_tensor(states).unsqueeze(-1)))
        alpha, beta = self.out(h).split(self.token_dim, dim=-1)
        return audio * (1.0 + alpha) + beta


def film_modulate(audio, states, modulator: StateFiLM):
    """Functional form of the per-block FiLM step."""
    return modulator(_as_tensor(audio), _as_tensor(states))


class DiTBlock(nn.Module):
    """One transformer block: AdaLN self-attention, masked cross-attention, FFN."""

    def __init__(self, config: ModelConfig, gen: torch.Generator | None = None):
        super().__init__()
        d = config.model_dim
        self.config = config
        self.ada = _init_linear(config.cond_dim, 9 * d, gen, zero=True)
        self.norm1 = nn.LayerNorm(d, eps=LN_EPS, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(d, eps=LN_EPS, elementwise_affine=False)
        self.norm3 = nn.LayerNorm(d, eps=LN_EPS, elementwise_affine=False)
        self.qkv = _init_linear(d, 3 * d, gen)
        self.attn_out = _init_linear(d, d, gen)
        self.cross_q = _init_linear(d, d, gen)
        self.cross_kv = _init_linear(config.audio_token_dim, 2 * d, gen)
        self.cross_out = _init_linear(d, d, gen)
        self.ffn_in = _init_linear(d, config.ffn_dim, gen)
        self.ffn_out = _init_linear(config.ffn_dim, d, gen)
        self.film = StateFiLM(config.film_hidden, config.audio_token_dim, gen)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.config.heads, self.config.head_dim).transpose(1, 2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        b, _, n, _ = x.shape
        return x.transpose(1, 2).reshape(b, n, self.config.model_dim)

    def _self_attention(self, h: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = apply_rope(self._heads(q), cos, sin)
        k = apply_rope(self._heads(k), cos, sin)
        v = self._heads(v)
        scores = q @ k.transpose(-1, -2) * self.config.head_dim**-0.5
        return self.attn_out(self._merge(scores.softmax(dim=-1) @ v))

    def _cross_attention(self, h_cur: torch.Tensor, audio: torch.Tensor,
                         mask: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        q = apply_rope(self._heads(self.cross_q(h_cur)), cos, sin)
        k, v = self.cross_kv(audio).chunk(2, dim=-1)
        k = apply_rope(self._heads(k), cos, sin)
        v = self._heads(v)
        scores = q @ k.transpose(-1, -2) * self.config.head_dim**-0.5 + mask
        return self.cross_out(self._merge(scores.softmax(dim=-1) @ v))

    def forward(self, x: torch.Tensor, g: torch.Tensor, audio: torch.Tensor,
                states: torch.Tensor, mask: torch.Tensor,
                rope_all: tuple, rope_cur: tuple) -> torch.Tensor:
        """x (B, H+T, d), g (B, cond), audio (B, T, A), states (B, T)."""
        h_count = self.config.history_tokens
        p = self.ada(torch.nn.functional.silu(g)).unsqueeze(1)  # (B, 1, 9d)
        (s1_shift, s1_scale, s1_gate,
         s2_shift, s2_scale, s2_gate,
         s3_shift, s3_scale, s3_gate) = p.chunk(9, dim=-1)

        h = self.norm1(x) * (1.0 + s1_scale) + s1_shift
        x = x + s1_gate * self._self_attention(h, *rope_all)

        h = self.norm2(x) * (1.0 + s2_scale) + s2_shift
        audio_mod = self.film(audio, states)
        cross = self._cross_attention(h[:, h_count:], audio_mod, mask, *rope_cur)
        x = torch.cat([x[:, :h_count], x[:, h_count:] + s2_gate * cross], dim=1)

        h = self.norm3(x) * (1.0 + s3_scale) + s3_shift
        x = x + s3_gate * self.ffn_out(torch.nn.functional.gelu(self.ffn_in(h)))
        return x


class VelocityField(nn.Module):
    """The full conditional velocity field v(x_t, t, c)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.config = config
        d = config.model_dim
        self.token_in = _init_linear(TOKEN_CHANNELS, d, gen)
        self.packer = HistoryPacker(config, gen)
        self.ref_proj = _init_linear(REF_INPUT_DIM, config.ref_dim, gen)
        self.audio_proj = _init_linear(config.audio_token_dim, config.audio_cond_dim, gen)
        self.mag_inner = _init_linear(2, config.magnitude_dim, gen)
        self.mag_out = _init_linear(config.magnitude_dim, config.magnitude_dim, gen)
        self.blocks = nn.ModuleList(DiTBlock(config, gen) for _ in range(config.blocks))
        self.ada_final = _init_linear(config.cond_dim, 2 * d, gen, zero=True)
        self.norm_final = nn.LayerNorm(d, eps=LN_EPS, elementwise_affine=False)
        self.proj = _init_linear(d, config.motion_dim, gen)
        mask = build_locality_mask(config.window, config.locality_radius)
        self.register_buffer("mask", mask, persistent=False)
        cos_a, sin_a = rope_cos_sin(torch.arange(config.seq_len), config.head_dim, config.rope_base)
        cos_c, sin_c = rope_cos_sin(torch.arange(config.window), config.head_dim, config.rope_base)
        self.register_buffer("rope_all_cos", cos_a, persistent=False)
        self.register_buffer("rope_all_sin", sin_a, persistent=False)
        self.register_buffer("rope_cur_cos", cos_c, persistent=False)
        self.register_buffer("rope_cur_sin", sin_c, persistent=False)

    def build_global_condition(self, t: torch.Tensor, shape_cond: torch.Tensor,
                               ref_frame: torch.Tensor, audio_global: torch.Tensor,
                               magnitude: torch.Tensor) -> torch.Tensor:
        """Concatenated (B, cond_dim) conditioning vector.

        Parts: sinusoidal flow time, linear embedding of [shape | reference
        frame], linear embedding of mean-pooled global audio tokens, and a
        two-layer perceptron embedding of the (rot, trans) magnitudes.
        """
        cfg = self.config
        if shape_cond.shape[-1] != SHAPE_COND_DIM or ref_frame.shape[-1] != MOTION_DIM:
            raise ValueError("identity parts must be 100 shape coeffs and a 115-dim frame")
        if audio_global.shape[-1] != cfg.audio_token_dim:
            raise ValueError(f"global audio tokens must have dim {cfg.audio_token_dim}")
        if magnitude.shape[-1] != 2:
            raise ValueError("magnitude must be the (rot, trans) pair")
        time_emb = sinusoidal_time_embedding(t, cfg.time_dim)
        ref_emb = self.ref_proj(torch.cat([shape_cond, ref_frame], dim=-1))
        audio_emb = self.audio_proj(audio_global.mean(dim=-2))
        mag_emb = self.mag_out(torch.nn.functional.silu(self.mag_inner(magnitude)))
        return torch.cat([time_emb, ref_emb, audio_emb, mag_emb], dim=-1)

    def forward(self, noisy: torch.Tensor, audio_local: torch.Tensor,
                audio_global: torch.Tensor, hist_coeffs: torch.Tensor,
                hist_states: torch.Tensor, cur_states: torch.Tensor,
                shape_cond: torch.Tensor, ref_frame: torch.Tensor,
                magnitude: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Batched velocity prediction: (B, T, 115) -> (B, T, 115)."""
        cfg = self.config
        b, window, _ = noisy.shape
        if window != cfg.window or noisy.shape[-1] != cfg.motion_dim:
            raise ValueError(f"noisy window must be (B, {cfg.window}, {cfg.motion_dim})")
        hist = augment_with_state(hist_coeffs, hist_states)
        packed = self.packer(hist)
        current = augment_with_state(noisy, cur_states)
        x = self.token_in(torch.cat([packed, current], dim=-2))
        g = self.build_global_condition(t, shape_cond, ref_frame, audio_global, magnitude)
        rope_all = (self.rope_all_cos, self.rope_all_sin)
        rope_cur = (self.rope_cur_cos, self.rope_cur_sin)
        for i, block in enumerate(self.blocks):
            x = block(x, g, audio_local, cur_states, self.mask, rope_all, rope_cur)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after block {i}", where=i)
        shift, scale = self.ada_final(torch.nn.functional.silu(g)).unsqueeze(1).chunk(2, dim=-1)
        y = self.norm_final(x[:, cfg.history_tokens:]) * (1.0 + scale) + shift
        return self.proj(y)

    def predict_velocity(self, noisy, cond: ConditionSet, t: float | None = None) -> np.ndarray:
        """Single-window inference; accepts and returns numpy arrays."""
        cond.validate(self.config)
        noisy_t = _as_tensor(noisy)
        if noisy_t.shape != (self.config.window, self.config.motion_dim):
            raise ValueError(f"noisy window must be ({self.config.window}, {self.config.motion_dim})")
        flow_t = cond.t if t is None else float(t)
        with torch.no_grad():
            out = self.forward(
                noisy_t.unsqueeze(0),
                cond.audio_tokens.unsqueeze(0),
                cond.audio_tokens_global.unsqueeze(0),
                cond.history_coeffs.unsqueeze(0),
                cond.history_states.unsqueeze(0),
                cond.current_states.unsqueeze(0),
                _as_tensor(cond.identity.shape_cond).unsqueeze(0),
                _as_tensor(cond.identity.reference_frame.to_vector()).unsqueeze(0),
                torch.tensor([[cond.magnitude.rot_mag, cond.magnitude.trans_mag]], dtype=torch.float64),
                torch.tensor([flow_t], dtype=torch.float64),
            )
        return out.squeeze(0).numpy()

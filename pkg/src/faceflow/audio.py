"""Audio frontend: layered synthetic features, learnable fusion, rate alignment.

A deterministic three-layer feature extractor stands in for a frozen speech
encoder.  Raw 16 kHz mono audio is framed at 50 Hz (20 ms hop, 40 ms Hann
window) and mapped to

    layer 1: 24 log mel-spaced triangular filterbank energies,
    layer 2: first-order temporal differences of layer 1,
    layer 3: [log-energy, zero-crossing rate, normalized spectral centroid]
             tiled to 24 dims.

Layers are then blended with learnable softmax weights (two independent
logit sets: one for the cross-attention branch, one for the global
conditioning branch) and aligned to the 25 Hz motion rate with a strided
1-D convolution (kernel 5, stride 2, symmetric zero padding 2) into
per-frame tokens, each layer-normalized.

Waveform files use a 16-byte little-endian header: magic ``FFAU``, format
code (1 = 16-bit PCM, 2 = float64), sample count, sample rate; samples
follow in that encoding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

SAMPLE_RATE = 16000
HOP = 320          # 20 ms -> 50 Hz feature rate
WIN = 640          # 40 ms analysis window
FEATURE_RATE = 50.0
N_BANDS = 24
N_LAYERS = 3
LOG_FLOOR = 1e-10
ALIGN_KERNEL = 5
ALIGN_STRIDE = 2
ALIGN_PAD = 2
LN_EPS = 1e-12

WAVE_MAGIC = b"FFAU"
WAVE_FMT_PCM16 = 1
WAVE_FMT_F64 = 2


@dataclass
class AudioBuffer:
    """Mono waveform at 16 kHz with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples must be finite")
        if s.size and np.max(np.abs(s)) > 1.0:
            raise ValueError("sample amplitudes must lie in [-1, 1]")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}")
        self.samples = s

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class LayeredFeatures:
    """Stacked per-layer features, shape (N_layers, F_frames, feat_dim), at 50 Hz."""

    layers: np.ndarray
    layer_rate: float = FEATURE_RATE

    def __post_init__(self):
        a = np.asarray(self.layers, dtype=np.float64)
        if a.ndim != 3 or a.shape[0] < 1:
            raise ValueError("layers must be (N_layers, F, feat_dim) with N_layers >= 1")
        if not np.all(np.isfinite(a)):
            raise ValueError("features must be finite")
        self.layers = a

    @property
    def num_frames(self) -> int:
        return self.layers.shape[1]


@dataclass
class AudioTokens:
    """Motion-rate audio tokens, shape (T, token_dim)."""

    tokens: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.tokens, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("tokens must be (T, token_dim)")
        if not np.all(np.isfinite(a)):
            raise ValueError("tokens must be finite")
        self.tokens = a

    def __len__(self) -> int:
        return self.tokens.shape[0]


# ---------------------------------------------------------------------------
# synthetic layered extractor


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_bands: int = N_BANDS, sr: int = SAMPLE_RATE) -> np.ndarray:
    """n_bands + 2 edge frequencies in Hz, mel-spaced from 0 to Nyquist."""
    mels = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sr / 2.0), n_bands + 2)
    return _mel_to_hz(mels)


def mel_filterbank(n_bands: int = N_BANDS, n_fft: int = WIN, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filter matrix, shape (n_bands, n_fft // 2 + 1)."""
    edges = mel_band_edges(n_bands, sr)
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sr)
    fb = np.zeros((n_bands, freqs.size))
    for k in range(n_bands):
        lo, mid, hi = edges[k], edges[k + 1], edges[k + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[k] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def _frame_signal(samples: np.ndarray) -> np.ndarray:
    """Slice into 40 ms frames every 20 ms, zero-padding the tail, shape (F, WIN)."""
    n = samples.size
    num = n // HOP
    padded = np.concatenate([samples, np.zeros(WIN)])
    return np.stack([padded[i * HOP : i * HOP + WIN] for i in range(num)])


def extract_features(buffer: AudioBuffer) -> LayeredFeatures:
    """Deterministic layered features at 50 Hz; requires at least one 20 ms hop."""
    if not isinstance(buffer, AudioBuffer):
        buffer = AudioBuffer(buffer)
    if len(buffer) < HOP:
        raise ValueError(f"buffer must hold at least one hop ({HOP} samples)")
    frames = _frame_signal(buffer.samples)
    window = np.hanning(WIN)
    spectra = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    fb = mel_filterbank()
    layer1 = np.log(spectra @ fb.T + LOG_FLOOR)

    layer2 = np.zeros_like(layer1)
    layer2[1:] = np.diff(layer1, axis=0)

    energy = np.log(np.sum(frames**2, axis=1) + LOG_FLOOR)
    signs = frames[:, :-1] * frames[:, 1:] < 0.0
    zcr = signs.mean(axis=1)
    freqs = np.fft.rfftfreq(WIN, d=1.0 / SAMPLE_RATE)
    total = spectra.sum(axis=1)
    centroid = np.where(total > 0.0, spectra @ freqs / np.maximum(total, LOG_FLOOR), 0.0)
    centroid = centroid / (SAMPLE_RATE / 2.0)
    layer3 = np.tile(np.stack([energy, zcr, centroid], axis=1), (1, N_BANDS // 3))

    return LayeredFeatures(np.stack([layer1, layer2, layer3]))


# ---------------------------------------------------------------------------
# fusion + alignment


def fuse_layers(features, logits) -> np.ndarray:
    """Softmax-weighted sum across layers, shape (F, feat_dim)."""
    layers = features.layers if isinstance(features, LayeredFeatures) else np.asarray(features, dtype=np.float64)
    w = np.asarray(logits, dtype=np.float64)
    if w.shape != (layers.shape[0],):
        raise ValueError(f"need {layers.shape[0]} logits, got shape {w.shape}")
    w = np.exp(w - w.max())
    w /= w.sum()
    return np.tensordot(w, layers, axes=1)


def align_to_motion_rate(fused, weight, bias, normalize: bool = True) -> AudioTokens:
    """Strided conv (kernel 5, stride 2, zero pad 2) to motion rate, then LayerNorm.

    ``fused`` is (F, feat_dim) with F even (50 Hz in, 25 Hz out); ``weight``
    is (token_dim, feat_dim, 5) and ``bias`` (token_dim,).  ``normalize=False``
    skips the per-token normalization (used by linearity checks).
    """
    x = np.asarray(fused, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("fused features must be (F, feat_dim)")
    if x.shape[0] % 2 != 0:
        raise ValueError(f"frame count {x.shape[0]} must be even (50 Hz -> 25 Hz)")
    w = torch.as_tensor(np.asarray(weight, dtype=np.float64))
    b = torch.as_tensor(np.asarray(bias, dtype=np.float64))
    t = torch.as_tensor(x)
    out = _align_conv(t, w, b, normalize=normalize)
    return AudioTokens(out.numpy())


def _align_conv(fused_t: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Torch core of the alignment conv; fused_t (..., F, C_in) -> (..., F//2, C_out)."""
    lead = fused_t.shape[:-2]
    x = fused_t.reshape(-1, *fused_t.shape[-2:]).transpose(1, 2)  # (B, C_in, F)
    y = torch.nn.functional.conv1d(x, weight, bias, stride=ALIGN_STRIDE, padding=ALIGN_PAD)
    y = y.transpose(1, 2)  # (B, T, C_out)
    if normalize:
        y = torch.nn.functional.layer_norm(y, (y.shape[-1],), eps=LN_EPS)
    return y.reshape(*lead, *y.shape[1:])


class AudioFusion(nn.Module):
    """Learnable layer fusion and rate alignment producing two token streams.

    The local stream feeds cross-attention; the global stream feeds the
    window-level conditioning vector.  Each has its own fusion logits; the
    alignment convolution is shared.
    """

    def __init__(self, token_dim: int, feat_dim: int = N_BANDS, n_layers: int = N_LAYERS,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.token_dim = token_dim
        self.local_logits = nn.Parameter(torch.zeros(n_layers, dtype=torch.float64))
        self.global_logits = nn.Parameter(torch.zeros(n_layers, dtype=torch.float64))
        fan_in = feat_dim * ALIGN_KERNEL
        w = torch.empty(token_dim, feat_dim, ALIGN_KERNEL, dtype=torch.float64)
        w.normal_(0.0, fan_in**-0.5, generator=generator)
        self.align_weight = nn.Parameter(w)
        self.align_bias = nn.Parameter(torch.zeros(token_dim, dtype=torch.float64))

    def _fuse(self, layers: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
        w = torch.softmax(logits, dim=0)
        return torch.einsum("n,...nfc->...fc", w, layers)

    def forward(self, layers: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """layers (..., N_layers, F, feat_dim) -> (local (..., F//2, D), global alike)."""
        if layers.shape[-2] % 2 != 0:
            raise ValueError(f"frame count {layers.shape[-2]} must be even")
        local = _align_conv(self._fuse(layers, self.local_logits), self.align_weight, self.align_bias)
        glob = _align_conv(self._fuse(layers, self.global_logits), self.align_weight, self.align_bias)
        return local, glob


# ---------------------------------------------------------------------------
# waveform container


def write_waveform(path, samples, fmt: int = WAVE_FMT_F64, sample_rate: int = SAMPLE_RATE):
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("samples must be one-dimensional")
    header = WAVE_MAGIC + struct.pack("<III", fmt, s.size, sample_rate)
    if fmt == WAVE_FMT_PCM16:
        payload = np.clip(np.round(s * 32767.0), -32768, 32767).astype("<i2").tobytes()
    elif fmt == WAVE_FMT_F64:
        payload = s.astype("<f8").tobytes()
    else:
        raise ValueError(f"unknown waveform format code {fmt}")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_waveform(path) -> AudioBuffer:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != WAVE_MAGIC:
            raise ValueError(f"{path}: not a waveform container (bad magic)")
        fmt, count, rate = struct.unpack("<III", header[4:])
        if fmt == WAVE_FMT_PCM16:
            raw = np.frombuffer(f.read(count * 2), dtype="<i2")
            samples = raw.astype(np.float64) / 32767.0
        elif fmt == WAVE_FMT_F64:
            samples = np.frombuffer(f.read(count * 8), dtype="<f8").astype(np.float64)
        else:
            raise ValueError(f"{path}: unknown waveform format code {fmt}")
    if samples.size != count:
        raise ValueError(f"{path}: truncated payload ({samples.size} of {count} samples)")
    return AudioBuffer(np.clip(samples, -1.0, 1.0), rate)

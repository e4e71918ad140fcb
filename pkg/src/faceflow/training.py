"""Two-stage training: grouped coefficient regression, then image supervision.

Stage 1 regresses the velocity field against the straight-path target with
per-group weights plus a squared-difference smoothness penalty on the head
pose of the predicted endpoint.  Stage 2 keeps the stage-1 term (scaled down)
and adds L1 and frozen-feature losses between rendered endpoint frames and
target images, with the renderer itself trainable at half the learning rate.

Gradient correctness is checked against central finite differences over a
sampled subset of every parameter family.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch
from torch import nn

from .audio import N_BANDS, N_LAYERS, AudioFusion
from .errors import ConfigError, NumericError
from .model import ModelConfig, VelocityField
from .motion import EXPR, EYES, JAW, POSE, ROT, TRANS, make_blendshape_model
from .renderer import PerceptualStub, SyntheticRenderer


@dataclass(frozen=True)
class LossWeights:
    """Per-term loss weights; defaults are the reference training recipe."""

    expr: float = 0.6
    jaw: float = 0.1
    eye: float = 0.1
    rot: float = 0.1
    trans: float = 0.1
    smooth: float = 0.1
    coef: float = 0.2
    img: float = 1.0
    l1: float = 0.2
    perc: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")


GROUP_SLICES = (("expr", EXPR), ("jaw", JAW), ("eye", EYES), ("rot", ROT), ("trans", TRANS))


def stage1_loss(pred_velocity: torch.Tensor, target_velocity: torch.Tensor,
                endpoint_pose: torch.Tensor, weights: LossWeights | None = None):
    """Weighted grouped velocity regression plus pose smoothness.

    ``pred_velocity`` and ``target_velocity`` are (..., T, 115);
    ``endpoint_pose`` is the rotation+translation block (..., T, 6) of the
    predicted endpoint.  Group terms average the squared difference over all
    their elements; the smoothness term sums squared frame-to-frame pose
    differences over the window and averages over leading dims only.

    Returns (total, breakdown) with the breakdown holding weighted terms.
    """
    w = weights or LossWeights()
    if pred_velocity.shape != target_velocity.shape:
        raise ValueError("prediction and target shapes disagree")
    if endpoint_pose.shape != pred_velocity.shape[:-1] + (6,):
        raise ValueError("endpoint pose must be (..., T, 6)")
    err = pred_velocity - target_velocity
    breakdown = {}
    for name, sl in GROUP_SLICES:
        breakdown[name] = getattr(w, name) * (err[..., sl] ** 2).mean()
    step = endpoint_pose[..., 1:, :] - endpoint_pose[..., :-1, :]
    breakdown["smooth"] = w.smooth * (step**2).sum(dim=(-2, -1)).mean()
    total = sum(breakdown.values())
    breakdown["total"] = total
    return total, breakdown


def image_loss(rendered: torch.Tensor, target: torch.Tensor,
               perceptual: PerceptualStub, weights: LossWeights | None = None):
    """Weighted L1 plus frozen-feature squared distance between image stacks."""
    w = weights or LossWeights()
    if rendered.shape != target.shape:
        raise ValueError("rendered and target image shapes disagree")
    breakdown = {
        "l1": w.l1 * (rendered - target).abs().mean(),
        "perc": w.perc * ((perceptual(rendered) - perceptual(target)) ** 2).mean(),
    }
    total = w.img * sum(breakdown.values())
    breakdown["image_total"] = total
    return total, breakdown


def stage2_loss(pred_velocity, target_velocity, x_t, t, renderer: SyntheticRenderer,
                perceptual: PerceptualStub, target_images, weights: LossWeights | None = None):
    """Stage-2 objective on one batch.

    The supervised frames are the one-step endpoint x_t + (1 - t) * v, which
    is exactly what single-step inference from the same state would emit.
    """
    w = weights or LossWeights()
    t = t.reshape(t.shape + (1,) * (pred_velocity.ndim - t.ndim))
    endpoint = x_t + (1.0 - t) * pred_velocity
    s1, breakdown = stage1_loss(pred_velocity, target_velocity, endpoint[..., POSE], w)
    rendered = renderer(endpoint)
    if not torch.isfinite(rendered).all():
        raise NumericError("renderer produced non-finite pixels")
    img_total, img_terms = image_loss(rendered, target_images, perceptual, w)
    breakdown = {k: w.coef * v for k, v in breakdown.items()}
    breakdown.update(img_terms)
    total = w.coef * s1 + img_total
    breakdown["total"] = total
    return total, breakdown


# ---------------------------------------------------------------------------
# composite trainable module


class FaceFlowModel(nn.Module):
    """Audio fusion, velocity field, and renderer under one parameter tree."""

    def __init__(self, config: ModelConfig, seed: int = 0, blendshape_seed: int = 7):
        super().__init__()
        gen = torch.Generator().manual_seed(seed + 101)
        self.config = config
        self.fusion = AudioFusion(config.audio_token_dim, generator=gen)
        self.field = VelocityField(config, seed=seed)
        self.renderer = SyntheticRenderer(make_blendshape_model(blendshape_seed))

    def velocity(self, noisy: torch.Tensor, batch: "TrainingBatch", t: torch.Tensor) -> torch.Tensor:
        local, glob = self.fusion(batch.audio_layers)
        return self.field(noisy, local, glob, batch.history_coeffs, batch.history_states,
                          batch.current_states, batch.shape_cond, batch.ref_frame,
                          batch.magnitude, t)


@dataclass
class TrainingBatch:
    """One optimizer step worth of windows, already stacked into tensors."""

    x1: torch.Tensor              # (B, T, 115) target coefficients
    x0: torch.Tensor              # (B, T, 115) noise draw
    t: torch.Tensor               # (B,) flow times
    audio_layers: torch.Tensor    # (B, N_LAYERS, F, N_BANDS)
    history_coeffs: torch.Tensor  # (B, L, 115)
    history_states: torch.Tensor  # (B, L)
    current_states: torch.Tensor  # (B, T)
    shape_cond: torch.Tensor      # (B, 100)
    ref_frame: torch.Tensor       # (B, 115)
    magnitude: torch.Tensor       # (B, 2)
    target_images: torch.Tensor | None = None  # (B, T, S, S), stage 2 only

    def __post_init__(self):
        b, window, _ = self.x1.shape
        if self.audio_layers.shape[:2] != (b, N_LAYERS) or self.audio_layers.shape[-1] != N_BANDS:
            raise ValueError("audio layers must be (B, n_layers, F, bands)")
        if self.t.shape != (b,):
            raise ValueError("flow times must be (B,)")
        if self.current_states.shape != (b, window):
            raise ValueError("current states must be (B, T)")


def forward_batch(model: FaceFlowModel, batch: TrainingBatch, stage: int,
                  weights: LossWeights | None = None,
                  perceptual: PerceptualStub | None = None):
    """Loss for one batch under the given stage; returns (total, breakdown)."""
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    w = weights or LossWeights()
    t = batch.t
    target_v = batch.x1 - batch.x0
    x_t = batch.x0 + t.view(-1, 1, 1) * target_v
    pred_v = model.velocity(x_t, batch, t)
    if stage == 1:
        endpoint = x_t + (1.0 - t.view(-1, 1, 1)) * pred_v
        return stage1_loss(pred_v, target_v, endpoint[..., POSE], w)
    if batch.target_images is None:
        raise ConfigError("stage 2 requires target images in the batch")
    if perceptual is None:
        raise ConfigError("stage 2 requires a perceptual module")
    return stage2_loss(pred_v, target_v, x_t, t, model.renderer, perceptual,
                       batch.target_images, w)


# ---------------------------------------------------------------------------
# optimization


def make_optimizer(model: FaceFlowModel, lr: float, weight_decay: float = 0.01) -> torch.optim.AdamW:
    """AdamW with the renderer in its own parameter group (half rate, stage 2)."""
    renderer, rest = [], []
    for name, p in model.named_parameters():
        (renderer if name.startswith("renderer.") else rest).append(p)
    return torch.optim.AdamW(
        [{"params": rest, "base_scale": 1.0}, {"params": renderer, "base_scale": 1.0}],
        lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=weight_decay)


def warmup_factor(step: int, warmup_steps: int) -> float:
    """Linear ramp from 1/warmup to 1 over the first ``warmup_steps`` steps."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, (step + 1) / warmup_steps)


def train_step(model: FaceFlowModel, batch: TrainingBatch, optimizer: torch.optim.Optimizer,
               stage: int, step: int, lr: float, warmup_steps: int = 0,
               weights: LossWeights | None = None,
               perceptual: PerceptualStub | None = None) -> dict:
    """One optimizer update; returns the breakdown as plain floats."""
    scale = warmup_factor(step, warmup_steps)
    renderer_scale = 0.5 if stage == 2 else 1.0
    optimizer.param_groups[0]["lr"] = lr * scale
    optimizer.param_groups[1]["lr"] = lr * scale * renderer_scale
    total, breakdown = forward_batch(model, batch, stage, weights, perceptual)
    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss at step {step}", where=step)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in breakdown.items()}


LOSS_CSV_COLUMNS = ("step", "total", "expr", "jaw", "eye", "rot", "trans",
                    "smooth", "l1", "perc")


def write_loss_csv(path, history):
    """Per-step loss rows; terms absent from a stage are written as 0."""
    lines = [",".join(LOSS_CSV_COLUMNS)]
    for i, row in enumerate(history):
        vals = [str(i)] + [repr(float(row.get(k, 0.0))) for k in LOSS_CSV_COLUMNS[1:]]
        lines.append(",".join(vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class TrainingConfig:
    """Run settings read from a JSON file."""

    stage: int = 1
    steps: int = 2000
    warmup_steps: int = 100
    lr: float = 2e-3
    batch_size: int = 16
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if min(self.steps, self.batch_size) < 1 or self.warmup_steps < 0:
            raise ConfigError("steps and batch_size must be positive, warmup nonnegative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


def load_training_config(path) -> TrainingConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read training config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: training config must be a JSON object")
    weight_overrides = raw.pop("weights", {})
    known = {f.name for f in fields(TrainingConfig)} - {"weights"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown training config keys {sorted(unknown)}")
    try:
        weights = replace(LossWeights(), **weight_overrides)
    except TypeError as e:
        raise ConfigError(f"{path}: bad weight override: {e}") from e
    return TrainingConfig(weights=weights, **raw)


# ---------------------------------------------------------------------------
# gradient verification


def compute_gradients(loss: torch.Tensor, named_params) -> dict:
    """Reverse-mode gradients by name; unused parameters get zeros."""
    pairs = list(named_params)
    grads = torch.autograd.grad(loss, [p for _, p in pairs], allow_unused=True)
    return {name: (torch.zeros_like(p) if g is None else g)
            for (name, p), g in zip(pairs, grads)}


def perturb_zero_parameters(module: nn.Module, std: float = 0.05,
                            generator: torch.Generator | None = None):
    """Add noise to all-zero parameter tensors.

    Zero-initialized gates and modulators sit at a point where some gradient
    paths vanish identically; verification runs move off it first.
    """
    with torch.no_grad():
        for p in module.parameters():
            if p.requires_grad and torch.all(p == 0):
                p.add_(torch.empty_like(p).normal_(0.0, std, generator=generator))


_FAMILY_RULES = (
    ("film", "film"),
    ("qkv", "attention"), ("attn_out", "attention"), ("cross_", "attention"),
    ("ffn_", "ffn"),
    ("ada", "adaln"),
    ("packer", "history_packer"),
    ("logits", "fusion_logits"),
    ("align_", "alignment_conv"),
    ("renderer", "renderer"),
)


def parameter_family(name: str) -> str:
    for needle, family in _FAMILY_RULES:
        if needle in name:
            return family
    return "projection"


@dataclass
class GradEntry:
    name: str
    index: int
    autograd: float
    finite_diff: float
    rel_err: float


@dataclass
class GradientReport:
    entries: list
    threshold: float

    @property
    def max_rel_err(self) -> float:
        return max(e.rel_err for e in self.entries)

    @property
    def families(self) -> set:
        return {parameter_family(e.name) for e in self.entries}

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


def finite_difference_check(loss_fn, module: nn.Module, per_param: int = 3,
                            h: float = 3e-5, threshold: float = 1e-4,
                            seed: int = 0, families: set | None = None) -> GradientReport:
    """Compare reverse-mode gradients against central differences.

    ``loss_fn`` must rebuild the loss from the module's current parameters on
    every call.  ``per_param`` flat indices are sampled per tensor; ``families``
    restricts which parameter families are probed.  The default step keeps
    float64 roundoff below the threshold even where gradients are ~1e-6; the
    losses are smooth enough that truncation error stays orders below it.
    """
    rng = np.random.default_rng(seed)
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if families is not None:
        params = [(n, p) for n, p in params if parameter_family(n) in families]
    grads = compute_gradients(loss_fn(), params)
    entries = []
    for name, p in params:
        count = min(per_param, p.numel())
        idx = rng.choice(p.numel(), size=count, replace=False)
        flat = p.detach().view(-1)
        for i in idx:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
            plus = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] = orig - h
            minus = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] = orig
            fd = (plus - minus) / (2.0 * h)
            ad = float(grads[name].view(-1)[i])
            # Central differences carry ~1e-11 absolute roundoff at the
            # default step, so entries below this scale are compared
            # absolutely; a pure ratio would spike on numerically-zero
            # gradients that agree to machine precision.
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
            entries.append(GradEntry(name, i, ad, fd, rel))
    return GradientReport(entries, threshold)

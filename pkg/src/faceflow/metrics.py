"""Evaluation metrics over coefficient traces and rendered frames.

Geometric metrics (lip error, upper-face dynamics deviation, mouth-opening
difference) work on pose-free vertices, so adding identical global motion to
both inputs cannot change them.  Beat alignment compares head-rotation rhythm
through a symmetric Gaussian-kernel nearest-beat score.  The diversity score
fits seeded k-means per semantic group on reference frames and takes the
Shannon entropy of generated assignments.  Image metrics are plain PSNR (peak
1.0, capped) and Gaussian-window SSIM over valid positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .motion import (
    EXPR,
    FRAME_RATE,
    JAW,
    LIP_VERTICES,
    MOTION_DIM,
    ROT,
    UPPER_VERTICES,
    BlendshapeModel,
    MotionWindow,
    geodesic_angle,
    window_vertices,
)

BA_SIGMA_SECONDS = 0.1
BEAT_THRESHOLD_STD = 0.5
BEAT_MIN_SEPARATION = 4
SID_CLUSTERS = 10
SID_EPSILON = 1e-8
KMEANS_ITERATIONS = 50
PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

SID_GROUPS = (("jaw", JAW), ("exp50", slice(EXPR.start, EXPR.start + 50)), ("rot", ROT))


def _coeff_array(window) -> np.ndarray:
    coeffs = window.coeffs if isinstance(window, MotionWindow) else np.asarray(window, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[1] != MOTION_DIM:
        raise ValueError(f"coefficients must be (T, {MOTION_DIM})")
    return coeffs


def _paired(pred, gt):
    a, b = _coeff_array(pred), _coeff_array(gt)
    if a.shape != b.shape:
        raise ValueError(f"prediction and reference lengths differ: {a.shape[0]} vs {b.shape[0]}")
    return a, b


# ---------------------------------------------------------------------------
# geometric metrics (pose-free by construction)


def lve(pred, gt, model: BlendshapeModel) -> float:
    """Mean over frames of the largest lip-vertex L2 error."""
    a, b = _paired(pred, gt)
    va = window_vertices(a, model)[:, LIP_VERTICES]
    vb = window_vertices(b, model)[:, LIP_VERTICES]
    return float(np.linalg.norm(va - vb, axis=2).max(axis=1).mean())


def fdd(pred, gt, model: BlendshapeModel) -> float:
    """Mean absolute difference of per-vertex temporal motion deviation.

    Motion is taken relative to the first frame; the deviation is the
    population standard deviation of those relative offsets over time.
    """
    a, b = _paired(pred, gt)
    if a.shape[0] < 2:
        raise ValueError("deviation needs at least 2 frames")

    def sigma(coeffs):
        v = window_vertices(coeffs, model)[:, UPPER_VERTICES]
        m = v - v[:1]
        dev = m - m.mean(axis=0, keepdims=True)
        return np.sqrt((dev**2).sum(axis=2).mean(axis=0))

    return float(np.abs(sigma(a) - sigma(b)).mean())


def mouth_opening(coeffs, model: BlendshapeModel) -> np.ndarray:
    """Per-frame distance between the lower and upper inner-lip landmarks."""
    v = window_vertices(_coeff_array(coeffs), model)
    lower = v[:, model.landmark_indices[66]]
    upper = v[:, model.landmark_indices[62]]
    return np.linalg.norm(lower - upper, axis=1)


def mod(pred, gt, model: BlendshapeModel) -> float:
    """Mean absolute mouth-opening difference."""
    a, b = _paired(pred, gt)
    return float(np.abs(mouth_opening(a, model) - mouth_opening(b, model)).mean())


# ---------------------------------------------------------------------------
# beat alignment


@dataclass(frozen=True)
class BeatSequence:
    """Beat timestamps in seconds, strictly increasing."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("beat times must be strictly increasing")
        object.__setattr__(self, "times", t)

    def __len__(self) -> int:
        return self.times.size


def angular_speed(rot: np.ndarray, fps: float = FRAME_RATE) -> np.ndarray:
    """Per-transition head angular speed in rad/s, length T-1."""
    rot = np.asarray(rot, dtype=np.float64)
    if rot.ndim != 2 or rot.shape[1] != 3:
        raise ValueError("rotation sequence must be (T, 3)")
    if rot.shape[0] < 2:
        raise ValueError("angular speed needs at least 2 frames")
    return np.array([geodesic_angle(rot[i], rot[i + 1]) * fps for i in range(len(rot) - 1)])


def extract_beats(rot: np.ndarray, fps: float = FRAME_RATE,
                  threshold_scale: float = BEAT_THRESHOLD_STD,
                  min_separation: int = BEAT_MIN_SEPARATION) -> BeatSequence:
    """Strict local speed maxima above mean + scale*std, thinned greedily.

    Peaks are kept tallest-first with at least ``min_separation`` transitions
    between survivors.  The timestamp of transition i is (i + 0.5)/fps.
    """
    speed = angular_speed(rot, fps)
    thresh = speed.mean() + threshold_scale * speed.std()
    candidates = [i for i in range(1, len(speed) - 1)
                  if speed[i] > speed[i - 1] and speed[i] > speed[i + 1] and speed[i] > thresh]
    kept: list[int] = []
    for i in sorted(candidates, key=lambda j: (-speed[j], j)):
        if all(abs(i - j) >= min_separation for j in kept):
            kept.append(i)
    return BeatSequence(np.array([(i + 0.5) / fps for i in sorted(kept)]))


def _one_sided(src: np.ndarray, dst: np.ndarray, sigma: float) -> float:
    total = 0.0
    for b in src:
        nearest = np.min((b - dst) ** 2)
        total += math.exp(-nearest / (2.0 * sigma**2))
    return total / len(src)


def beat_alignment_detail(pred_rot, gt_rot, fps: float = FRAME_RATE,
                          sigma: float = BA_SIGMA_SECONDS):
    """(score, pred beats, gt beats, empty flag) for rotation sequences."""
    pred_beats = extract_beats(np.asarray(pred_rot, dtype=np.float64), fps)
    gt_beats = extract_beats(np.asarray(gt_rot, dtype=np.float64), fps)
    if len(pred_beats) == 0 or len(gt_beats) == 0:
        return 0.0, pred_beats, gt_beats, True
    score = 0.5 * (_one_sided(pred_beats.times, gt_beats.times, sigma)
                   + _one_sided(gt_beats.times, pred_beats.times, sigma))
    return float(score), pred_beats, gt_beats, False


def beat_alignment(pred_rot, gt_rot, fps: float = FRAME_RATE,
                   sigma: float = BA_SIGMA_SECONDS) -> float:
    """Symmetric Gaussian-kernel nearest-beat agreement in [0, 1]."""
    return beat_alignment_detail(pred_rot, gt_rot, fps, sigma)[0]


# ---------------------------------------------------------------------------
# diversity


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [data[rng.integers(len(data))]]
    for _ in range(1, k):
        d2 = np.min([((data - c) ** 2).sum(axis=1) for c in centroids], axis=0)
        total = d2.sum()
        if total <= 0:
            centroids.append(data[rng.integers(len(data))])
            continue
        centroids.append(data[rng.choice(len(data), p=d2 / total)])
    return np.stack(centroids)


def kmeans_fit(data: np.ndarray, k: int, seed: int = 0,
               iterations: int = KMEANS_ITERATIONS) -> np.ndarray:
    """Seeded Lloyd's iterations from k-means++-style starts; (k, D) centroids.

    An emptied cluster keeps its previous centroid.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("data must be (N, D)")
    if k < 1 or k > len(data):
        raise ValueError(f"cluster count {k} must be in [1, {len(data)}]")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(data, k, rng)
    for _ in range(iterations):
        labels = kmeans_assign(data, centroids)
        for c in range(k):
            members = data[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return centroids


def kmeans_assign(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((np.asarray(data, dtype=np.float64)[:, None] - centroids[None]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


@dataclass(frozen=True)
class ClusterModel:
    """Per-group k-means centroids fitted on reference frames."""

    centroids: dict
    epsilon: float = SID_EPSILON

    def __post_init__(self):
        for name, c in self.centroids.items():
            if not np.all(np.isfinite(c)):
                raise ValueError(f"centroids for group {name} are not finite")
            if len(c) < 1:
                raise ValueError(f"group {name} needs at least one centroid")


def fit_clusters(gt_frames, k: int = SID_CLUSTERS, seed: int = 0) -> ClusterModel:
    frames = _coeff_array(gt_frames)
    return ClusterModel({name: kmeans_fit(frames[:, sl], k, seed=seed)
                         for name, sl in SID_GROUPS})


def assignment_entropy(labels: np.ndarray, k: int, epsilon: float = SID_EPSILON) -> float:
    """Shannon entropy in bits of a cluster-assignment histogram."""
    counts = np.bincount(np.asarray(labels), minlength=k)
    p = counts / counts.sum()
    return float(-(p * np.log2(p + epsilon)).sum())


def sid(generated, gt, k: int = SID_CLUSTERS, seed: int = 0,
        clusters: ClusterModel | None = None) -> float:
    """Mean assignment entropy of generated frames over the semantic groups."""
    gen = _coeff_array(generated)
    model = clusters or fit_clusters(gt, k=k, seed=seed)
    scores = []
    for name, sl in SID_GROUPS:
        labels = kmeans_assign(gen[:, sl], model.centroids[name])
        scores.append(assignment_entropy(labels, len(model.centroids[name]), model.epsilon))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# image metrics


def _image_stack(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError("images must be (H, W) or (N, H, W)")
    return a


def _image_pair(a, b):
    x, y = _image_stack(a), _image_stack(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(img_a, img_b, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio against peak 1.0, frame-averaged, capped."""
    a, b = _image_pair(img_a, img_b)
    vals = []
    for fa, fb in zip(a, b):
        mse = float(((fa - fb) ** 2).mean())
        vals.append(cap if mse == 0.0 else min(cap, -10.0 * math.log10(mse)))
    return float(np.mean(vals))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(img_a, img_b) -> float:
    """Gaussian-window structural similarity over valid window positions."""
    a, b = _image_pair(img_a, img_b)
    if a.shape[-2] < SSIM_WINDOW or a.shape[-1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    kernel = gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2

    def windows(img):
        view = np.lib.stride_tricks.sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
        return np.tensordot(view, kernel, axes=([2, 3], [0, 1])), view

    vals = []
    for fa, fb in zip(a, b):
        mu_a, wa = windows(fa)
        mu_b, wb = windows(fb)
        var_a = np.tensordot(wa * wa, kernel, axes=([2, 3], [0, 1])) - mu_a**2
        var_b = np.tensordot(wb * wb, kernel, axes=([2, 3], [0, 1])) - mu_b**2
        cov = np.tensordot(wa * wb, kernel, axes=([2, 3], [0, 1])) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class MetricReport:
    """Full metric suite with fixed key names for the text format."""

    lve: float
    fdd: float
    mod: float
    ba: float
    sid: float
    psnr: float
    ssim: float
    ba_beats_empty: bool = False

    def __post_init__(self):
        for name in ("lve", "fdd", "mod"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not (0.0 <= self.ba <= 1.0):
            raise ValueError("ba must lie in [0, 1]")
        # a one-cluster histogram scores exactly -log2(1 + epsilon), slightly
        # below zero by the stability constant
        if self.sid < -1e-6:
            raise ValueError("sid must be nonnegative up to the entropy epsilon")
        if not (-1.0 <= self.ssim <= 1.0):
            raise ValueError("ssim must lie in [-1, 1]")


def compute_report(pred, gt, model: BlendshapeModel, pred_images, gt_images,
                   k: int = SID_CLUSTERS, seed: int = 0) -> MetricReport:
    a, b = _paired(pred, gt)
    ba, _, _, empty = beat_alignment_detail(a[:, ROT], b[:, ROT])
    return MetricReport(
        lve=lve(a, b, model),
        fdd=fdd(a, b, model),
        mod=mod(a, b, model),
        ba=ba,
        sid=sid(a, b, k=k, seed=seed),
        psnr=psnr(pred_images, gt_images),
        ssim=ssim(pred_images, gt_images),
        ba_beats_empty=empty,
    )


def format_report(report: MetricReport) -> str:
    lines = []
    for f in fields(MetricReport):
        value = getattr(report, f.name)
        lines.append(f"{f.name}: {value if isinstance(value, bool) else repr(float(value))}")
    return "\n".join(lines) + "\n"

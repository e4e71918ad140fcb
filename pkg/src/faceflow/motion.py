"""FLAME-coefficient motion representation and synthetic face geometry.

A motion frame is a 115-dim coefficient vector laid out as

    [expression(100) | jaw(3) | eyes(6) | rotation(3) | translation(3)]

where jaw, the two eyeballs, and the global head rotation are axis-angle
vectors in radians and translation is in scene units.  Sequences run at a
fixed 25 Hz.  A seeded synthetic blendshape model stands in for real head
topology so that vertex- and landmark-based metrics are computable and
reproducible.

Motion traces serialize as CSV rows

    frame_index,time_ms,state,c0,...,c114

with ``state`` the per-frame listening(-1)/speaking(+1) label and the 115
coefficients in the layout order above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FRAME_RATE = 25.0
FRAME_MS = 40

EXPR_DIM = 100
JAW_DIM = 3
EYE_DIM = 6
ROT_DIM = 3
TRANS_DIM = 3
MOTION_DIM = EXPR_DIM + JAW_DIM + EYE_DIM + ROT_DIM + TRANS_DIM  # 115

EXPR = slice(0, 100)
JAW = slice(100, 103)
EYES = slice(103, 109)
ROT = slice(109, 112)
TRANS = slice(112, 115)
POSE = slice(109, 115)  # rotation + translation

SHAPE_DIM = 300
SHAPE_COND_DIM = 100  # leading slice used for conditioning

SPEAK = 1
LISTEN = -1

# Reference ground-truth motion magnitudes reported for the original
# large-scale dataset (opaque reporting units); used only for printed
# comparisons, never asserted against synthetic data.
REFERENCE_RAW_ROT_MAGNITUDE = 0.61
REFERENCE_RAW_TRANS_MAGNITUDE = 0.81


def _as_vec(x, n: int, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {v.shape}")
    return v


@dataclass
class MotionFrame:
    """One 115-dim coefficient frame."""

    expression: np.ndarray
    jaw: np.ndarray
    eyes: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.expression = _as_vec(self.expression, EXPR_DIM, "expression")
        self.jaw = _as_vec(self.jaw, JAW_DIM, "jaw")
        self.eyes = _as_vec(self.eyes, EYE_DIM, "eyes")
        self.rotation = _as_vec(self.rotation, ROT_DIM, "rotation")
        self.translation = _as_vec(self.translation, TRANS_DIM, "translation")

    @classmethod
    def zeros(cls) -> "MotionFrame":
        return cls.from_vector(np.zeros(MOTION_DIM))

    @classmethod
    def from_vector(cls, vec, check: bool = True) -> "MotionFrame":
        v = _as_vec(vec, MOTION_DIM, "motion vector")
        frame = cls(v[EXPR], v[JAW], v[EYES], v[ROT], v[TRANS])
        if check:
            frame.validate()
        return frame

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.expression, self.jaw, self.eyes, self.rotation, self.translation]
        )

    def validate(self):
        v = self.to_vector()
        if not np.all(np.isfinite(v)):
            raise ValueError("motion frame contains non-finite values")
        # axis-angle parts must stay inside one rotation
        for name, aa in (
            ("jaw", self.jaw),
            ("left eye", self.eyes[:3]),
            ("right eye", self.eyes[3:]),
            ("rotation", self.rotation),
        ):
            if np.linalg.norm(aa) >= math.pi:
                raise ValueError(f"{name} axis-angle norm must be < pi")


@dataclass
class MotionWindow:
    """A fixed-length run of motion frames at 25 Hz, stored as a (T, 115) array."""

    coeffs: np.ndarray
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != MOTION_DIM:
            raise ValueError(f"window must be (T, {MOTION_DIM}), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("window contains non-finite values")
        self.coeffs = c

    def __len__(self) -> int:
        return self.coeffs.shape[0]

    def frame(self, i: int, check: bool = False) -> MotionFrame:
        return MotionFrame.from_vector(self.coeffs[i], check=check)

    @classmethod
    def from_frames(cls, frames) -> "MotionWindow":
        return cls(np.stack([f.to_vector() for f in frames]))


def check_states(states, length: int | None = None) -> np.ndarray:
    """Validate a +/-1 listening/speaking sequence and return it as int8."""
    s = np.asarray(states)
    if s.ndim != 1:
        raise ValueError("state sequence must be one-dimensional")
    if not np.all(np.isin(s, (LISTEN, SPEAK))):
        raise ValueError("states must be -1 (listening) or +1 (speaking)")
    if length is not None and s.shape[0] != length:
        raise ValueError(f"state sequence length {s.shape[0]} != {length}")
    return s.astype(np.int8)


@dataclass
class AvatarIdentity:
    """Shared identity: 300 shape coefficients plus a reference motion frame."""

    shape: np.ndarray
    reference_frame: MotionFrame = field(default_factory=MotionFrame.zeros)

    def __post_init__(self):
        self.shape = _as_vec(self.shape, SHAPE_DIM, "shape")
        if not np.all(np.isfinite(self.shape)):
            raise ValueError("shape contains non-finite values")

    @classmethod
    def neutral(cls) -> "AvatarIdentity":
        return cls(np.zeros(SHAPE_DIM))

    @property
    def shape_cond(self) -> np.ndarray:
        """Leading 100 shape coefficients used for conditioning."""
        return self.shape[:SHAPE_COND_DIM]


# ---------------------------------------------------------------------------
# rotations


def _axis_angle_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for an axis-angle vector."""
    theta = np.linalg.norm(r)
    w = math.cos(0.5 * theta)
    if theta < 1e-12:
        # sin(theta/2)/theta -> 1/2 as theta -> 0
        s = 0.5 - theta * theta / 48.0
    else:
        s = math.sin(0.5 * theta) / theta
    return np.array([w, r[0] * s, r[1] * s, r[2] * s])


def geodesic_angle(r1, r2) -> float:
    """SO(3) geodesic angle in [0, pi] between two axis-angle rotations.

    Computed through the relative unit quaternion with atan2, which stays
    accurate near both 0 and pi (the trace formula loses half the digits
    near 0).
    """
    a = _as_vec(r1, 3, "r1")
    b = _as_vec(r2, 3, "r2")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("rotation vectors must be finite")
    qa = _axis_angle_to_quat(a)
    qb = _axis_angle_to_quat(b)
    # relative rotation qa^-1 * qb; conjugate inverts a unit quaternion.
    # Terms are grouped as pairwise differences so identical inputs cancel
    # exactly and the self-distance is 0.0, not rounding noise.
    w = qa[0] * qb[0] + qa[1] * qb[1] + qa[2] * qb[2] + qa[3] * qb[3]
    x = (qa[0] * qb[1] - qa[1] * qb[0]) + (qa[3] * qb[2] - qa[2] * qb[3])
    y = (qa[0] * qb[2] - qa[2] * qb[0]) + (qa[1] * qb[3] - qa[3] * qb[1])
    z = (qa[0] * qb[3] - qa[3] * qb[0]) + (qa[2] * qb[1] - qa[1] * qb[2])
    return 2.0 * math.atan2(math.hypot(x, math.hypot(y, z)), abs(w))


def axis_angle_to_matrix(r) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (Rodrigues)."""
    r = _as_vec(r, 3, "axis-angle")
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        a, b = 1.0, 0.5
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / (theta * theta)
    kx, ky, kz = r
    k = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + a * k + b * (k @ k)


# ---------------------------------------------------------------------------
# motion magnitude


@dataclass(frozen=True)
class NormalizationSpec:
    """Min-max bounds mapping raw per-frame displacements to [0, 1].

    Defaults apply when no dataset statistics are available; ``fit`` clamps
    the upper bound at a high percentile of training raw magnitudes so that
    outliers do not flatten the usable range.
    """

    rot_max: float = 2.0
    trans_max: float = 4.0

    def normalize(self, rot_raw: float, trans_raw: float) -> tuple[float, float]:
        r = min(max(rot_raw / self.rot_max, 0.0), 1.0)
        t = min(max(trans_raw / self.trans_max, 0.0), 1.0)
        return r, t

    @classmethod
    def fit(cls, windows, percentile: float = 99.0) -> "NormalizationSpec":
        rots, trans = [], []
        for w in windows:
            m = compute_magnitude(w, None)
            rots.append(m.rot_raw)
            trans.append(m.trans_raw)
        rot_max = float(np.percentile(rots, percentile))
        trans_max = float(np.percentile(trans, percentile))
        return cls(rot_max=max(rot_max, 1e-9), trans_max=max(trans_max, 1e-9))


@dataclass(frozen=True)
class MagnitudePair:
    """Normalized motion-magnitude guidance plus its raw pre-normalization values."""

    rot_mag: float
    trans_mag: float
    rot_raw: float = 0.0
    trans_raw: float = 0.0

    def __post_init__(self):
        for v in (self.rot_mag, self.trans_mag):
            if not (0.0 <= v <= 1.0):
                raise ValueError("normalized magnitudes must lie in [0, 1]")


def compute_magnitude(window, norm: NormalizationSpec | None) -> MagnitudePair:
    """Mean successive-frame rotational (geodesic) and translational displacement.

    Returns both raw means and the min-max normalized pair; with ``norm=None``
    the default bounds are used.
    """
    coeffs = window.coeffs if isinstance(window, MotionWindow) else np.asarray(window, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[1] != MOTION_DIM:
        raise ValueError(f"window must be (T, {MOTION_DIM})")
    if coeffs.shape[0] < 2:
        raise ValueError("magnitude needs at least 2 frames")
    rot = coeffs[:, ROT]
    trans = coeffs[:, TRANS]
    angles = [geodesic_angle(rot[i], rot[i + 1]) for i in range(len(coeffs) - 1)]
    rot_raw = float(np.mean(angles))
    trans_raw = float(np.mean(np.linalg.norm(np.diff(trans, axis=0), axis=1)))
    spec = norm or NormalizationSpec()
    rot_mag, trans_mag = spec.normalize(rot_raw, trans_raw)
    return MagnitudePair(rot_mag, trans_mag, rot_raw, trans_raw)


# ---------------------------------------------------------------------------
# synthetic blendshape geometry

# 68-landmark table (conventional face-landmark numbering) mapped onto the
# 128 synthetic vertices: jawline 0-16 -> 16..32, brows 17-26 -> 64..73,
# nose 27-35 -> 33..41, eyes 36-47 -> 74..85, outer mouth 48-59 -> 0..11,
# inner mouth 60-67 -> the lip-region picks below (62 upper / 66 lower).
LANDMARK_TABLE = tuple(
    list(range(16, 33))          # 0-16 jawline
    + list(range(64, 74))        # 17-26 brows (upper region)
    + list(range(33, 42))        # 27-35 nose
    + list(range(74, 86))        # 36-47 eyes (upper region)
    + list(range(0, 12))         # 48-59 outer mouth (lip region)
    + [12, 3, 13, 6, 14, 9, 15, 0]  # 60-67 inner mouth (lip region)
)

LIP_VERTICES = tuple(range(0, 16))
UPPER_VERTICES = tuple(range(64, 96))


@dataclass
class BlendshapeModel:
    """Linear synthetic head: template + expression and jaw offset bases.

    Global rotation/translation are intentionally not part of the vertex map;
    the metrics that consume vertices evaluate local articulation only.
    """

    template_vertices: np.ndarray       # (V, 3)
    expression_basis: np.ndarray        # (V, 3, 100)
    jaw_basis: np.ndarray               # (V, 3, 3)
    lip_region: tuple = LIP_VERTICES
    upper_region: tuple = UPPER_VERTICES
    landmark_indices: tuple = LANDMARK_TABLE

    def __post_init__(self):
        v = self.template_vertices.shape[0]
        if self.template_vertices.shape != (v, 3):
            raise ValueError("template must be (V, 3)")
        if self.expression_basis.shape != (v, 3, EXPR_DIM):
            raise ValueError("expression basis must be (V, 3, 100)")
        if self.jaw_basis.shape != (v, 3, JAW_DIM):
            raise ValueError("jaw basis must be (V, 3, 3)")
        for arr in (self.template_vertices, self.expression_basis, self.jaw_basis):
            if not np.all(np.isfinite(arr)):
                raise ValueError("blendshape arrays must be finite")
        if set(self.lip_region) & set(self.upper_region):
            raise ValueError("lip and upper regions must be disjoint")
        if len(self.landmark_indices) != 68:
            raise ValueError("landmark table must have 68 entries")
        if min(self.landmark_indices) < 0 or max(self.landmark_indices) >= v:
            raise ValueError("landmark indices out of range")

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]


def make_blendshape_model(seed: int = 7, num_vertices: int = 128) -> BlendshapeModel:
    """Deterministic synthetic geometry drawn from a seeded Gaussian.

    Basis scales keep coefficient-driven displacements small against the
    unit-scale template so rendered landmarks stay in frame.
    """
    rng = np.random.default_rng(seed)
    template = rng.normal(size=(num_vertices, 3))
    expr_basis = 0.02 * rng.normal(size=(num_vertices, 3, EXPR_DIM))
    jaw_basis = 0.15 * rng.normal(size=(num_vertices, 3, JAW_DIM))
    return BlendshapeModel(template, expr_basis, jaw_basis)


def coefficients_to_vertices(frame, model: BlendshapeModel) -> np.ndarray:
    """Map one frame's expression + jaw coefficients to (V, 3) vertices.

    Deterministic linear map; global rotation/translation are not applied.
    """
    if isinstance(frame, MotionFrame):
        expr, jaw = frame.expression, frame.jaw
    else:
        vec = _as_vec(frame, MOTION_DIM, "motion vector")
        expr, jaw = vec[EXPR], vec[JAW]
    return (
        model.template_vertices
        + model.expression_basis @ expr
        + model.jaw_basis @ jaw
    )


def window_vertices(window, model: BlendshapeModel) -> np.ndarray:
    """Vertices for every frame of a window, shape (T, V, 3)."""
    coeffs = window.coeffs if isinstance(window, MotionWindow) else np.asarray(window, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[1] != MOTION_DIM:
        raise ValueError(f"window must be (T, {MOTION_DIM})")
    return (
        model.template_vertices[None]
        + np.einsum("vck,tk->tvc", model.expression_basis, coeffs[:, EXPR])
        + np.einsum("vck,tk->tvc", model.jaw_basis, coeffs[:, JAW])
    )


# ---------------------------------------------------------------------------
# trace files

TRACE_HEADER = "# frame_index,time_ms,state," + ",".join(f"c{i}" for i in range(MOTION_DIM))


def format_trace_rows(coeffs: np.ndarray, states) -> str:
    """Render trace rows deterministically (shortest round-trip float repr)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    s = check_states(states, coeffs.shape[0])
    lines = [TRACE_HEADER]
    for i in range(coeffs.shape[0]):
        vals = ",".join(repr(float(v)) for v in coeffs[i])
        lines.append(f"{i},{i * FRAME_MS},{int(s[i])},{vals}")
    return "\n".join(lines) + "\n"


def write_trace(path, coeffs: np.ndarray, states):
    with open(path, "w") as f:
        f.write(format_trace_rows(coeffs, states))


def read_trace(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a trace CSV; returns (coeffs (N,115), states (N,))."""
    coeffs, states = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 3 + MOTION_DIM:
                raise ValueError(f"{path}: line {lineno}: expected {3 + MOTION_DIM} fields, got {len(parts)}")
            states.append(int(parts[2]))
            coeffs.append([float(p) for p in parts[3:]])
    if not coeffs:
        raise ValueError(f"{path}: empty trace")
    return np.asarray(coeffs, dtype=np.float64), check_states(np.asarray(states))

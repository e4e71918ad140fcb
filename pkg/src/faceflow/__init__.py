"""faceflow: streaming speech-to-3D-facial-motion engine.

Few-step rectified-flow sampling of FLAME-style coefficient windows from
causal audio, with listening/speaking turn-taking, a synthetic
differentiable renderer for two-stage training, and a formal metric suite.
"""

__version__ = "0.1.0"

from .engine import EngineConfig, StreamingEngine, run_bench, run_scenario
from .metrics import MetricReport, compute_report, format_report
from .model import ConditionSet, ModelConfig, VelocityField
from .motion import (
    FRAME_RATE,
    MOTION_DIM,
    AvatarIdentity,
    BlendshapeModel,
    MagnitudePair,
    MotionFrame,
    MotionWindow,
    NormalizationSpec,
    compute_magnitude,
    geodesic_angle,
    make_blendshape_model,
)
from .scenario import Scenario, load_scenario, parse_scenario
from .training import FaceFlowModel

__all__ = [
    "FRAME_RATE",
    "MOTION_DIM",
    "AvatarIdentity",
    "BlendshapeModel",
    "ConditionSet",
    "EngineConfig",
    "FaceFlowModel",
    "MagnitudePair",
    "MetricReport",
    "ModelConfig",
    "MotionFrame",
    "MotionWindow",
    "NormalizationSpec",
    "Scenario",
    "StreamingEngine",
    "VelocityField",
    "compute_magnitude",
    "compute_report",
    "format_report",
    "geodesic_angle",
    "load_scenario",
    "make_blendshape_model",
    "parse_scenario",
    "run_bench",
    "run_scenario",
]

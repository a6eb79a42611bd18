"""patchcap: patch-based image caption orchestration.

Splits an image into four relation-refined quadrant patches plus one
semantic patch, generates candidate descriptions per patch through
pluggable model backends, filters candidate sentences into Same /
Contradictory / Unique classes with image-text score gating, and
hierarchically merges everything into one detailed, low-hallucination
caption. Ships with deterministic mock backends and a synthetic benchmark
so the whole decision logic is testable without any model weights.
"""

from .backends import BackendHub, BackendRole, CallLedger, ItmScore
from .config import BackendSpec, PipelineMode, RunConfig, build_hub
from .errors import PatchCapError
from .geometry import BBox, ImageExtent, ObjectProposal, Patch, PatchKind
from .imaging import RegionPayload, SourceImage, crop_region, load_image
from .pipeline import BatchReport, CaptionRecord, run_batch, run_image
from .synthbench import ErrorModel, SyntheticScene, generate_scene, run_bench

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "BackendHub",
    "BackendRole",
    "BackendSpec",
    "BatchReport",
    "CallLedger",
    "CaptionRecord",
    "ErrorModel",
    "ImageExtent",
    "ItmScore",
    "ObjectProposal",
    "Patch",
    "PatchCapError",
    "PatchKind",
    "PipelineMode",
    "RegionPayload",
    "RunConfig",
    "SourceImage",
    "SyntheticScene",
    "__version__",
    "build_hub",
    "crop_region",
    "generate_scene",
    "load_image",
    "run_batch",
    "run_bench",
    "run_image",
]

"""Axis-aligned bounding-box math and the two patch-division strategies.

Boxes are integer pixel rectangles with half-open intervals
[x0, x1) x [y0, y1), origin at the top-left corner, y growing downward.
An image is divided into four quadrant-anchored spatial patches (each
expanded to contain the detector objects assigned to it) plus one
semantic patch covering the objects that match the primary subject of
the image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

from .errors import DegenerateImageError, EmptyInputError

QUADRANT_NAMES = ("TL", "TR", "BL", "BR")

ADJACENT_PAIRS = (("TL", "TR"), ("BL", "BR"), ("TL", "BL"), ("TR", "BR"))


@dataclass(frozen=True)
class BBox:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box: {(self.x0, self.y0, self.x1, self.y1)}")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"negative coordinates: {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def contains(self, other: "BBox") -> bool:
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and other.x1 <= self.x1
            and other.y1 <= self.y1
        )

    def clip_to(self, extent: "ImageExtent") -> "BBox":
        return BBox(
            max(0, self.x0),
            max(0, self.y0),
            min(extent.width, self.x1),
            min(extent.height, self.y1),
        )

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class ImageExtent:
    """Pixel dimensions of an image."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"empty extent: {self.width}x{self.height}")

    def as_box(self) -> BBox:
        return BBox(0, 0, self.width, self.height)

    def contains(self, box: BBox) -> bool:
        return self.as_box().contains(box)


@dataclass(frozen=True)
class ObjectProposal:
    """Detector output: a labeled box with a confidence score."""

    label: str
    box: BBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of range: {self.confidence}")


class PatchKind(Enum):
    SPATIAL = "spatial"
    SEMANTIC = "semantic"
    GLOBAL = "global"


@dataclass(frozen=True)
class Patch:
    """One of the five regions submitted independently to the captioner."""

    kind: PatchKind
    box: BBox
    quadrant: Optional[str] = None  # "TL" | "TR" | "BL" | "BR" for spatial patches
    assigned_objects: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind is PatchKind.SPATIAL and self.quadrant not in QUADRANT_NAMES:
            raise ValueError(f"spatial patch needs a quadrant name, got {self.quadrant!r}")
        if self.kind is not PatchKind.SPATIAL and self.quadrant is not None:
            raise ValueError(f"{self.kind.value} patch must not carry a quadrant name")

    @property
    def name(self) -> str:
        return self.quadrant if self.kind is PatchKind.SPATIAL else self.kind.value


def intersection_area(a: BBox, b: BBox) -> int:
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    if w <= 0 or h <= 0:
        return 0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0.0 for disjoint boxes."""
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def coverage(inner: BBox, outer: BBox) -> float:
    """Fraction of ``inner`` that lies within ``outer`` (intersection / inner area)."""
    return intersection_area(inner, outer) / inner.area


def union_box(boxes: Sequence[BBox]) -> BBox:
    """Smallest box containing every input box."""
    if not boxes:
        raise EmptyInputError("union_box requires at least one box")
    return BBox(
        min(b.x0 for b in boxes),
        min(b.y0 for b in boxes),
        max(b.x1 for b in boxes),
        max(b.y1 for b in boxes),
    )


def quadrants(extent: ImageExtent) -> tuple[BBox, BBox, BBox, BBox]:
    """Split the extent at the floor midpoint into (TL, TR, BL, BR).

    The four boxes tile the extent exactly. Odd dimensions put the extra
    pixel column/row in the right/bottom quadrants.
    """
    if extent.width < 2 or extent.height < 2:
        raise DegenerateImageError(
            f"cannot divide a {extent.width}x{extent.height} image into quadrants"
        )
    mx = extent.width // 2
    my = extent.height // 2
    return (
        BBox(0, 0, mx, my),
        BBox(mx, 0, extent.width, my),
        BBox(0, my, mx, extent.height),
        BBox(mx, my, extent.width, extent.height),
    )


def refine_spatial_patches(
    extent: ImageExtent,
    proposals: Iterable[ObjectProposal],
    conf_threshold: float = 0.3,
    assign_threshold: float = 0.4,
    assign_metric: str = "coverage",
    expand_patches: bool = True,
) -> tuple[Patch, Patch, Patch, Patch]:
    """Relation-based spatial division: anchor four quadrants, then assign
    confident object proposals to every quadrant they sufficiently overlap
    and expand each quadrant box to contain its assigned objects.

    ``assign_metric`` selects how object/quadrant overlap is measured:
    ``coverage`` (intersection over object area, the default) or strict
    ``iou``. With no surviving proposals the plain quadrants are returned.
    """
    if assign_metric not in ("coverage", "iou"):
        raise ValueError(f"unknown assign_metric: {assign_metric!r}")
    quads = quadrants(extent)
    kept = [p for p in proposals if p.confidence >= conf_threshold]

    patches = []
    for name, quad in zip(QUADRANT_NAMES, quads):
        assigned: list[str] = []
        boxes = [quad]
        for prop in kept:
            score = (
                coverage(prop.box, quad)
                if assign_metric == "coverage"
                else iou(prop.box, quad)
            )
            if score > assign_threshold:
                assigned.append(prop.label)
                boxes.append(prop.box)
        box = union_box(boxes).clip_to(extent) if expand_patches else quad
        patches.append(
            Patch(kind=PatchKind.SPATIAL, box=box, quadrant=name, assigned_objects=tuple(assigned))
        )
    return tuple(patches)


def semantic_patch(
    extent: ImageExtent,
    proposals: Iterable[ObjectProposal],
    overlap_labels: Iterable[str],
) -> Optional[Patch]:
    """Semantics-based division: the union of proposal boxes whose label
    matches one of the subject labels selected upstream.

    Matching is case-insensitive exact match after whitespace trimming.
    Returns None when nothing matches, which makes the pipeline skip the
    semantic patch for this image.
    """
    wanted = {normalize_label(lbl) for lbl in overlap_labels}
    matched = [p for p in proposals if normalize_label(p.label) in wanted]
    if not matched:
        return None
    box = union_box([p.box for p in matched]).clip_to(extent)
    return Patch(
        kind=PatchKind.SEMANTIC,
        box=box,
        assigned_objects=tuple(p.label for p in matched),
    )


def normalize_label(label: str) -> str:
    return label.strip().lower()

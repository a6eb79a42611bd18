"""Image decoding and region cropping.

Two kinds of sources are supported behind one interface: real PNG/JPEG
images, and synthetic scene blobs (JSON documents carrying object layout
instead of pixels) used by the mock-backed benchmark. Crops of pixel
images are re-encoded as PNG so that identical (source, box) pairs always
produce identical payload bytes, which is what makes response caching by
digest sound.
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

from PIL import Image, UnidentifiedImageError

from .canonical import canonical_bytes, sha256_hex
from .errors import DecodeError, OutOfBoundsError
from .geometry import BBox, ImageExtent

SCENE_KEY = "synthetic_scene"

_SUPPORTED_FORMATS = {"PNG", "JPEG"}


@dataclass(frozen=True)
class SourceImage:
    """A decoded-once, immutable image source."""

    image_id: str
    data: bytes
    extent: ImageExtent
    content_digest: str
    scene: Optional[dict] = None  # populated for synthetic scene blobs

    @property
    def is_scene(self) -> bool:
        return self.scene is not None


@dataclass(frozen=True)
class RegionPayload:
    """A cropped region encoded for transmission to a backend."""

    image_id: str
    box: BBox
    encoded: str  # base64 text of the PNG crop (or scene.box blob)
    digest: str


def load_image(source: Union[str, Path, bytes], image_id: Optional[str] = None) -> SourceImage:
    """Load a PNG/JPEG file, raw image bytes, or a synthetic scene blob."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise DecodeError(f"cannot read image file {path}: {exc}") from exc
        if image_id is None:
            image_id = path.stem
    else:
        data = source

    scene = _try_parse_scene(data)
    if scene is not None:
        return _scene_image(data, scene, image_id)

    try:
        with Image.open(io.BytesIO(data)) as img:
            fmt = img.format
            if fmt not in _SUPPORTED_FORMATS:
                raise DecodeError(f"unsupported image format {fmt!r} (expected PNG or JPEG)")
            img.load()  # force full decode so truncated files fail here
            width, height = img.size
    except DecodeError:
        raise
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image bytes: {exc}") from exc

    digest = sha256_hex(data)
    return SourceImage(
        image_id=image_id or digest[:12],
        data=data,
        extent=ImageExtent(width, height),
        content_digest=digest,
    )


def crop_region(img: SourceImage, box: BBox) -> RegionPayload:
    """Pixel-exact crop of ``box``, re-encoded as base64 PNG.

    For scene-backed sources the payload is the scene document plus the
    requested box, so mock backends can filter objects by region.
    """
    if not img.extent.contains(box):
        raise OutOfBoundsError(
            f"box {box.as_tuple()} exceeds extent {img.extent.width}x{img.extent.height}"
        )
    if img.is_scene:
        blob = canonical_bytes({SCENE_KEY: img.scene, "box": list(box.as_tuple())})
        encoded = base64.b64encode(blob).decode("ascii")
    else:
        with Image.open(io.BytesIO(img.data)) as pil:
            crop = pil.crop(box.as_tuple())
            buf = io.BytesIO()
            crop.save(buf, format="PNG")
        encoded = base64.b64encode(buf.getvalue()).decode("ascii")
    return RegionPayload(
        image_id=img.image_id,
        box=box,
        encoded=encoded,
        digest=sha256_hex(encoded.encode("ascii")),
    )


def decode_payload(payload_b64: str) -> bytes:
    return base64.b64decode(payload_b64)


def parse_scene_payload(payload_b64: str) -> tuple[dict, BBox]:
    """Recover (scene, box) from a scene-backed region payload."""
    doc = json.loads(decode_payload(payload_b64))
    box = BBox(*doc["box"])
    return doc[SCENE_KEY], box


def _try_parse_scene(data: bytes) -> Optional[dict]:
    head = data.lstrip()[:1]
    if head != b"{":
        return None
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None
    if isinstance(doc, dict) and SCENE_KEY in doc:
        return doc[SCENE_KEY]
    return None


def _scene_image(data: bytes, scene: dict[str, Any], image_id: Optional[str]) -> SourceImage:
    try:
        canvas = scene["canvas"]
        extent = ImageExtent(int(canvas["width"]), int(canvas["height"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"scene blob missing a valid canvas: {exc}") from exc
    digest = sha256_hex(data)
    return SourceImage(
        image_id=image_id or str(scene.get("scene_id", digest[:12])),
        data=data,
        extent=extent,
        content_digest=digest,
        scene=scene,
    )

from __future__ import annotations

import base64
import io
from dataclasses import dataclass

from PIL import Image, UnidentifiedImageError

from ..domain import ImageRef
from ..errors import DecodeError

_MEDIA_TYPES = {"PNG": "image/png", "JPEG": "image/jpeg", "WEBP": "image/webp", "GIF": "image/gif"}


@dataclass(frozen=True)
class EncodedImage:
    media_type: str
    data: str  # base64
    width: int
    height: int
    content_hash: str

    @property
    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{self.data}"


def encode_image(image: ImageRef, max_dimension: int | None = None) -> EncodedImage:
    """Base64-encode an image, downscaling if its longer side exceeds ``max_dimension``.

    Images that already fit are passed through byte-for-byte. Never upscales.
    """
    try:
        raw = image.read_bytes()
    except OSError as exc:
        raise DecodeError(f"cannot read {image.path}: {exc}") from None
    try:
        im = Image.open(io.BytesIO(raw))
        im.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {image.path}: {exc}") from None

    fmt = im.format if im.format in _MEDIA_TYPES else "PNG"
    w, h = im.size
    longer = max(w, h)
    if max_dimension is None or longer <= max_dimension:
        if im.format not in _MEDIA_TYPES:
            raw = _save(im, fmt)
        return EncodedImage(
            _MEDIA_TYPES[fmt], base64.b64encode(raw).decode("ascii"), w, h, image.content_hash
        )

    scale = max_dimension / longer
    size = (
        max_dimension if w == longer else max(1, round(w * scale)),
        max_dimension if h == longer else max(1, round(h * scale)),
    )
    resized = im.resize(size, Image.Resampling.LANCZOS)
    data = _save(resized, fmt)
    return EncodedImage(
        _MEDIA_TYPES[fmt], base64.b64encode(data).decode("ascii"), size[0], size[1], image.content_hash
    )


def _save(im: Image.Image, fmt: str) -> bytes:
    if fmt == "JPEG" and im.mode not in ("RGB", "L"):
        im = im.convert("RGB")
    buf = io.BytesIO()
    im.save(buf, format=fmt)
    return buf.getvalue()

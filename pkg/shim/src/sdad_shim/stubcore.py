"""Deterministic stub semantics, bit-compatible with the client's mock.

The contract (documented on the client side and pinned by the shared
golden fixtures) is:

* request hash: FNV-1a 64 over ``kind || 0x00 || seed_le8 || (len_le8 ||
  part)*`` where kind is the ASCII endpoint tag and seed the server's
  configured seed;
* embeddings: the request hash (one part, the raw payload bytes) seeds a
  SplitMix64 stream; the vector is ``dimension`` draws of
  ``2 * ((u >> 11) * 2**-53) - 1`` in order;
* captions: seed independent; two FNV-1a hashes (image bytes, prompt
  utf-8) filled into a fixed template;
* generation: the mask is decoded, every distinct pixel value (L/P: the
  raw 8-bit value, otherwise packed 0xRRGGBB) gets a color from the first
  SplitMix64 word of ``payload_hash("generate", seed, [gen_seed_le8,
  caption_hash_le8, value_le8])``, low byte red; the recolored RGB image
  is returned PNG-encoded at the mask's exact dimensions.

Everything in this module is a pure function of its arguments; the only
third-party piece is the PNG codec.
"""

from __future__ import annotations

import io
import struct
from typing import Iterable

from PIL import Image, UnidentifiedImageError

MASK64 = 0xFFFFFFFFFFFFFFFF

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

GAMMA = 0x9E3779B97F4A7C15

CAPTION_TEMPLATE = (
    "A scene with several surfaces and shapes arranged in depth, "
    "texture code {a:016x}, query code {b:016x}. The background recedes "
    "toward a far edge and the exposure is even."
)

MODEL_IDS = {
    "embed": "mock-splitmix64-v1",
    "caption": "mock-template-v1",
    "generate": "mock-recolor-v1",
}


class BadInput(Exception):
    """Client-side problem with a request payload; maps to HTTP 400."""


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Counter generator: i-th output of seed s is mix64(s + (i+1)*GAMMA)."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def next_symmetric(self) -> float:
        return 2.0 * ((self.next_u64() >> 11) * 2.0**-53) - 1.0


def payload_hash(kind: str, seed: int, parts: Iterable[bytes]) -> int:
    buf = bytearray(kind.encode("ascii"))
    buf.append(0)
    buf += struct.pack("<Q", seed & MASK64)
    for part in parts:
        buf += struct.pack("<Q", len(part))
        buf += part
    return fnv1a64(bytes(buf))


def decode_png(data: bytes) -> Image.Image:
    if not data:
        raise BadInput("empty image payload")
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError) as e:
        raise BadInput(f"undecodable image: {e}") from e
    return img


def embed(kind: str, seed: int, dimension: int, payload: bytes) -> list[float]:
    """The vector for one embed request; kind is the endpoint tag."""
    stream = SplitMix64(payload_hash(kind, seed, [payload]))
    return [stream.next_symmetric() for _ in range(dimension)]


def embed_image(seed: int, dimension: int, image_png: bytes) -> list[float]:
    decode_png(image_png)  # reject junk before hashing
    return embed("embed_image", seed, dimension, image_png)


def embed_text(seed: int, dimension: int, text: str) -> list[float]:
    if not text:
        raise BadInput("empty text payload")
    return embed("embed_text", seed, dimension, text.encode("utf-8"))


def caption(image_png: bytes, prompt: str) -> str:
    decode_png(image_png)
    if not prompt:
        raise BadInput("empty prompt")
    return CAPTION_TEMPLATE.format(
        a=fnv1a64(image_png), b=fnv1a64(prompt.encode("utf-8"))
    )


def _pixel_values(img: Image.Image) -> list[int]:
    if img.mode in ("L", "P"):
        return list(img.tobytes())
    raw = img.convert("RGB").tobytes()
    it = iter(raw)
    return [(r << 16) | (g << 8) | b for r, g, b in zip(it, it, it)]


def generate(seed: int, mask_png: bytes, text: str, gen_seed: int) -> bytes:
    if not text:
        raise BadInput("empty caption")
    mask = decode_png(mask_png)
    values = _pixel_values(mask)
    caption_hash = fnv1a64(text.encode("utf-8"))
    colors: dict[int, tuple[int, int, int]] = {}
    for v in values:
        if v in colors:
            continue
        u = SplitMix64(
            payload_hash(
                "generate",
                seed,
                [
                    struct.pack("<Q", gen_seed & MASK64),
                    struct.pack("<Q", caption_hash),
                    struct.pack("<Q", v),
                ],
            )
        ).next_u64()
        colors[v] = (u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF)
    out = Image.new("RGB", mask.size)
    out.putdata([colors[v] for v in values])
    buf = io.BytesIO()
    out.save(buf, format="PNG")
    return buf.getvalue()

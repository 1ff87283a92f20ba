"""Generative-model service contract: embed, caption, generate.

Two interchangeable implementations are provided.  ``MockBackend`` is a pure
function of its inputs plus a configured seed, cheap enough for CI and fully
documented below so ports in other languages can reproduce it bit for bit.
``RemoteBackend`` speaks a fixed HTTP+JSON protocol to a model server.

Mock scheme (normative for ports):

* Request hash: ``payload_hash(kind, seed, parts)`` from the rng module, i.e.
  FNV-1a 64 over ``kind || 0x00 || seed_le8 || (len_le8 || part)*``.
* ``embed_image`` / ``embed_text``: the request hash (kind strings exactly
  ``"embed_image"`` / ``"embed_text"``, one part: the raw payload bytes)
  seeds a SplitMix64 stream; the vector is ``dimension`` draws of
  2*((u >> 11) * 2^-53) - 1 in order.
* ``caption_image``: seed-independent text a = fnv1a64(image bytes),
  b = fnv1a64(prompt utf-8), rendered as
  "A scene with several surfaces and shapes arranged in depth, texture code
  {a:016x}, query code {b:016x}. The background recedes toward a far edge
  and the exposure is even." (single line, one space after each period).
* ``generate_image``: the mask PNG is decoded; per distinct pixel value v
  (L/P modes: the 8-bit value; RGB: (r<<16)|(g<<8)|b) a color seed
  ``payload_hash("generate", seed, [gen_seed_le8, caption_hash_le8, v_le8])``
  is drawn, where caption_hash = fnv1a64(caption utf-8) and gen_seed is the
  per-call seed argument; with u the first SplitMix64 output of that stream,
  the output RGB pixel is (u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF).
  Output size equals mask size, mode RGB, PNG-encoded.  The recoloring
  preserves the semantic layout by construction.

Wire protocol (all POST, JSON bodies; images base64-encoded PNG):

    /v1/embed_image  {"image_png_b64": str}                  -> {"embedding": [float x d]}
    /v1/embed_text   {"text": str}                           -> {"embedding": [float x d]}
    /v1/caption      {"image_png_b64": str, "prompt": str}   -> {"caption": str}
    /v1/generate     {"mask_png_b64": str, "caption": str,
                      "seed": int}                           -> {"image_png_b64": str}
    /v1/info         {}                                      -> {"dimension": int, "model_ids": {...}}

Errors are HTTP 4xx/5xx with body {"error": str}.
"""

from __future__ import annotations

import base64
import io
import struct
import threading
import time
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    BackendError,
    BackendProtocolError,
    BackendRemoteError,
    BackendTimeout,
    ConfigError,
    DecodeError,
    DimensionMismatch,
    EmptyInput,
)
from .rng import SplitMix64, fnv1a64, payload_hash

DEFAULT_DIMENSION = 768

CAPTION_TEMPLATE = (
    "A scene with several surfaces and shapes arranged in depth, "
    "texture code {a:016x}, query code {b:016x}. The background recedes "
    "toward a far edge and the exposure is even."
)


@dataclass(frozen=True)
class BackendConfig:
    """Connection and determinism settings shared by both implementations."""

    endpoint: Optional[str] = None
    seed: int = 0
    dimension: int = DEFAULT_DIMENSION
    timeout: float = 30.0
    max_inflight: int = 4
    retries: int = 2
    backoff_base: float = 0.1

    def __post_init__(self):
        if self.dimension < 1:
            raise ConfigError("dimension must be >= 1")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.max_inflight < 1:
            raise ConfigError("max_inflight must be >= 1")
        if self.retries < 0:
            raise ConfigError("retries must be >= 0")


class Backend(Protocol):
    def embed_image(self, image_png: bytes) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...

    def caption_image(self, image_png: bytes, prompt: str) -> str: ...

    def generate_image(self, mask_png: bytes, caption: str, seed: int) -> bytes: ...

    def info(self) -> dict: ...


def decode_png(data: bytes) -> Image.Image:
    """Decode PNG bytes; EmptyInput on b"", DecodeError on anything unreadable."""
    if not data:
        raise EmptyInput("empty image payload")
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except UnidentifiedImageError as e:
        raise DecodeError(f"not a decodable image: {e}") from e
    except OSError as e:
        raise DecodeError(f"image decode failed: {e}") from e
    return img


def encode_png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _pixel_values(img: Image.Image) -> tuple[list[int], tuple[int, int]]:
    """Per-pixel integer values used by the mock recoloring, plus (w, h)."""
    if img.mode in ("L", "P"):
        values = np.asarray(img, dtype=np.int64).reshape(-1)
    else:
        rgb = np.asarray(img.convert("RGB"), dtype=np.int64)
        values = (
            (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
        ).reshape(-1)
    return [int(v) for v in values], img.size


class MockBackend:
    """Deterministic stand-in for the model server; see module docstring."""

    def __init__(self, config: Optional[BackendConfig] = None):
        self.config = config or BackendConfig()

    def _vector(self, kind: str, payload: bytes) -> np.ndarray:
        stream = SplitMix64(payload_hash(kind, self.config.seed, [payload]))
        return np.array(
            [stream.next_symmetric() for _ in range(self.config.dimension)],
            dtype=np.float64,
        )

    def embed_image(self, image_png: bytes) -> np.ndarray:
        decode_png(image_png)
        return self._vector("embed_image", image_png)

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise EmptyInput("empty text payload")
        return self._vector("embed_text", text.encode("utf-8"))

    def caption_image(self, image_png: bytes, prompt: str) -> str:
        decode_png(image_png)
        if not prompt:
            raise EmptyInput("empty prompt")
        a = fnv1a64(image_png)
        b = fnv1a64(prompt.encode("utf-8"))
        return CAPTION_TEMPLATE.format(a=a, b=b)

    def generate_image(self, mask_png: bytes, caption: str, seed: int) -> bytes:
        if not caption:
            raise EmptyInput("empty caption")
        mask = decode_png(mask_png)
        values, size = _pixel_values(mask)
        caption_hash = fnv1a64(caption.encode("utf-8"))
        colors: dict[int, tuple[int, int, int]] = {}
        for v in values:
            if v in colors:
                continue
            color_seed = payload_hash(
                "generate",
                self.config.seed,
                [
                    struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF),
                    struct.pack("<Q", caption_hash),
                    struct.pack("<Q", v),
                ],
            )
            u = SplitMix64(color_seed).next_u64()
            colors[v] = (u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF)
        out = Image.new("RGB", size)
        out.putdata([colors[v] for v in values])
        return encode_png(out)

    def info(self) -> dict:
        return {
            "dimension": self.config.dimension,
            "model_ids": {
                "embed": "mock-splitmix64-v1",
                "caption": "mock-template-v1",
                "generate": "mock-recolor-v1",
            },
        }


class RemoteBackend:
    """HTTP client for the wire protocol, with bounded concurrency and retries.

    At most ``max_inflight`` requests run at once; each request gets the
    configured timeout; failures retry up to ``retries`` times with
    exponential backoff.  Retrying is safe for every call: embed and caption
    are read-only and generate is deterministic in its explicit seed.
    """

    def __init__(self, config: BackendConfig):
        if not config.endpoint:
            raise ConfigError("remote backend needs an endpoint URL")
        import requests

        self.config = config
        self._requests = requests
        self._session = requests.Session()
        self._gate = threading.Semaphore(config.max_inflight)

    def _post(self, path: str, body: dict) -> dict:
        url = self.config.endpoint.rstrip("/") + path
        last: Optional[Exception] = None
        for attempt in range(self.config.retries + 1):
            if attempt and self.config.backoff_base > 0:
                time.sleep(self.config.backoff_base * (2 ** (attempt - 1)))
            try:
                with self._gate:
                    resp = self._session.post(
                        url, json=body, timeout=self.config.timeout
                    )
            except self._requests.Timeout:
                last = BackendTimeout(f"{path}: no answer in {self.config.timeout}s")
                continue
            except self._requests.RequestException as e:
                last = BackendError(f"{path}: {e}")
                continue
            if resp.status_code >= 400:
                try:
                    message = resp.json().get("error", resp.text)
                except ValueError:
                    message = resp.text
                err = BackendRemoteError(f"{path}: {resp.status_code}: {message}")
                if 400 <= resp.status_code < 500:
                    raise err  # client errors will not heal on retry
                last = err
                continue
            try:
                out = resp.json()
            except ValueError as e:
                raise BackendProtocolError(f"{path}: response is not JSON: {e}") from e
            if not isinstance(out, dict):
                raise BackendProtocolError(f"{path}: response must be a JSON object")
            return out
        raise last if last is not None else BackendError(f"{path}: request failed")

    def _check_vector(self, obj: dict, path: str) -> np.ndarray:
        emb = obj.get("embedding")
        if not isinstance(emb, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in emb
        ):
            raise BackendProtocolError(f"{path}: missing or malformed embedding")
        v = np.asarray(emb, dtype=np.float64)
        if v.size != self.config.dimension:
            raise BackendProtocolError(
                f"{path}: embedding has dimension {v.size}, "
                f"expected {self.config.dimension}"
            )
        if not np.isfinite(v).all():
            raise BackendProtocolError(f"{path}: embedding has non-finite entries")
        return v

    def embed_image(self, image_png: bytes) -> np.ndarray:
        decode_png(image_png)
        body = {"image_png_b64": base64.b64encode(image_png).decode("ascii")}
        return self._check_vector(self._post("/v1/embed_image", body), "/v1/embed_image")

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise EmptyInput("empty text payload")
        return self._check_vector(
            self._post("/v1/embed_text", {"text": text}), "/v1/embed_text"
        )

    def caption_image(self, image_png: bytes, prompt: str) -> str:
        decode_png(image_png)
        if not prompt:
            raise EmptyInput("empty prompt")
        body = {
            "image_png_b64": base64.b64encode(image_png).decode("ascii"),
            "prompt": prompt,
        }
        out = self._post("/v1/caption", body)
        caption = out.get("caption")
        if not isinstance(caption, str) or not caption:
            raise BackendProtocolError("/v1/caption: missing or empty caption")
        return caption

    def generate_image(self, mask_png: bytes, caption: str, seed: int) -> bytes:
        mask = decode_png(mask_png)
        if not caption:
            raise EmptyInput("empty caption")
        body = {
            "mask_png_b64": base64.b64encode(mask_png).decode("ascii"),
            "caption": caption,
            "seed": int(seed),
        }
        out = self._post("/v1/generate", body)
        b64 = out.get("image_png_b64")
        if not isinstance(b64, str):
            raise BackendProtocolError("/v1/generate: missing image_png_b64")
        try:
            data = base64.b64decode(b64, validate=True)
        except (ValueError, TypeError) as e:
            raise BackendProtocolError(f"/v1/generate: bad base64: {e}") from e
        img = decode_png(data)
        if img.size != mask.size:
            raise DimensionMismatch(
                f"generated image is {img.size}, mask is {mask.size}"
            )
        return data

    def info(self) -> dict:
        out = self._post("/v1/info", {})
        if not isinstance(out.get("dimension"), int):
            raise BackendProtocolError("/v1/info: missing integer dimension")
        return out


def make_backend(config: BackendConfig) -> Backend:
    """Remote if an endpoint is configured, deterministic mock otherwise."""
    if config.endpoint:
        return RemoteBackend(config)
    return MockBackend(config)

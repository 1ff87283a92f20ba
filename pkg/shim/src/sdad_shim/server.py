"""HTTP front end for the five /v1 endpoints.

One handler serves both modes; the difference is the model set plugged in
behind it.  Stub mode answers from the pure functions in stubcore and can
start on any machine.  Real mode loads the configured checkpoints at
startup and refuses to start half-wired: a missing dependency or a
dimension mismatch is a startup error, not a per-request surprise.

Malformed requests get 400 with {"error": str}, unknown paths 404, model
failures 500.  Responses are always JSON objects.
"""

from __future__ import annotations

import base64
import json
import sys
import threading
import traceback
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import stubcore

MODE_STUB = "stub"
MODE_REAL = "real"

ENDPOINTS = (
    "/v1/embed_image",
    "/v1/embed_text",
    "/v1/caption",
    "/v1/generate",
    "/v1/info",
)


class ShimStartupError(Exception):
    """The server cannot come up as configured; exit nonzero with this."""


@dataclass(frozen=True)
class ShimConfig:
    host: str = "127.0.0.1"
    port: int = 8008
    mode: str = MODE_STUB
    seed: int = 0
    dimension: int = 768
    # real-mode checkpoints; deployment configuration, not contract
    embed_model: str = "ViT-B-32/laion2b_s34b_b79k"
    caption_model: str = "Salesforce/blip-image-captioning-base"
    generate_model: str = "lllyasviel/sd-controlnet-seg"
    device: str = "cpu"
    serialize_generate: bool = True

    def __post_init__(self):
        if self.mode not in (MODE_STUB, MODE_REAL):
            raise ShimStartupError(f"mode must be stub or real, not {self.mode!r}")
        if self.dimension < 1:
            raise ShimStartupError("dimension must be >= 1")
        if not 0 <= self.port <= 65535:
            raise ShimStartupError(f"port {self.port} out of range")


class StubModels:
    """Model set backed by the deterministic scheme; no downloads, no state."""

    def __init__(self, config: ShimConfig):
        self.config = config

    def embed_image(self, image_png: bytes) -> list[float]:
        return stubcore.embed_image(self.config.seed, self.config.dimension, image_png)

    def embed_text(self, text: str) -> list[float]:
        return stubcore.embed_text(self.config.seed, self.config.dimension, text)

    def caption(self, image_png: bytes, prompt: str) -> str:
        return stubcore.caption(image_png, prompt)

    def generate(self, mask_png: bytes, caption: str, seed: int) -> bytes:
        return stubcore.generate(self.config.seed, mask_png, caption, seed)

    def model_ids(self) -> dict:
        return dict(stubcore.MODEL_IDS)


def _load_models(config: ShimConfig):
    if config.mode == MODE_STUB:
        return StubModels(config)
    from .realmodels import RealModels

    return RealModels(config)


def _json_body(raw: bytes) -> dict:
    if not raw:
        return {}
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise stubcore.BadInput(f"body is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise stubcore.BadInput("body must be a JSON object")
    return obj


def _str_field(obj: dict, key: str) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise stubcore.BadInput(f"{key} must be a string")
    return value


def _png_field(obj: dict, key: str) -> bytes:
    text = _str_field(obj, key)
    try:
        return base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as e:
        raise stubcore.BadInput(f"{key} is not valid base64: {e}") from e


def _seed_field(obj: dict) -> int:
    value = obj.get("seed")
    if not isinstance(value, int) or isinstance(value, bool):
        raise stubcore.BadInput("seed must be an integer")
    return value


def _handle(config, models, lock, path: str, raw: bytes) -> tuple[int, dict]:
    if path not in ENDPOINTS:
        return 404, {"error": f"unknown endpoint {path}"}
    obj = _json_body(raw)
    if path == "/v1/embed_image":
        vector = models.embed_image(_png_field(obj, "image_png_b64"))
        return 200, {"embedding": vector}
    if path == "/v1/embed_text":
        return 200, {"embedding": models.embed_text(_str_field(obj, "text"))}
    if path == "/v1/caption":
        caption = models.caption(
            _png_field(obj, "image_png_b64"), _str_field(obj, "prompt")
        )
        return 200, {"caption": caption}
    if path == "/v1/generate":
        mask = _png_field(obj, "mask_png_b64")
        caption = _str_field(obj, "caption")
        seed = _seed_field(obj)
        if lock is not None:
            with lock:
                data = models.generate(mask, caption, seed)
        else:
            data = models.generate(mask, caption, seed)
        return 200, {"image_png_b64": base64.b64encode(data).decode("ascii")}
    # /v1/info
    return 200, {"dimension": config.dimension, "model_ids": models.model_ids()}


def _generate_lock(config: ShimConfig):
    """A single accelerator cannot run generations concurrently; the stub can."""
    if config.serialize_generate and config.mode == MODE_REAL:
        return threading.Lock()
    return None


def _build_handler(config: ShimConfig, models):
    lock = _generate_lock(config)

    class Handler(BaseHTTPRequestHandler):
        def _send(self, status: int, payload: dict) -> None:
            blob = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(blob)))
            self.end_headers()
            self.wfile.write(blob)

        def do_POST(self):
            raw = self.rfile.read(int(self.headers.get("Content-Length", 0) or 0))
            try:
                status, payload = _handle(config, models, lock, self.path, raw)
            except stubcore.BadInput as e:
                status, payload = 400, {"error": str(e)}
            except Exception as e:  # model failure or a bug: report, keep serving
                traceback.print_exc(file=sys.stderr)
                status, payload = 500, {"error": f"internal error: {e}"}
            self._send(status, payload)

        def do_GET(self):
            self._send(405, {"error": "POST only"})

        def log_message(self, *args):
            pass

    return Handler


def create_server(config: ShimConfig) -> ThreadingHTTPServer:
    """Bind and return the server without starting it; raises ShimStartupError."""
    models = _load_models(config)
    try:
        return ThreadingHTTPServer(
            (config.host, config.port), _build_handler(config, models)
        )
    except OSError as e:
        raise ShimStartupError(f"cannot bind {config.host}:{config.port}: {e}") from e


def serve(config: ShimConfig) -> None:
    """Run until interrupted."""
    httpd = create_server(config)
    host, port = httpd.server_address[0], httpd.server_address[1]
    print(
        f"listening on {host}:{port} ({config.mode} mode, dimension {config.dimension})",
        file=sys.stderr,
    )
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()

"""Reference server for the embed/caption/generate inference protocol.

Five POST endpoints under /v1 (embed_image, embed_text, caption, generate,
info), JSON bodies, images as base64 PNG.  Stub mode reproduces the
documented deterministic scheme of the client package bit for bit and
needs nothing beyond the standard library and the PNG codec; real mode
wires actual model checkpoints behind the same wire contract.
"""

from .server import ShimConfig, ShimStartupError, create_server, serve  # noqa: F401

__version__ = "0.1.0"

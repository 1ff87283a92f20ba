import json
import threading
import urllib.error
import urllib.request
from pathlib import Path

import pytest

from sdad_shim.server import ShimConfig, create_server

FIXTURES = Path(__file__).resolve().parents[2] / "fixtures" / "backend_goldens"


def load_fixture(name: str) -> dict:
    return json.loads((FIXTURES / name).read_text("utf-8"))


def post(url: str, path: str, payload=None, raw: bytes = None):
    """POST JSON (or raw bytes) and return (status, parsed body)."""
    data = raw if raw is not None else json.dumps(payload or {}).encode("utf-8")
    req = urllib.request.Request(
        url + path,
        data=data,
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as e:
        body = e.read().decode("utf-8", "replace")
        try:
            parsed = json.loads(body)
        except json.JSONDecodeError:
            parsed = body
        return e.code, parsed


@pytest.fixture
def start_server():
    """Factory: start a stub server with given seed/dimension, return its URL."""
    servers = []

    def _start(**kwargs) -> str:
        config = ShimConfig(host="127.0.0.1", port=0, **kwargs)
        httpd = create_server(config)
        threading.Thread(target=httpd.serve_forever, daemon=True).start()
        servers.append(httpd)
        return f"http://127.0.0.1:{httpd.server_address[1]}"

    yield _start
    for httpd in servers:
        httpd.shutdown()
        httpd.server_close()

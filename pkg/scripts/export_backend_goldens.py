#!/usr/bin/env python3
"""Regenerate the wire-level golden fixtures under fixtures/backend_goldens/.

Three committed files, all deterministic:

* parity_cases.json: 100 embed/caption/generate cases with exact expected
  outputs from the in-process deterministic backend, grouped by server
  config so a conforming HTTP server can be started once per group and
  checked element for element.
* protocol_goldens.json: request/response pairs for the five endpoints
  plus malformed-request cases. 200 responses are exact; error entries pin
  only the status class and the {"error": str} body shape.
* generate_dims.json: 20 masks of assorted sizes; a conforming server must
  answer /v1/generate with an image of exactly the mask's dimensions.

All pixel content is drawn from SplitMix64 streams, not numpy, so a rerun
reproduces the files byte for byte on any platform.  Rerun only when the
documented mock scheme changes, and expect the diff to be reviewed.

Usage: python3 scripts/export_backend_goldens.py [--out fixtures/backend_goldens]
"""

from __future__ import annotations

import argparse
import base64
import io
import json
from pathlib import Path

from PIL import Image

from sdad.backend import BackendConfig, MockBackend
from sdad.captions import build_vlm_prompt
from sdad.manifest import default_taxonomy, enumerate_subgroups
from sdad.rng import SplitMix64, mix64
from sdad.subgroups import render_prompt

# (seed, dimension) per server group; 25 parity cases each
GROUPS = ((7, 16), (20240817, 64), (0, 8), (123456789, 32))

IMAGE_SIZES = [
    (4, 4), (5, 3), (8, 8), (3, 9), (6, 6),
    (7, 2), (9, 5), (2, 11), (12, 4), (10, 10),
]

MASK_SIZES_DIMS = [
    (1, 1), (2, 3), (3, 2), (5, 5), (7, 11),
    (11, 7), (16, 16), (17, 1), (1, 17), (9, 13),
    (13, 9), (32, 8), (8, 32), (24, 24), (6, 10),
    (10, 6), (15, 4), (4, 15), (21, 14), (14, 21),
]

CAPTION_PROMPTS = [
    "Describe the scene.",
    "What is on the road?",
    "List the visible surfaces.",
    "Caption this image in one sentence.",
]

GENERATE_CAPTIONS = [
    "A two-lane road between sound barriers. Image taken in rain weather at night time.",
    "Vehicles queued before a junction. Image taken in clear weather at day time.",
    "A ring road under wide sky. Image taken in cloudy weather at dawn / dusk time.",
    "An empty bridge deck with lane markings. Image taken in clear weather at night time.",
    "A depot entrance with parked trailers. Image taken in rain weather at day time.",
]

MASK_COLORS = [(128, 64, 128), (0, 0, 142), (70, 130, 180), (220, 20, 60), (152, 251, 152)]


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _noise_rgb(stream_seed: int, size: tuple[int, int]) -> bytes:
    s = SplitMix64(stream_seed)
    data = []
    for _ in range(size[0] * size[1]):
        u = s.next_u64()
        data.append((u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF))
    img = Image.new("RGB", size)
    img.putdata(data)
    return _png(img)


def _mask_l(stream_seed: int, size: tuple[int, int], k: int) -> bytes:
    s = SplitMix64(stream_seed)
    img = Image.new("L", size)
    img.putdata([s.next_u64() % k for _ in range(size[0] * size[1])])
    return _png(img)


def _mask_rgb(stream_seed: int, size: tuple[int, int], k: int) -> bytes:
    s = SplitMix64(stream_seed)
    colors = MASK_COLORS[: min(k, len(MASK_COLORS))]
    k = len(colors)
    img = Image.new("RGB", size)
    img.putdata([colors[s.next_u64() % k] for _ in range(size[0] * size[1])])
    return _png(img)


def _texts() -> list[str]:
    t = default_taxonomy()
    out = [render_prompt(t, z) for z in enumerate_subgroups(t)]
    out += [
        "wet asphalt reflecting brake lights",
        "an empty intersection before sunrise",
        "Schneebedeckte Strasse am Abend",
        "route mouillee sous un ciel couvert",
        "low sun, long shadows, dry road",
        "a bus stopped at a crossing in heavy rain",
        "overcast sky above a ring road",
        "night lane markings under sodium lamps",
        "midday glare on a windshield",
        "fog bank rolling over a bridge deck",
        "gravel shoulder beside a two-lane highway",
    ]
    assert len(out) == 20
    return out


def _expected_pixels(backend: MockBackend, mask_png: bytes, caption: str, seed: int):
    out = backend.generate_image(mask_png, caption, seed)
    img = Image.open(io.BytesIO(out))
    assert img.mode == "RGB"
    return img.size, img.tobytes()


def build_parity() -> dict:
    texts = _texts()
    taxonomy = default_taxonomy()
    vlm_prompt = build_vlm_prompt(["road", "vehicle", "sky"], taxonomy)
    prompts = [vlm_prompt] + CAPTION_PROMPTS
    groups = []
    counter = 0
    for gi, (seed, dim) in enumerate(GROUPS):
        backend = MockBackend(BackendConfig(seed=seed, dimension=dim))
        cases = []
        for j, size in enumerate(IMAGE_SIZES):
            counter += 1
            png = _noise_rgb(mix64(counter), size)
            cases.append(
                {
                    "id": f"g{gi}-embed-image-{j:02d}",
                    "op": "embed_image",
                    "image_png_b64": _b64(png),
                    "expected_embedding": [float(x) for x in backend.embed_image(png)],
                }
            )
        for j in range(5):
            text = texts[gi * 5 + j]
            cases.append(
                {
                    "id": f"g{gi}-embed-text-{j:02d}",
                    "op": "embed_text",
                    "text": text,
                    "expected_embedding": [float(x) for x in backend.embed_text(text)],
                }
            )
        for j in range(5):
            counter += 1
            png = _noise_rgb(mix64(counter), (6, 4))
            prompt = prompts[j]
            cases.append(
                {
                    "id": f"g{gi}-caption-{j:02d}",
                    "op": "caption",
                    "image_png_b64": _b64(png),
                    "prompt": prompt,
                    "expected_caption": backend.caption_image(png, prompt),
                }
            )
        gen_seeds = [0, 1, 7, 123456789, 2**63 - 1]
        for j in range(5):
            counter += 1
            size = (5 + j, 4 + 2 * j)
            if j < 3:
                mask = _mask_l(mix64(counter), size, 3 + j)
            else:
                mask = _mask_rgb(mix64(counter), size, 2 + j)
            caption = GENERATE_CAPTIONS[j]
            out_size, pixels = _expected_pixels(backend, mask, caption, gen_seeds[j])
            cases.append(
                {
                    "id": f"g{gi}-generate-{j:02d}",
                    "op": "generate",
                    "mask_png_b64": _b64(mask),
                    "caption": caption,
                    "seed": gen_seeds[j],
                    "expected_size": list(out_size),
                    "expected_pixels_b64": _b64(pixels),
                }
            )
        assert len(cases) == 25
        groups.append({"server": {"seed": seed, "dimension": dim}, "cases": cases})
    return {"format": "sdad-backend-parity-v1", "groups": groups}


def build_protocol() -> dict:
    seed, dim = 7, 16
    backend = MockBackend(BackendConfig(seed=seed, dimension=dim))
    image = _noise_rgb(mix64(901), (4, 3))
    mask = _mask_l(mix64(902), (5, 4), 3)
    caption_in = "A corridor of buildings. Image taken in clear weather at day time."
    generated = backend.generate_image(mask, caption_in, 11)
    goldens = [
        {
            "name": "embed-image-ok",
            "path": "/v1/embed_image",
            "client": True,
            "status": 200,
            "request": {"image_png_b64": _b64(image)},
            "response": {"embedding": [float(x) for x in backend.embed_image(image)]},
        },
        {
            "name": "embed-text-ok",
            "path": "/v1/embed_text",
            "client": True,
            "status": 200,
            "request": {"text": "a road at night"},
            "response": {
                "embedding": [float(x) for x in backend.embed_text("a road at night")]
            },
        },
        {
            "name": "caption-ok",
            "path": "/v1/caption",
            "client": True,
            "status": 200,
            "request": {"image_png_b64": _b64(image), "prompt": "Describe the scene."},
            "response": {
                "caption": backend.caption_image(image, "Describe the scene.")
            },
        },
        {
            "name": "generate-ok",
            "path": "/v1/generate",
            "client": True,
            "status": 200,
            "request": {"mask_png_b64": _b64(mask), "caption": caption_in, "seed": 11},
            "response": {"image_png_b64": _b64(generated)},
        },
        {
            "name": "info-ok",
            "path": "/v1/info",
            "client": True,
            "status": 200,
            "request": {},
            "response": backend.info(),
        },
        # malformed requests: status class and {"error": str} shape are the contract
        {
            "name": "embed-image-missing-field",
            "path": "/v1/embed_image",
            "client": False,
            "status": 400,
            "request": {},
        },
        {
            "name": "embed-image-bad-base64",
            "path": "/v1/embed_image",
            "client": False,
            "status": 400,
            "request": {"image_png_b64": "%%% not base64 %%%"},
        },
        {
            "name": "embed-image-not-png",
            "path": "/v1/embed_image",
            "client": False,
            "status": 400,
            "request": {"image_png_b64": _b64(b"plainly not an image")},
        },
        {
            "name": "embed-text-empty",
            "path": "/v1/embed_text",
            "client": False,
            "status": 400,
            "request": {"text": ""},
        },
        {
            "name": "embed-text-wrong-type",
            "path": "/v1/embed_text",
            "client": False,
            "status": 400,
            "request": {"text": 5},
        },
        {
            "name": "caption-empty-prompt",
            "path": "/v1/caption",
            "client": False,
            "status": 400,
            "request": {"image_png_b64": _b64(image), "prompt": ""},
        },
        {
            "name": "generate-missing-seed",
            "path": "/v1/generate",
            "client": False,
            "status": 400,
            "request": {"mask_png_b64": _b64(mask), "caption": "x"},
        },
        {
            "name": "generate-seed-wrong-type",
            "path": "/v1/generate",
            "client": False,
            "status": 400,
            "request": {"mask_png_b64": _b64(mask), "caption": "x", "seed": "eleven"},
        },
        {
            "name": "unknown-endpoint",
            "path": "/v1/segment",
            "client": False,
            "status": 404,
            "request": {},
        },
        {
            "name": "body-not-json",
            "path": "/v1/embed_text",
            "client": False,
            "status": 400,
            "raw_request": "this is not json {",
        },
    ]
    return {
        "format": "sdad-backend-protocol-v1",
        "server": {"seed": seed, "dimension": dim},
        "goldens": goldens,
    }


def build_dims() -> dict:
    cases = []
    for j, size in enumerate(MASK_SIZES_DIMS):
        if j % 2 == 0:
            mask = _mask_l(mix64(1000 + j), size, 2 + j % 5)
        else:
            mask = _mask_rgb(mix64(1000 + j), size, 2 + j % 4)
        cases.append(
            {
                "id": f"dims-{j:02d}",
                "mask_png_b64": _b64(mask),
                "caption": GENERATE_CAPTIONS[j % len(GENERATE_CAPTIONS)],
                "seed": 100 + j,
                "size": list(size),
            }
        )
    return {
        "format": "sdad-backend-dims-v1",
        "server": {"seed": 11, "dimension": 8},
        "cases": cases,
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--out",
        default=str(Path(__file__).resolve().parent.parent / "fixtures" / "backend_goldens"),
    )
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "parity_cases.json": build_parity(),
        "protocol_goldens.json": build_protocol(),
        "generate_dims.json": build_dims(),
    }
    for name, doc in files.items():
        path = out / name
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", "utf-8")
        print(f"wrote {path}")
    total = sum(len(g["cases"]) for g in files["parity_cases.json"]["groups"])
    print(f"parity cases: {total}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

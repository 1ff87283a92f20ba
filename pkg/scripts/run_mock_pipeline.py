#!/usr/bin/env python3
"""Walk the whole toolchain end to end against the deterministic mock backend.

Builds a skewed demo dataset, then runs: validate, analyze, augment,
eval-fd (original vs synthetic features), eval-seg (against corrupted
predictions), eval-drive (on a synthesized route log), and report.  Every
step shells through the same entry points as the installed CLI, so this
doubles as a smoke test and a usage reference.  No network access is
involved at any point.

Usage: python3 scripts/run_mock_pipeline.py [--workdir DIR] [--keep]
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

sys.path.insert(0, str(Path(__file__).resolve().parent))
from make_demo_dataset import PALETTE, build_dataset  # noqa: E402

from sdad.backend import BackendConfig, MockBackend  # noqa: E402
from sdad.cli import run_command  # noqa: E402
from sdad.embeddings import write_store  # noqa: E402
from sdad.manifest import load_manifest, save_manifest  # noqa: E402


def run(argv: list[str]) -> None:
    print(f"\n$ sdad {' '.join(argv)}")
    code = run_command(argv)
    if code != 0:
        raise SystemExit(f"command failed with exit code {code}")


def embed_images(manifest_path: Path, store_path: Path, synthetic_only: bool) -> int:
    backend = MockBackend(BackendConfig(seed=5, dimension=64))
    m = load_manifest(manifest_path)
    base = manifest_path.parent
    ids, rows = [], []
    for s in m.samples:
        if synthetic_only != s.is_synthetic:
            continue
        uri = Path(s.image_uri)
        path = uri if uri.is_absolute() else base / uri
        ids.append(s.id)
        rows.append(backend.embed_image(path.read_bytes()))
    write_store(store_path, ids, np.stack(rows))
    return len(ids)


def corrupt_masks(src: Path, dst: Path) -> None:
    """Predictions: ground truth with the top band relabeled as road."""
    dst.mkdir(parents=True, exist_ok=True)
    for mask_path in sorted(src.glob("*.png")):
        arr = np.asarray(Image.open(mask_path))
        out = arr.copy()
        out[: max(1, arr.shape[0] // 8), :] = 0
        Image.fromarray(out, "L").save(dst / mask_path.name)


def write_route_log(path: Path, manifest_path: Path) -> None:
    m = load_manifest(manifest_path)
    rng = np.random.default_rng(13)
    lines = []
    for i in range(18):
        z = m.samples[i % len(m.samples)].subgroup
        events = []
        if rng.random() < 0.4:
            events.append({"kind": "red_light", "count": 1})
        if rng.random() < 0.2:
            events.append({"kind": "collision_vehicle", "count": 1})
        lines.append(
            {
                "route_id": f"route-{i:03d}",
                "subgroup": list(z.coordinates),
                "rc": round(float(rng.uniform(0.3, 1.0)), 4),
                "events": events,
            }
        )
    path.write_text("".join(json.dumps(o) + "\n" for o in lines), "utf-8")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", help="default: a fresh temp directory")
    parser.add_argument(
        "--keep", action="store_true", help="leave the workdir in place on exit"
    )
    args = parser.parse_args()

    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="sdad-demo-"))
    workdir.mkdir(parents=True, exist_ok=True)
    data = workdir / "data"
    out = workdir / "augmented"
    print(f"workdir: {workdir}")

    manifest = build_dataset(data, per_subgroup=2, size=24, seed=7, skew=True)
    save_manifest(manifest, data / "manifest.jsonl")
    from sdad.captions import save_palette

    save_palette(PALETTE, data / "palette.json")
    plan = {
        "n_synth": 30,
        "seed": 20240817,
        "target_policy": "balance_to_uniform",
        "mask_source": "dataset_mask",
    }
    (data / "plan.json").write_text(json.dumps(plan, indent=1) + "\n", "utf-8")
    print(f"demo dataset: {len(manifest.samples)} samples, skewed")

    run(["validate", "--manifest", str(data / "manifest.jsonl")])
    run(["analyze", "--manifest", str(data / "manifest.jsonl")])
    run(
        [
            "augment",
            "--manifest", str(data / "manifest.jsonl"),
            "--plan", str(data / "plan.json"),
            "--backend", "mock",
            "--palette", str(data / "palette.json"),
            "--out", str(out),
        ]
    )
    run(["analyze", "--manifest", str(out / "augmented.jsonl")])

    n_orig = embed_images(data / "manifest.jsonl", workdir / "orig.emb", False)
    n_syn = embed_images(out / "augmented.jsonl", workdir / "syn.emb", True)
    print(f"\nembedded {n_orig} original and {n_syn} synthetic images")
    run(
        [
            "eval-fd",
            "--features-a", str(workdir / "orig.emb"),
            "--features-b", str(workdir / "syn.emb"),
        ]
    )

    corrupt_masks(data / "masks", workdir / "pred_masks")
    run(
        [
            "eval-seg",
            "--gt-dir", str(data / "masks"),
            "--pred-dir", str(workdir / "pred_masks"),
            "--palette", str(data / "palette.json"),
        ]
    )

    write_route_log(workdir / "routes.jsonl", data / "manifest.jsonl")
    run(
        [
            "eval-drive",
            "--routes", str(workdir / "routes.jsonl"),
            "--manifest", str(data / "manifest.jsonl"),
        ]
    )

    counts = load_manifest(out / "augmented.jsonl").counts_by_subgroup()
    before = manifest.counts_by_subgroup()
    values = workdir / "counts_after.json"
    baseline = workdir / "counts_before.json"
    values.write_text(
        json.dumps({"metric": "samples", "values": {z.phrase: float(n) for z, n in counts.items()}})
    )
    baseline.write_text(
        json.dumps({"metric": "samples", "values": {z.phrase: float(n) for z, n in before.items()}})
    )
    run(["report", "--inputs", str(values), str(baseline)])

    if args.keep or args.workdir:
        print(f"\nartifacts kept under {workdir}")
    else:
        shutil.rmtree(workdir)
        print("\nworkdir removed (pass --keep to retain it)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

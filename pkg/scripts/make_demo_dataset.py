#!/usr/bin/env python3
"""Build a small labeled dataset on disk for trying out the CLI.

Writes images/, masks/, manifest.jsonl, palette.json, and plan.json under
--out.  Pixel content is random noise; what matters is that the manifest,
masks, and palette are structurally real so every command runs end to end.

With --skew the subgroup counts are deliberately imbalanced (Clear, Day
dominates) so the analyze and augment commands have something to fix.

Usage: python3 scripts/make_demo_dataset.py --out demo [--per-subgroup 4]
       [--size 32] [--seed 7] [--skew]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
from PIL import Image

from sdad.captions import ClassPalette, PaletteClass, save_palette
from sdad.manifest import (
    DatasetManifest,
    SampleRecord,
    default_taxonomy,
    enumerate_subgroups,
    save_manifest,
)

# relative weights per enumeration position when --skew is on
SKEW = (1, 1, 2, 1, 6, 2, 1, 2, 1)

PALETTE = ClassPalette(
    classes=(
        PaletteClass(0, "road", (128, 64, 128)),
        PaletteClass(1, "vehicle", (0, 0, 142)),
        PaletteClass(2, "sky", (70, 130, 180)),
    )
)


def build_dataset(
    root: Path, per_subgroup: int = 4, size: int = 32, seed: int = 7, skew: bool = False
) -> DatasetManifest:
    taxonomy = default_taxonomy()
    subgroups = enumerate_subgroups(taxonomy)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples = []
    i = 0
    for pos, z in enumerate(subgroups):
        count = per_subgroup * SKEW[pos % len(SKEW)] if skew else per_subgroup
        for _ in range(count):
            image = rng.integers(0, 255, (size, size, 3), dtype=np.uint8)
            Image.fromarray(image, "RGB").save(root / f"images/{i}.png")
            # bands of sky / road with scattered vehicle pixels
            mask = np.full((size, size), 2, dtype=np.uint8)
            mask[size // 3 :, :] = 0
            vehicles = rng.random((size, size)) < 0.08
            vehicles[: size // 3, :] = False
            mask[vehicles] = 1
            Image.fromarray(mask, "L").save(root / f"masks/{i}.png")
            samples.append(
                SampleRecord(
                    id=f"s{i:04d}",
                    image_uri=f"images/{i}.png",
                    mask_uri=f"masks/{i}.png",
                    subgroup=z,
                )
            )
            i += 1
    return DatasetManifest(taxonomy=taxonomy, samples=tuple(samples), provenance={})


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True)
    parser.add_argument("--per-subgroup", type=int, default=4)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--skew", action="store_true")
    args = parser.parse_args()

    root = Path(args.out)
    manifest = build_dataset(root, args.per_subgroup, args.size, args.seed, args.skew)
    save_manifest(manifest, root / "manifest.jsonl")
    save_palette(PALETTE, root / "palette.json")
    plan = {
        "n_synth": 3 * len(manifest.samples) // 4,
        "seed": 20240817,
        "target_policy": "balance_to_uniform" if args.skew else "uniform_excluding_source",
        "mask_source": "dataset_mask",
    }
    (root / "plan.json").write_text(json.dumps(plan, indent=1) + "\n", "utf-8")
    print(f"wrote {len(manifest.samples)} samples under {root}")
    print(f"manifest: {root / 'manifest.jsonl'}")
    print(f"palette:  {root / 'palette.json'}")
    print(f"plan:     {root / 'plan.json'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

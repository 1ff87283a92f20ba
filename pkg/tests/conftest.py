import io

import numpy as np
import pytest
from PIL import Image

from sdad.captions import ClassPalette, PaletteClass
from sdad.manifest import (
    DatasetManifest,
    SampleRecord,
    default_taxonomy,
    enumerate_subgroups,
)


def png_bytes(arr: np.ndarray, mode: str = "RGB") -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode).save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture
def taxonomy():
    return default_taxonomy()


@pytest.fixture
def palette():
    return ClassPalette(
        classes=(
            PaletteClass(0, "road", (128, 64, 128)),
            PaletteClass(1, "vehicle", (0, 0, 142)),
            PaletteClass(2, "sky", (70, 130, 180)),
        )
    )


def make_demo_dataset(root, n_per_subgroup=2, size=16, seed=7, embedding_refs=False):
    """Balanced labeled dataset on disk: images/, masks/, manifest object."""
    t = default_taxonomy()
    zs = enumerate_subgroups(t)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples = []
    i = 0
    for z in zs:
        for _ in range(n_per_subgroup):
            img = rng.integers(0, 255, (size, size, 3), dtype=np.uint8)
            Image.fromarray(img, "RGB").save(root / f"images/{i}.png")
            mask = rng.integers(0, 3, (size, size), dtype=np.uint8)
            Image.fromarray(mask, "L").save(root / f"masks/{i}.png")
            samples.append(
                SampleRecord(
                    id=f"s{i:04d}",
                    image_uri=f"images/{i}.png",
                    mask_uri=f"masks/{i}.png",
                    subgroup=z,
                    embedding_ref=i if embedding_refs else None,
                    origin="original",
                    parent_id=None,
                    annotation_kind="segmentation_mask",
                )
            )
            i += 1
    return DatasetManifest(taxonomy=t, samples=tuple(samples), provenance={})


@pytest.fixture
def demo_dataset(tmp_path):
    return tmp_path, make_demo_dataset(tmp_path)

"""Subgroup-specific caption generation.

The pieces, in pipeline order: parse the semantic mask into the class names
it contains, build the VLM query from those classes, scrub any subgroup
vocabulary the VLM leaked into its caption, and append the target-subgroup
style sentence.  All text operations are pure functions.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import (
    EmptyCaption,
    EmptyMaskError,
    InvariantError,
    SchemaError,
    UnknownClassValue,
)
from .manifest import Subgroup, SubgroupTaxonomy, enumerate_subgroups
from .rng import fnv1a64

VLM_PROMPT_TEMPLATE = (
    "Provide a description of the objects - {classes} - and their "
    "relationships with respect to each other. Describe the background of "
    "the scene and image quality. Do not mention the subgroups - {subgroups}"
)

DEFAULT_STYLE_TEMPLATE = "Image taken in {weather} weather at {time} time."
GENERIC_STYLE_TEMPLATE = "Image taken in {phrase} conditions."


@dataclass(frozen=True)
class PaletteClass:
    id: int
    name: str
    color: Optional[tuple[int, int, int]] = None

    def __post_init__(self):
        if not isinstance(self.id, int) or self.id < 0:
            raise SchemaError("id", "class id must be a non-negative integer")
        if not self.name:
            raise SchemaError("name", "class name must be non-empty")
        if self.color is not None:
            c = tuple(int(x) for x in self.color)
            if len(c) != 3 or not all(0 <= x <= 255 for x in c):
                raise SchemaError("color", "must be [r, g, b] in 0..255")
            object.__setattr__(self, "color", c)


@dataclass(frozen=True)
class ClassPalette:
    """Ordered class list; order defines class rank in extracted lists."""

    classes: tuple[PaletteClass, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        ids = [c.id for c in self.classes]
        names = [c.name for c in self.classes]
        if len(set(ids)) != len(ids):
            raise SchemaError("id", "duplicate class ids")
        if len(set(names)) != len(names):
            raise SchemaError("name", "duplicate class names")

    def id_to_name(self) -> dict[int, str]:
        return {c.id: c.name for c in self.classes}

    def color_to_id(self) -> dict[tuple[int, int, int], int]:
        out = {}
        for c in self.classes:
            if c.color is not None:
                out[c.color] = c.id
        return out


def load_palette(path) -> ClassPalette:
    obj = json.loads(Path(path).read_text("utf-8"))
    if not isinstance(obj, dict) or "classes" not in obj:
        raise SchemaError("classes", "palette file needs a classes array")
    classes = []
    for entry in obj["classes"]:
        if not isinstance(entry, dict):
            raise SchemaError("classes", "each class must be an object")
        color = entry.get("color")
        classes.append(
            PaletteClass(
                id=entry.get("id"),
                name=entry.get("name"),
                color=tuple(color) if color is not None else None,
            )
        )
    return ClassPalette(tuple(classes))


def save_palette(palette: ClassPalette, path) -> None:
    entries = []
    for c in palette.classes:
        obj: dict[str, object] = {"id": c.id, "name": c.name}
        if c.color is not None:
            obj["color"] = list(c.color)
        entries.append(obj)
    Path(path).write_text(
        json.dumps({"classes": entries}, separators=(",", ":")) + "\n", "utf-8"
    )


def mask_ids_from_array(arr, palette: ClassPalette) -> np.ndarray:
    """Map a decoded mask array to a class-id grid of the same height/width.

    2-D arrays are taken as id grids directly; (H, W, 3|4) arrays are matched
    color-by-color against the palette.
    """
    arr = np.asarray(arr)
    if arr.size == 0:
        raise EmptyMaskError("mask has no pixels")
    if arr.ndim == 2:
        ids = arr.astype(np.int64)
    elif arr.ndim == 3 and arr.shape[2] in (3, 4):
        rgb = arr[..., :3].astype(np.int64)
        packed = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
        lookup = {
            (r << 16) | (g << 8) | b: cid
            for (r, g, b), cid in palette.color_to_id().items()
        }
        ids = np.empty(packed.shape, dtype=np.int64)
        for v in np.unique(packed):
            v = int(v)
            if v not in lookup:
                raise UnknownClassValue((v >> 16, (v >> 8) & 0xFF, v & 0xFF))
            ids[packed == v] = lookup[v]
    else:
        raise SchemaError("mask", f"unsupported mask array shape {arr.shape}")
    known = set(palette.id_to_name())
    present = set(int(v) for v in np.unique(ids))
    unknown = present - known
    if unknown:
        raise UnknownClassValue(sorted(unknown)[0])
    return ids


def _decode_mask(mask_uri) -> np.ndarray:
    with Image.open(mask_uri) as img:
        if img.mode in ("L", "P"):
            return np.asarray(img)
        if img.mode in ("RGB", "RGBA"):
            return np.asarray(img.convert("RGB"))
        return np.asarray(img.convert("L"))


def load_mask_ids(mask_uri, palette: ClassPalette) -> np.ndarray:
    """Read a mask file into a class-id grid.

    Accepts 8-bit single-channel id masks (modes L and P, where P pixels are
    palette indices) and RGB color masks matched against palette colors.
    """
    return mask_ids_from_array(_decode_mask(mask_uri), palette)


def extract_classes_from_array(arr, palette: ClassPalette) -> list[str]:
    """Class names present in a decoded mask, in palette order."""
    ids = mask_ids_from_array(arr, palette)
    present = set(int(v) for v in np.unique(ids))
    return [c.name for c in palette.classes if c.id in present]


def extract_classes(mask_uri, palette: ClassPalette) -> list[str]:
    """Read a mask file and list the classes it contains, in palette order."""
    return extract_classes_from_array(_decode_mask(mask_uri), palette)


def build_vlm_prompt(classes: Sequence[str], taxonomy: SubgroupTaxonomy) -> str:
    """The VLM query: object classes spliced in, subgroup phrases to avoid."""
    if not classes:
        raise EmptyMaskError("cannot build a prompt from an empty class list")
    phrases = [z.phrase for z in enumerate_subgroups(taxonomy)]
    return VLM_PROMPT_TEMPLATE.format(
        classes=", ".join(classes), subgroups=", ".join(phrases)
    )


def _vocabulary(taxonomy: SubgroupTaxonomy) -> list[str]:
    """Subgroup spellings to scrub: full values, aliases, and their words."""
    terms: set[str] = set()
    for d in taxonomy.dimensions:
        for v in list(d.values) + list(d.aliases):
            terms.add(v)
            for word in re.findall(r"[A-Za-z]+", v):
                terms.add(word)
    # longest first so multi-word values are removed before their pieces
    return sorted(terms, key=len, reverse=True)


def scrub_subgroup_terms(caption: str, taxonomy: SubgroupTaxonomy) -> str:
    """Remove subgroup vocabulary from a caption, case-insensitively.

    Whole-word matches of every dimension value, alias, and their component
    words are dropped and runs of whitespace collapse to one space.  The
    operation is idempotent.
    """
    terms = _vocabulary(taxonomy)
    if not terms:
        return caption
    pattern = re.compile(
        r"(?<![A-Za-z])(?:" + "|".join(re.escape(t) for t in terms) + r")(?![A-Za-z])",
        re.IGNORECASE,
    )
    if pattern.search(caption) is None:
        return caption
    scrubbed = pattern.sub(" ", caption)
    return " ".join(scrubbed.split())


def style_sentence(
    taxonomy: SubgroupTaxonomy,
    target: Subgroup,
    template: Optional[str] = None,
) -> str:
    """Render the target-subgroup style sentence with lowercase value words.

    The default template covers a weather x time_of_day taxonomy; other
    shapes fall back to a generic phrase-based sentence unless ``template``
    is supplied.
    """
    values = taxonomy.values_of(target)
    fields = {d.name: v.lower() for d, v in zip(taxonomy.dimensions, values)}
    fields["phrase"] = target.phrase.lower()
    if "time_of_day" in fields:
        fields.setdefault("time", fields["time_of_day"])
    if template is None:
        names = [d.name for d in taxonomy.dimensions]
        template = (
            DEFAULT_STYLE_TEMPLATE
            if names == ["weather", "time_of_day"]
            else GENERIC_STYLE_TEMPLATE
        )
    try:
        return template.format(**fields)
    except (KeyError, IndexError) as e:
        raise SchemaError("style_template", f"unknown field {e}") from e


def compose_caption(
    caption: str,
    target: Subgroup,
    taxonomy: SubgroupTaxonomy,
    template: Optional[str] = None,
) -> str:
    """c* = c followed by the style sentence for the target subgroup."""
    if not caption:
        raise EmptyCaption("cannot style an empty caption")
    return caption + " " + style_sentence(taxonomy, target, template)


def prompt_hash(prompt: str) -> str:
    return f"{fnv1a64(prompt.encode('utf-8')):016x}"


@dataclass(frozen=True)
class CaptionBundle:
    """The caption trail for one synthesis job: p, c, and optionally c*."""

    prompt: str
    base_caption: str
    styled_caption: Optional[str]
    source_subgroup: Subgroup
    target_subgroup: Optional[Subgroup]

    def __post_init__(self):
        if (self.styled_caption is None) != (self.target_subgroup is None):
            raise InvariantError(
                "styled_caption and target_subgroup must be present together"
            )


class CaptionCache:
    """In-memory base-caption cache keyed by (sample id, prompt hash).

    Repeated synthesis jobs for the same source sample reuse one VLM call as
    long as the prompt (hence the mask class list) is unchanged.
    """

    def __init__(self):
        self._entries: dict[tuple[str, str], str] = {}
        self.hits = 0
        self.misses = 0

    def get(self, sample_id: str, prompt: str) -> Optional[str]:
        key = (sample_id, prompt_hash(prompt))
        found = self._entries.get(key)
        if found is None:
            self.misses += 1
        else:
            self.hits += 1
        return found

    def put(self, sample_id: str, prompt: str, caption: str) -> None:
        self._entries[(sample_id, prompt_hash(prompt))] = caption

    def __len__(self) -> int:
        return len(self._entries)

"""Dataset model, subgroup taxonomy, and line-delimited manifest persistence.

A manifest file is UTF-8 text: one JSON header line carrying the taxonomy and
provenance, then one JSON object per sample line.  Serialization is canonical
(fixed key order, compact separators, sorted provenance keys) so that saving
the same manifest twice yields identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .errors import InvariantError, ParseError, SchemaError, TaxonomyError

MANIFEST_VERSION = 1

ORIGIN_ORIGINAL = "original"
ORIGIN_SYNTHETIC = "synthetic"
_ORIGINS = (ORIGIN_ORIGINAL, ORIGIN_SYNTHETIC)

ANNOTATION_MASK = "segmentation_mask"
ANNOTATION_WAYPOINTS = "waypoints"
_ANNOTATION_KINDS = (ANNOTATION_MASK, ANNOTATION_WAYPOINTS)


@dataclass(frozen=True)
class Dimension:
    """One labeled semantic axis, e.g. weather over (Rain, Clear, Cloudy).

    ``aliases`` maps ingestion spellings to canonical values; matching is
    case-insensitive on both aliases and canonical values.
    """

    name: str
    values: tuple[str, ...]
    aliases: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "aliases", dict(self.aliases))
        if not self.name:
            raise TaxonomyError("dimension name must be non-empty")
        if len(self.values) < 2:
            raise TaxonomyError(f"dimension {self.name!r} needs >= 2 values")
        folded = [v.casefold() for v in self.values]
        if len(set(folded)) != len(folded):
            # case-insensitive uniqueness keeps lowercase style rendering
            # injective over the taxonomy
            raise TaxonomyError(f"dimension {self.name!r} has duplicate values")
        for v in self.values:
            if "," in v:
                # phrase rendering joins values with ", "; a comma inside a
                # value would break injectivity
                raise TaxonomyError(f"value {v!r} may not contain a comma")
        for alias, target in self.aliases.items():
            if target not in self.values:
                raise TaxonomyError(
                    f"alias {alias!r} targets unknown value {target!r}"
                )

    def canonical(self, raw: str) -> str:
        """Resolve ``raw`` to a canonical value, honoring the alias table."""
        folded = raw.strip().casefold()
        for v in self.values:
            if v.casefold() == folded:
                return v
        for alias, target in self.aliases.items():
            if alias.casefold() == folded:
                return target
        raise TaxonomyError(f"{raw!r} is not a value of dimension {self.name!r}")


@dataclass(frozen=True)
class Subgroup:
    """One cell of the condition cross-product: coordinates plus its phrase."""

    coordinates: tuple[int, ...]
    phrase: str

    def __post_init__(self):
        object.__setattr__(self, "coordinates", tuple(self.coordinates))


@dataclass(frozen=True)
class SubgroupTaxonomy:
    dimensions: tuple[Dimension, ...]

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(self.dimensions))
        if not self.dimensions:
            raise TaxonomyError("taxonomy needs >= 1 dimension")
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise TaxonomyError("dimension names must be unique")

    @property
    def size(self) -> int:
        n = 1
        for d in self.dimensions:
            n *= len(d.values)
        return n

    def subgroup(self, coordinates: Sequence[int]) -> Subgroup:
        coords = tuple(coordinates)
        if len(coords) != len(self.dimensions):
            raise TaxonomyError(
                f"expected {len(self.dimensions)} coordinates, got {len(coords)}"
            )
        for i, (c, d) in enumerate(zip(coords, self.dimensions)):
            if not isinstance(c, int) or isinstance(c, bool):
                raise TaxonomyError(f"coordinate {i} is not an integer")
            if not 0 <= c < len(d.values):
                raise TaxonomyError(
                    f"coordinate {c} out of range for dimension {d.name!r}"
                )
        phrase = ", ".join(d.values[c] for c, d in zip(coords, self.dimensions))
        return Subgroup(coords, phrase)

    def values_of(self, s: Subgroup) -> tuple[str, ...]:
        return tuple(
            d.values[c] for c, d in zip(s.coordinates, self.dimensions)
        )

    def flat_index(self, s: Subgroup) -> int:
        """Position of ``s`` in enumeration order (first dimension outermost)."""
        idx = 0
        for c, d in zip(s.coordinates, self.dimensions):
            idx = idx * len(d.values) + c
        return idx

    def from_values(self, values: Sequence[str]) -> Subgroup:
        """Build a subgroup from raw value spellings, resolving aliases."""
        if len(values) != len(self.dimensions):
            raise TaxonomyError(
                f"expected {len(self.dimensions)} values, got {len(values)}"
            )
        coords = []
        for raw, d in zip(values, self.dimensions):
            coords.append(d.values.index(d.canonical(raw)))
        return self.subgroup(coords)


def enumerate_subgroups(t: SubgroupTaxonomy) -> list[Subgroup]:
    """All subgroups in deterministic lexicographic order.

    The first dimension varies slowest; within a dimension, declared value
    order is kept.  Length equals the product of dimension cardinalities.
    """
    out: list[Subgroup] = []

    def rec(prefix: tuple[int, ...], rest: tuple[Dimension, ...]):
        if not rest:
            out.append(t.subgroup(prefix))
            return
        for i in range(len(rest[0].values)):
            rec(prefix + (i,), rest[1:])

    rec((), t.dimensions)
    return out


def default_taxonomy() -> SubgroupTaxonomy:
    """Weather x time-of-day grid used by the driving datasets (9 subgroups)."""
    return SubgroupTaxonomy(
        (
            Dimension(
                "weather",
                ("Rain", "Clear", "Cloudy"),
                aliases={"Rainy": "Rain", "Wet": "Rain", "Overcast": "Cloudy"},
            ),
            Dimension(
                "time_of_day",
                ("Dawn / Dusk", "Day", "Night"),
                aliases={
                    "Dawn/Dusk": "Dawn / Dusk",
                    "Twilight": "Dawn / Dusk",
                    "Dawn": "Dawn / Dusk",
                    "Dusk": "Dawn / Dusk",
                    "Morning": "Day",
                    "Daytime": "Day",
                },
            ),
        )
    )


@dataclass(frozen=True)
class SampleRecord:
    """One dataset entry: image plus annotation, optionally labeled/embedded."""

    id: str
    image_uri: str
    mask_uri: str
    subgroup: Optional[Subgroup] = None
    embedding_ref: Optional[int] = None
    origin: str = ORIGIN_ORIGINAL
    parent_id: Optional[str] = None
    annotation_kind: str = ANNOTATION_MASK

    def __post_init__(self):
        if not self.id:
            raise SchemaError("id", "must be non-empty")
        if not self.image_uri:
            raise SchemaError("image_uri", "must be non-empty")
        if not self.mask_uri:
            raise SchemaError("mask_uri", "must be non-empty")
        if self.origin not in _ORIGINS:
            raise SchemaError("origin", f"unknown origin {self.origin!r}")
        if self.annotation_kind not in _ANNOTATION_KINDS:
            raise SchemaError(
                "annotation_kind", f"unknown kind {self.annotation_kind!r}"
            )
        if self.embedding_ref is not None:
            if not isinstance(self.embedding_ref, int) or self.embedding_ref < 0:
                raise SchemaError("embedding_ref", "must be a non-negative integer")

    @property
    def is_synthetic(self) -> bool:
        return self.origin == ORIGIN_SYNTHETIC


@dataclass(frozen=True)
class DatasetManifest:
    taxonomy: SubgroupTaxonomy
    samples: tuple[SampleRecord, ...]
    provenance: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "provenance", dict(self.provenance))
        self.validate()

    def validate(self):
        """Check structural invariants; also re-run by save_manifest."""
        by_id: dict[str, SampleRecord] = {}
        for s in self.samples:
            if s.id in by_id:
                raise SchemaError("id", f"duplicate sample id {s.id!r}")
            by_id[s.id] = s
        object.__setattr__(self, "_index", by_id)
        for s in self.samples:
            if s.subgroup is not None:
                # re-derive through the taxonomy: range-checks coordinates
                # and pins the phrase to this taxonomy's rendering
                rebuilt = self.taxonomy.subgroup(s.subgroup.coordinates)
                if rebuilt.phrase != s.subgroup.phrase:
                    raise TaxonomyError(
                        f"sample {s.id!r} phrase {s.subgroup.phrase!r} does not "
                        f"match taxonomy rendering {rebuilt.phrase!r}"
                    )
            if s.is_synthetic:
                if s.parent_id is None:
                    raise InvariantError(
                        f"synthetic sample {s.id!r} has no parent_id"
                    )
                parent = by_id.get(s.parent_id)
                if parent is not None and parent.mask_uri != s.mask_uri:
                    raise InvariantError(
                        f"synthetic sample {s.id!r} does not reuse parent mask"
                    )
            elif s.parent_id is not None:
                raise InvariantError(
                    f"original sample {s.id!r} must not carry parent_id"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self, sample_id: str) -> SampleRecord:
        return self._index[sample_id]

    def counts_by_subgroup(self) -> dict[Subgroup, int]:
        """Labeled-sample counts for every subgroup (zeros included)."""
        counts = {z: 0 for z in enumerate_subgroups(self.taxonomy)}
        for s in self.samples:
            if s.subgroup is not None:
                counts[self.taxonomy.subgroup(s.subgroup.coordinates)] += 1
        return counts


# --- serialization ---

def _taxonomy_to_json(t: SubgroupTaxonomy) -> dict:
    dims = []
    for d in t.dimensions:
        obj: dict[str, object] = {"name": d.name, "values": list(d.values)}
        if d.aliases:
            obj["aliases"] = {k: d.aliases[k] for k in sorted(d.aliases)}
        dims.append(obj)
    return {"dimensions": dims}


def _taxonomy_from_json(obj, line_number: int) -> SubgroupTaxonomy:
    if not isinstance(obj, dict) or "dimensions" not in obj:
        raise SchemaError("taxonomy", "missing dimensions array")
    dims = []
    for dobj in obj["dimensions"]:
        if not isinstance(dobj, dict):
            raise SchemaError("taxonomy.dimensions", "dimension must be an object")
        name = dobj.get("name")
        values = dobj.get("values")
        if not isinstance(name, str):
            raise SchemaError("taxonomy.dimensions.name")
        if not isinstance(values, list) or not all(
            isinstance(v, str) for v in values
        ):
            raise SchemaError("taxonomy.dimensions.values")
        aliases = dobj.get("aliases", {})
        if not isinstance(aliases, dict):
            raise SchemaError("taxonomy.dimensions.aliases")
        extra = set(dobj) - {"name", "values", "aliases"}
        if extra:
            raise SchemaError(f"taxonomy.dimensions.{sorted(extra)[0]}", "unknown field")
        dims.append(Dimension(name, tuple(values), aliases))
    return SubgroupTaxonomy(tuple(dims))


def taxonomy_to_json(t: SubgroupTaxonomy) -> dict:
    """Public name for the header taxonomy layout (shared by other artifacts)."""
    return _taxonomy_to_json(t)


def taxonomy_from_json(obj) -> SubgroupTaxonomy:
    return _taxonomy_from_json(obj, 1)


_SAMPLE_FIELDS = (
    "id",
    "image_uri",
    "mask_uri",
    "subgroup",
    "embedding_ref",
    "origin",
    "parent_id",
    "annotation_kind",
)


def _sample_to_json(s: SampleRecord) -> dict:
    return {
        "id": s.id,
        "image_uri": s.image_uri,
        "mask_uri": s.mask_uri,
        "subgroup": list(s.subgroup.coordinates) if s.subgroup else None,
        "embedding_ref": s.embedding_ref,
        "origin": s.origin,
        "parent_id": s.parent_id,
        "annotation_kind": s.annotation_kind,
    }


def _require(obj: dict, key: str, line_number: int):
    if key not in obj:
        raise SchemaError(key, f"missing on line {line_number}")
    return obj[key]


def _sample_from_json(obj: dict, taxonomy: SubgroupTaxonomy, line_number: int) -> SampleRecord:
    extra = set(obj) - set(_SAMPLE_FIELDS)
    if extra:
        raise SchemaError(sorted(extra)[0], f"unknown field on line {line_number}")
    sid = _require(obj, "id", line_number)
    if not isinstance(sid, str):
        raise SchemaError("id", "must be a string")
    image_uri = _require(obj, "image_uri", line_number)
    mask_uri = _require(obj, "mask_uri", line_number)
    if not isinstance(image_uri, str) or not isinstance(mask_uri, str):
        raise SchemaError("image_uri" if not isinstance(image_uri, str) else "mask_uri")
    coords = _require(obj, "subgroup", line_number)
    subgroup = None
    if coords is not None:
        if not isinstance(coords, list) or not all(
            isinstance(c, int) and not isinstance(c, bool) for c in coords
        ):
            raise SchemaError("subgroup", "must be null or an array of integers")
        subgroup = taxonomy.subgroup(coords)
    embedding_ref = _require(obj, "embedding_ref", line_number)
    if embedding_ref is not None and (
        not isinstance(embedding_ref, int) or isinstance(embedding_ref, bool)
    ):
        raise SchemaError("embedding_ref", "must be null or an integer")
    origin = _require(obj, "origin", line_number)
    parent_id = _require(obj, "parent_id", line_number)
    if parent_id is not None and not isinstance(parent_id, str):
        raise SchemaError("parent_id", "must be null or a string")
    kind = _require(obj, "annotation_kind", line_number)
    return SampleRecord(
        id=sid,
        image_uri=image_uri,
        mask_uri=mask_uri,
        subgroup=subgroup,
        embedding_ref=embedding_ref,
        origin=origin,
        parent_id=parent_id,
        annotation_kind=kind,
    )


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=False)


def manifest_to_bytes(m: DatasetManifest) -> bytes:
    """Canonical byte serialization (what save_manifest writes)."""
    header = {
        "version": MANIFEST_VERSION,
        "taxonomy": _taxonomy_to_json(m.taxonomy),
        "provenance": json.loads(
            json.dumps(m.provenance, sort_keys=True, separators=(",", ":"))
        ),
    }
    lines = [
        json.dumps(header, separators=(",", ":"), sort_keys=False)
    ]
    lines.extend(_dump_line(_sample_to_json(s)) for s in m.samples)
    return ("\n".join(lines) + "\n").encode("utf-8")


def manifest_from_bytes(data: bytes) -> DatasetManifest:
    text = data.decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(1, "empty file, expected header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(1, str(e)) from e
    if not isinstance(header, dict):
        raise ParseError(1, "header must be a JSON object")
    version = header.get("version")
    if version != MANIFEST_VERSION:
        raise SchemaError("version", f"expected {MANIFEST_VERSION}, got {version!r}")
    taxonomy = _taxonomy_from_json(header.get("taxonomy"), 1)
    provenance = header.get("provenance", {})
    if not isinstance(provenance, dict):
        raise SchemaError("provenance", "must be an object")
    samples = []
    for i, line in enumerate(lines[1:], start=2):
        if line == "":
            raise ParseError(i, "blank line inside manifest")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(i, str(e)) from e
        if not isinstance(obj, dict):
            raise ParseError(i, "sample line must be a JSON object")
        samples.append(_sample_from_json(obj, taxonomy, i))
    return DatasetManifest(taxonomy, tuple(samples), provenance)


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest file, validating all structural invariants."""
    return manifest_from_bytes(Path(path).read_bytes())


def save_manifest(m: DatasetManifest, path) -> None:
    """Write ``m`` canonically; same manifest in, same bytes out.

    Invariants are re-checked first so a manifest constructed through a
    back door still cannot reach disk in an inconsistent state.
    """
    m.validate()
    data = manifest_to_bytes(m)
    Path(path).write_bytes(data)

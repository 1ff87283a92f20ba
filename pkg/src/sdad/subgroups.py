"""Zero-shot subgroup assignment and dataset distribution analysis.

An image is assigned the subgroup whose text embedding has the largest dot
product with the image embedding.  Similarity is the raw dot product; a
``normalize`` flag switches to cosine by unit-normalizing both sides first,
but defaults off.  Ties go to the earliest subgroup in taxonomy enumeration
order, which makes assignment fully deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .embeddings import EmbeddingStore, as_vector, l2_normalize
from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyBank,
    MissingEmbedding,
    UnlabeledSample,
)
from .manifest import (
    DatasetManifest,
    Subgroup,
    SubgroupTaxonomy,
    enumerate_subgroups,
)
from .rng import fnv1a64

DEFAULT_PROMPT_TEMPLATE = "A photo taken in {weather} weather at {time} time"

POLICY_BELOW_UNIFORM = "below_uniform"
POLICY_BELOW_THRESHOLD = "below_threshold"


def render_prompt(
    taxonomy: SubgroupTaxonomy, subgroup: Subgroup, template: str = DEFAULT_PROMPT_TEMPLATE
) -> str:
    """Fill ``template`` for one subgroup.

    Available fields: each dimension name, ``phrase``, and ``time`` as a
    shorthand for a dimension named ``time_of_day``.
    """
    values = taxonomy.values_of(subgroup)
    fields = {d.name: v for d, v in zip(taxonomy.dimensions, values)}
    fields["phrase"] = subgroup.phrase
    if "time_of_day" in fields:
        fields.setdefault("time", fields["time_of_day"])
    try:
        return template.format(**fields)
    except (KeyError, IndexError) as e:
        raise ConfigError(
            f"prompt template {template!r} references unknown field {e}"
        ) from e


@dataclass(frozen=True)
class SubgroupTextBank:
    """Per-subgroup prompt text and text embedding, in enumeration order."""

    taxonomy: SubgroupTaxonomy
    prompts: tuple[str, ...]
    matrix: np.ndarray  # |Z| x d, float64

    def __post_init__(self):
        subgroups = enumerate_subgroups(self.taxonomy)
        if len(self.prompts) != len(subgroups):
            raise EmptyBank(
                f"bank has {len(self.prompts)} prompts for {len(subgroups)} subgroups"
            )
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != len(subgroups):
            raise DimensionMismatch(
                f"bank matrix shape {m.shape}, expected ({len(subgroups)}, d)"
            )
        if m.shape[1] == 0 or not np.isfinite(m).all():
            raise DimensionMismatch("bank matrix must be finite with d >= 1")
        object.__setattr__(self, "prompts", tuple(self.prompts))
        object.__setattr__(self, "matrix", m)

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def subgroups(self) -> list[Subgroup]:
        return enumerate_subgroups(self.taxonomy)

    def content_hash(self) -> str:
        """Stable hex digest over prompts and embedding bytes, for provenance."""
        h = bytearray()
        for p in self.prompts:
            b = p.encode("utf-8")
            h += len(b).to_bytes(8, "little")
            h += b
        h += self.matrix.astype("<f8").tobytes()
        return f"{fnv1a64(bytes(h)):016x}"

    @classmethod
    def from_backend(
        cls,
        taxonomy: SubgroupTaxonomy,
        backend,
        template: str = DEFAULT_PROMPT_TEMPLATE,
    ) -> "SubgroupTextBank":
        """Embed one prompt per subgroup through ``backend.embed_text``."""
        subgroups = enumerate_subgroups(taxonomy)
        if not subgroups:
            raise EmptyBank("taxonomy enumerates no subgroups")
        prompts = [render_prompt(taxonomy, z, template) for z in subgroups]
        rows = [as_vector(backend.embed_text(p)) for p in prompts]
        dims = {r.size for r in rows}
        if len(dims) != 1:
            raise DimensionMismatch(f"backend returned mixed dimensions {sorted(dims)}")
        return cls(taxonomy, tuple(prompts), np.stack(rows))

    def save(self, path) -> None:
        """Persist as JSON: taxonomy (manifest header layout), prompts, matrix."""
        from .manifest import taxonomy_to_json

        doc = {
            "taxonomy": taxonomy_to_json(self.taxonomy),
            "prompts": list(self.prompts),
            "matrix": [[float(x) for x in row] for row in self.matrix],
        }
        Path(path).write_text(
            json.dumps(doc, separators=(",", ":")) + "\n", "utf-8"
        )

    @classmethod
    def load(cls, path) -> "SubgroupTextBank":
        from .manifest import taxonomy_from_json

        obj = json.loads(Path(path).read_text("utf-8"))
        if not isinstance(obj, dict):
            raise EmptyBank("bank file must be a JSON object")
        for key in ("taxonomy", "prompts", "matrix"):
            if key not in obj:
                raise EmptyBank(f"bank file is missing {key!r}")
        taxonomy = taxonomy_from_json(obj["taxonomy"])
        return cls(taxonomy, tuple(obj["prompts"]), np.asarray(obj["matrix"]))


def identify_subgroup(
    image_embedding,
    bank: SubgroupTextBank,
    normalize: bool = False,
) -> tuple[Subgroup, dict[Subgroup, float]]:
    """Argmax of per-subgroup dot products; returns the winner and all scores.

    With ``normalize`` both the image embedding and every bank row are scaled
    to unit norm first (cosine similarity).  The score map covers all of Z for
    auditability.
    """
    img = as_vector(image_embedding)
    if img.size != bank.dimension:
        raise DimensionMismatch(
            f"image embedding has dimension {img.size}, bank has {bank.dimension}"
        )
    matrix = bank.matrix
    if normalize:
        img = l2_normalize(img)
        matrix = matrix / np.linalg.norm(matrix, axis=1, keepdims=True)
    scores = matrix @ img
    # np.argmax returns the first maximal index, which is exactly the
    # enumeration-order tie-break
    winner = int(np.argmax(scores))
    subgroups = bank.subgroups
    score_map = {z: float(s) for z, s in zip(subgroups, scores)}
    return subgroups[winner], score_map


def label_dataset(
    m: DatasetManifest,
    store: EmbeddingStore,
    bank: SubgroupTextBank,
    overwrite: bool = False,
    normalize: bool = False,
) -> DatasetManifest:
    """Return a manifest where every sample carries a subgroup label.

    Existing labels are kept unless ``overwrite``; everything else is
    identified from its stored embedding.  Output order follows input order.
    """
    labeled = []
    for s in m.samples:
        if s.subgroup is not None and not overwrite:
            labeled.append(s)
            continue
        if s.embedding_ref is None:
            raise MissingEmbedding(s.id)
        z, _ = identify_subgroup(store.get_row(s.embedding_ref), bank, normalize)
        labeled.append(replace(s, subgroup=z))
    provenance = dict(m.provenance)
    provenance["bank_hash"] = bank.content_hash()
    return DatasetManifest(m.taxonomy, tuple(labeled), provenance)


@dataclass(frozen=True)
class SubgroupDistribution:
    """Counts and fractions per subgroup, in taxonomy enumeration order."""

    taxonomy: SubgroupTaxonomy
    counts: Mapping[Subgroup, int]
    fractions: Mapping[Subgroup, float] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        order = enumerate_subgroups(self.taxonomy)
        counts = {z: int(self.counts.get(z, 0)) for z in order}
        if any(c < 0 for c in counts.values()):
            raise ValueError("counts must be non-negative")
        total = sum(counts.values())
        fractions = {
            z: (c / total if total else 0.0) for z, c in counts.items()
        }
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "fractions", fractions)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def entropy(self) -> float:
        """Shannon entropy (nats) of the subgroup mixture."""
        h = 0.0
        for f in self.fractions.values():
            if f > 0:
                h -= f * float(np.log(f))
        return h


def compute_distribution(m: DatasetManifest) -> SubgroupDistribution:
    """Per-subgroup counts over a fully labeled manifest; zeros included."""
    for s in m.samples:
        if s.subgroup is None:
            raise UnlabeledSample(s.id)
    return SubgroupDistribution(m.taxonomy, m.counts_by_subgroup())


def underrepresented(
    d: SubgroupDistribution,
    policy: str = POLICY_BELOW_UNIFORM,
    threshold: Optional[float] = None,
) -> list[Subgroup]:
    """Subgroups whose fraction falls below the policy cutoff.

    ``below_uniform`` uses 1/|Z|; ``below_threshold`` uses ``threshold``.
    Result is ordered by ascending fraction, ties by enumeration order.
    """
    if policy == POLICY_BELOW_UNIFORM:
        cutoff = 1.0 / d.taxonomy.size
    elif policy == POLICY_BELOW_THRESHOLD:
        if threshold is None:
            raise ConfigError("below_threshold policy needs a threshold")
        cutoff = float(threshold)
    else:
        raise ConfigError(f"unknown policy {policy!r}")
    order = enumerate_subgroups(d.taxonomy)
    below = [z for z in order if d.fractions[z] < cutoff]
    return sorted(below, key=lambda z: d.fractions[z])

"""The synthetic data augmentation engine.

Each synthesis job follows the same line sequence: sample a source pair
(x, y) uniformly from the original samples, identify its subgroup z (reusing
the manifest label when present, embedding the image otherwise), build the
VLM query from the mask's class list, caption through the backend, scrub
subgroup vocabulary from the caption, pick a target subgroup z*, append the
z* style sentence, and generate a synthetic image conditioned on the source
mask and the styled caption.  The synthetic record reuses the source mask
verbatim, which is what makes the produced labels free.

Determinism: each job index i owns an independent SplitMix64 stream seeded
with ``stream_seed(plan.seed, i)``.  Under the ``uniform_excluding_source``
policy the stream is consumed as (source draw, z* draw, generate seed); under
``balance_to_uniform`` the z* draw is skipped because targets are allocated
up front.  This makes every job reproducible in isolation, so bounded
parallel execution yields outputs identical to a sequential run.

Completed jobs append one JSON line to ``<out>/journal.jsonl``; a rerun over
the same output directory skips indices already journaled (after checking
they match what the current plan would produce) and regenerates anything
missing, so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .backend import RemoteBackend
from .captions import (
    CaptionCache,
    ClassPalette,
    build_vlm_prompt,
    compose_caption,
    extract_classes,
    scrub_subgroup_terms,
)
from .errors import (
    AugmentationJobError,
    BackendError,
    ConfigError,
    EmptyDataset,
    InvariantError,
    ParseError,
    SingletonTaxonomy,
)
from .manifest import (
    ANNOTATION_MASK,
    ORIGIN_SYNTHETIC,
    DatasetManifest,
    SampleRecord,
    Subgroup,
    SubgroupTaxonomy,
    enumerate_subgroups,
)
from .rng import SplitMix64, stream_seed
from .subgroups import (
    SubgroupDistribution,
    SubgroupTextBank,
    compute_distribution,
    identify_subgroup,
)

POLICY_UNIFORM_EXCLUDING_SOURCE = "uniform_excluding_source"
POLICY_BALANCE_TO_UNIFORM = "balance_to_uniform"
_POLICIES = (POLICY_UNIFORM_EXCLUDING_SOURCE, POLICY_BALANCE_TO_UNIFORM)

MASK_FROM_DATASET = "dataset_mask"
MASK_FROM_SEGMENTER = "external_segmenter"
_MASK_SOURCES = (MASK_FROM_DATASET, MASK_FROM_SEGMENTER)

JOURNAL_NAME = "journal.jsonl"
IMAGES_DIR = "images"


@dataclass(frozen=True)
class AugmentationPlan:
    n_synth: int
    seed: int = 0
    target_policy: str = POLICY_UNIFORM_EXCLUDING_SOURCE
    caption_cache: bool = True
    mask_source: str = MASK_FROM_DATASET
    style_template: Optional[str] = None

    def __post_init__(self):
        if self.n_synth < 0:
            raise ConfigError("n_synth must be >= 0")
        if self.target_policy not in _POLICIES:
            raise ConfigError(f"unknown target_policy {self.target_policy!r}")
        if self.mask_source not in _MASK_SOURCES:
            raise ConfigError(f"unknown mask_source {self.mask_source!r}")

    def to_json(self) -> dict:
        out: dict[str, object] = {
            "n_synth": self.n_synth,
            "seed": self.seed,
            "target_policy": self.target_policy,
            "caption_cache": self.caption_cache,
            "mask_source": self.mask_source,
        }
        if self.style_template is not None:
            out["style_template"] = self.style_template
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "AugmentationPlan":
        if not isinstance(obj, dict):
            raise ConfigError("plan must be a JSON object")
        known = {
            "n_synth",
            "seed",
            "target_policy",
            "caption_cache",
            "mask_source",
            "style_template",
            "palette",
        }
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown plan key {sorted(unknown)[0]!r}")
        if "n_synth" not in obj:
            raise ConfigError("plan needs n_synth")
        return cls(
            n_synth=obj["n_synth"],
            seed=obj.get("seed", 0),
            target_policy=obj.get("target_policy", POLICY_UNIFORM_EXCLUDING_SOURCE),
            caption_cache=obj.get("caption_cache", True),
            mask_source=obj.get("mask_source", MASK_FROM_DATASET),
            style_template=obj.get("style_template"),
        )


@dataclass(frozen=True)
class AugmentationRecord:
    """Everything one finished job produced, minus the pixels."""

    job_index: int
    source_id: str
    source_subgroup: tuple[int, ...]
    target_subgroup: tuple[int, ...]
    styled_caption: str
    generate_seed: int
    image_uri: str
    wall_time_ms: float = 0.0

    def to_json(self) -> dict:
        return {
            "job_index": self.job_index,
            "source_id": self.source_id,
            "source_subgroup": list(self.source_subgroup),
            "target_subgroup": list(self.target_subgroup),
            "styled_caption": self.styled_caption,
            "generate_seed": self.generate_seed,
            "image_uri": self.image_uri,
            "wall_time_ms": self.wall_time_ms,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AugmentationRecord":
        return cls(
            job_index=obj["job_index"],
            source_id=obj["source_id"],
            source_subgroup=tuple(obj["source_subgroup"]),
            target_subgroup=tuple(obj["target_subgroup"]),
            styled_caption=obj["styled_caption"],
            generate_seed=obj["generate_seed"],
            image_uri=obj["image_uri"],
            wall_time_ms=obj.get("wall_time_ms", 0.0),
        )


def sample_source(m: DatasetManifest, rng: SplitMix64) -> SampleRecord:
    """Uniform draw over the original samples."""
    originals = [s for s in m.samples if not s.is_synthetic]
    if not originals:
        raise EmptyDataset("no original samples to draw from")
    return originals[rng.next_below(len(originals))]


def sample_target_subgroup(
    z: Subgroup, t: SubgroupTaxonomy, rng: SplitMix64
) -> Subgroup:
    """z* ~ uniform over Z minus the source subgroup."""
    candidates = [w for w in enumerate_subgroups(t) if w != z]
    if not candidates:
        raise SingletonTaxonomy("need >= 2 subgroups to pick a distinct target")
    return candidates[rng.next_below(len(candidates))]


def balance_targets(d: SubgroupDistribution, n_synth: int) -> dict[Subgroup, int]:
    """Per-subgroup synthesis counts that level the final distribution.

    Water-filling: raise the lowest counts toward a common level L chosen so
    the real-valued allocation sums to n_synth, then round by largest
    remainder (ties by enumeration order).  Minimizes the maximum absolute
    deviation from uniform achievable with integer counts.
    """
    if n_synth < 0:
        raise ConfigError("n_synth must be >= 0")
    order = enumerate_subgroups(d.taxonomy)
    counts = [d.counts[z] for z in order]
    if n_synth == 0:
        return {z: 0 for z in order}

    # find the water level: below it every group is topped up to L
    lo, hi = 0.0, max(counts) + n_synth
    for _ in range(200):
        mid = (lo + hi) / 2
        filled = sum(max(0.0, mid - c) for c in counts)
        if filled < n_synth:
            lo = mid
        else:
            hi = mid
    level = (lo + hi) / 2
    ideal = [max(0.0, level - c) for c in counts]
    scale = n_synth / sum(ideal) if sum(ideal) > 0 else 0.0
    ideal = [x * scale for x in ideal]

    floors = [int(x) for x in ideal]
    remainder = n_synth - sum(floors)
    by_frac = sorted(
        range(len(order)), key=lambda i: (-(ideal[i] - floors[i]), i)
    )
    alloc = list(floors)
    for i in by_frac[:remainder]:
        alloc[i] += 1
    return {z: a for z, a in zip(order, alloc)}


class _SourceContext:
    """Per-sample lazily computed state shared across jobs: label, prompt, bytes."""

    def __init__(
        self,
        taxonomy: SubgroupTaxonomy,
        backend,
        bank: SubgroupTextBank,
        palette: Optional[ClassPalette],
        base_dir: Path,
        cache_captions: bool,
    ):
        self.taxonomy = taxonomy
        self.backend = backend
        self.bank = bank
        self.palette = palette
        self.base_dir = base_dir
        self.caption_cache = CaptionCache() if cache_captions else None
        self._labels: dict[str, Subgroup] = {}
        self._prompts: dict[str, str] = {}
        self._image_bytes: dict[str, bytes] = {}
        self._mask_bytes: dict[str, bytes] = {}

    def resolve(self, uri: str) -> Path:
        p = Path(uri)
        return p if p.is_absolute() else self.base_dir / p

    def image_bytes(self, s: SampleRecord) -> bytes:
        if s.id not in self._image_bytes:
            self._image_bytes[s.id] = self.resolve(s.image_uri).read_bytes()
        return self._image_bytes[s.id]

    def mask_bytes(self, s: SampleRecord) -> bytes:
        if s.id not in self._mask_bytes:
            self._mask_bytes[s.id] = self.resolve(s.mask_uri).read_bytes()
        return self._mask_bytes[s.id]

    def label(self, s: SampleRecord) -> Subgroup:
        if s.subgroup is not None:
            return self.taxonomy.subgroup(s.subgroup.coordinates)
        if s.id not in self._labels:
            emb = self.backend.embed_image(self.image_bytes(s))
            z, _ = identify_subgroup(emb, self.bank)
            self._labels[s.id] = z
        return self._labels[s.id]

    def prompt(self, s: SampleRecord) -> str:
        if s.id not in self._prompts:
            if self.palette is not None and s.annotation_kind == ANNOTATION_MASK:
                classes = extract_classes(self.resolve(s.mask_uri), self.palette)
            else:
                # waypoint annotations (or no palette) give nothing to parse;
                # fall back to a generic scene subject
                classes = ["scene"]
            self._prompts[s.id] = build_vlm_prompt(classes, self.taxonomy)
        return self._prompts[s.id]

    def base_caption(self, s: SampleRecord) -> str:
        prompt = self.prompt(s)
        if self.caption_cache is not None:
            hit = self.caption_cache.get(s.id, prompt)
            if hit is not None:
                return hit
        raw = self.backend.caption_image(self.image_bytes(s), prompt)
        base = scrub_subgroup_terms(raw, self.taxonomy)
        if self.caption_cache is not None:
            self.caption_cache.put(s.id, prompt, base)
        return base


def _load_journal(path: Path) -> dict[int, AugmentationRecord]:
    done: dict[int, AugmentationRecord] = {}
    if not path.exists():
        return done
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = AugmentationRecord.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(i, f"journal: {e}") from e
            done[rec.job_index] = rec
    return done


def _run_job(
    job: int,
    plan: AugmentationPlan,
    originals: Sequence[SampleRecord],
    ctx: _SourceContext,
    targets: Optional[Sequence[Subgroup]],
) -> tuple[AugmentationRecord, bytes]:
    started = time.monotonic()
    rng = SplitMix64(stream_seed(plan.seed, job))
    source = originals[rng.next_below(len(originals))]
    z = ctx.label(source)
    if targets is None:
        z_star = sample_target_subgroup(z, ctx.taxonomy, rng)
    else:
        z_star = targets[job]
    gen_seed = rng.next_u64()
    base = ctx.base_caption(source)
    styled = compose_caption(base, z_star, ctx.taxonomy, plan.style_template)
    try:
        png = ctx.backend.generate_image(ctx.mask_bytes(source), styled, gen_seed)
    except BackendError as e:
        raise AugmentationJobError(job, e) from e
    record = AugmentationRecord(
        job_index=job,
        source_id=source.id,
        source_subgroup=z.coordinates,
        target_subgroup=z_star.coordinates,
        styled_caption=styled,
        generate_seed=gen_seed,
        image_uri=f"{IMAGES_DIR}/{job}.png",
        wall_time_ms=(time.monotonic() - started) * 1000.0,
    )
    return record, png


def _synthetic_record(
    rec: AugmentationRecord, m: DatasetManifest
) -> SampleRecord:
    parent = m.by_id(rec.source_id)
    return SampleRecord(
        id=f"syn-{rec.job_index:06d}",
        image_uri=rec.image_uri,
        mask_uri=parent.mask_uri,
        subgroup=m.taxonomy.subgroup(rec.target_subgroup),
        embedding_ref=None,
        origin=ORIGIN_SYNTHETIC,
        parent_id=parent.id,
        annotation_kind=parent.annotation_kind,
    )


def augment_dataset(
    m: DatasetManifest,
    plan: AugmentationPlan,
    backend,
    bank: SubgroupTextBank,
    out_dir,
    palette: Optional[ClassPalette] = None,
    base_dir=None,
    parallelism: Optional[int] = None,
) -> tuple[DatasetManifest, list[AugmentationRecord]]:
    """Produce the augmented dataset: originals first, synthetics by job index.

    ``base_dir`` resolves relative sample URIs (defaults to the current
    directory); synthetic image URIs are written relative to ``out_dir`` so
    the output manifest is byte-stable across output locations.  Backend
    failures surface as AugmentationJobError carrying the job index; finished
    jobs stay journaled and a rerun picks up after them.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / IMAGES_DIR).mkdir(exist_ok=True)
    journal_path = out_dir / JOURNAL_NAME

    originals = [s for s in m.samples if not s.is_synthetic]
    if plan.n_synth > 0 and not originals:
        raise EmptyDataset("no original samples to draw from")
    if plan.n_synth > 0 and m.taxonomy.size < 2:
        raise SingletonTaxonomy("need >= 2 subgroups to augment")

    ctx = _SourceContext(
        m.taxonomy,
        backend,
        bank,
        palette,
        Path(base_dir) if base_dir is not None else Path("."),
        plan.caption_cache,
    )

    targets: Optional[list[Subgroup]] = None
    if plan.target_policy == POLICY_BALANCE_TO_UNIFORM and plan.n_synth > 0:
        labeled = [ctx.label(s) for s in originals]
        counts: dict[Subgroup, int] = {}
        for z in labeled:
            counts[z] = counts.get(z, 0) + 1
        dist = SubgroupDistribution(m.taxonomy, counts)
        alloc = balance_targets(dist, plan.n_synth)
        targets = []
        for z in enumerate_subgroups(m.taxonomy):
            targets.extend([z] * alloc[z])

    done = _load_journal(journal_path)
    records: dict[int, AugmentationRecord] = {}
    pending: list[int] = []
    for job in range(plan.n_synth):
        prior = done.get(job)
        if prior is not None and (out_dir / prior.image_uri).exists():
            records[job] = prior
        else:
            pending.append(job)

    workers = parallelism
    if workers is None:
        # parallelism hides network latency; a local mock gains nothing
        workers = backend.config.max_inflight if isinstance(backend, RemoteBackend) else 1
    workers = max(1, int(workers))

    def commit(record: AugmentationRecord, png: bytes):
        (out_dir / record.image_uri).write_bytes(png)
        with open(journal_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record.to_json(), separators=(",", ":")) + "\n")
        records[record.job_index] = record

    if workers == 1 or len(pending) <= 1:
        for job in pending:
            record, png = _run_job(job, plan, originals, ctx, targets)
            commit(record, png)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_run_job, job, plan, originals, ctx, targets): job
                for job in pending
            }
            failure: Optional[Exception] = None
            for fut in futures:
                try:
                    record, png = fut.result()
                except Exception as e:  # first failure wins, rest are cancelled
                    if failure is None:
                        failure = e
                    continue
                commit(record, png)
            if failure is not None:
                raise failure

    ordered = [records[job] for job in range(plan.n_synth)]
    _check_journal_consistency(ordered, plan, originals, ctx, targets)

    synthetics = [_synthetic_record(rec, m) for rec in ordered]
    provenance = dict(m.provenance)
    provenance["augmentation"] = {
        "plan": plan.to_json(),
        "bank_hash": bank.content_hash(),
    }
    aug = DatasetManifest(
        m.taxonomy, tuple(m.samples) + tuple(synthetics), provenance
    )
    _check_postconditions(aug, plan, len(m.samples))
    return aug, ordered


def _check_journal_consistency(
    records: Sequence[AugmentationRecord],
    plan: AugmentationPlan,
    originals: Sequence[SampleRecord],
    ctx: _SourceContext,
    targets: Optional[Sequence[Subgroup]],
) -> None:
    """Journaled jobs must match what the current plan would compute.

    Catches a stale journal left over from a different plan or dataset: the
    per-job RNG makes source index, target, and generate seed recomputable
    without touching the backend.
    """
    for rec in records:
        rng = SplitMix64(stream_seed(plan.seed, rec.job_index))
        source = originals[rng.next_below(len(originals))]
        if source.id != rec.source_id:
            raise InvariantError(
                f"journal job {rec.job_index} drew {rec.source_id!r}, plan "
                f"draws {source.id!r}; clean the output directory"
            )
        if targets is None:
            z = ctx.label(source)
            z_star = sample_target_subgroup(z, ctx.taxonomy, rng)
        else:
            z_star = targets[rec.job_index]
        if z_star.coordinates != rec.target_subgroup:
            raise InvariantError(
                f"journal job {rec.job_index} targeted {rec.target_subgroup}, "
                f"plan targets {z_star.coordinates}; clean the output directory"
            )
        if rng.next_u64() != rec.generate_seed:
            raise InvariantError(
                f"journal job {rec.job_index} generate seed mismatch; "
                "clean the output directory"
            )


def _check_postconditions(
    aug: DatasetManifest, plan: AugmentationPlan, n_original: int
) -> None:
    synthetics = [s for s in aug.samples if s.is_synthetic]
    if len(aug.samples) != n_original + plan.n_synth:
        raise InvariantError(
            f"expected {n_original + plan.n_synth} samples, built {len(aug.samples)}"
        )
    if len(synthetics) != plan.n_synth:
        raise InvariantError(
            f"expected {plan.n_synth} synthetic samples, built {len(synthetics)}"
        )
    for s in synthetics:
        parent = aug.by_id(s.parent_id)
        if s.mask_uri != parent.mask_uri:
            raise InvariantError(f"synthetic {s.id!r} does not reuse parent mask")
        if plan.target_policy == POLICY_UNIFORM_EXCLUDING_SOURCE:
            if parent.subgroup is not None and s.subgroup == parent.subgroup:
                raise InvariantError(
                    f"synthetic {s.id!r} targets its own source subgroup"
                )


def load_plan(path) -> AugmentationPlan:
    return AugmentationPlan.from_json(json.loads(Path(path).read_text("utf-8")))

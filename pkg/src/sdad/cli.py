"""Command-line entry point.

Commands: validate, analyze, augment, eval-fd, eval-seg, eval-drive, report,
caption.  Every command accepts ``--json`` for machine-readable output on
stdout (the report command's ``--format json`` serves the same purpose).
Exit codes: 0 success, 1 validation or usage error, 2 backend failure.

Environment: ``SDAD_BACKEND_URL`` supplies the remote endpoint when
``--backend remote`` is given without a URL; ``SDAD_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .augmentor import AugmentationPlan, augment_dataset, load_plan
from .backend import BackendConfig, MockBackend, RemoteBackend, make_backend
from .captions import (
    CaptionBundle,
    build_vlm_prompt,
    compose_caption,
    extract_classes,
    load_mask_ids,
    load_palette,
    scrub_subgroup_terms,
)
from .config import (
    ENV_BACKEND_URL,
    ENV_LOG,
    RunConfig,
    config_from_dict,
    load_config,
)
from .embeddings import open_store
from .errors import (
    BackendError,
    ConfigError,
    MissingSubgroup,
    SdadError,
    UsageError,
)
from .manifest import (
    DatasetManifest,
    default_taxonomy,
    enumerate_subgroups,
    load_manifest,
    save_manifest,
)
from .metrics import (
    ConfusionMatrix,
    DEFAULT_PENALTIES,
    FeatureStats,
    aggregate_driving,
    frechet_distance,
    load_route_log,
    mf1,
    miou,
    per_class_f1,
    per_class_iou,
)
from .reporting import (
    FORMAT_TEXT,
    SubgroupReport,
    load_report_values,
    render_report,
)
from .subgroups import (
    POLICY_BELOW_THRESHOLD,
    POLICY_BELOW_UNIFORM,
    SubgroupTextBank,
    compute_distribution,
    label_dataset,
    underrepresented,
)

log = logging.getLogger("sdad")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exceptions, not exits."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="sdad", description=__doc__, add_help=True)
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument(
        "--json", action="store_true", help="machine-readable output on stdout"
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("validate", help="check a manifest's structure")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("analyze", help="subgroup distribution and gaps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", help="SDADEMB1 store for unlabeled samples")
    p.add_argument("--bank", help="text-bank file (built via backend if absent)")
    p.add_argument("--backend", default="mock", help="mock or remote[:url]")
    p.add_argument(
        "--policy",
        default="below_uniform",
        help="below_uniform or below_threshold=<fraction>",
    )

    p = sub.add_parser("augment", help="run the synthesis pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plan", required=True, help="plan JSON file")
    p.add_argument("--backend", default="mock", help="mock or remote[:url]")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--palette", help="class palette JSON (for mask prompts)")
    p.add_argument("--bank", help="text-bank file (built via backend if absent)")
    p.add_argument("--data-root", help="base directory for relative sample URIs")

    p = sub.add_parser("eval-fd", help="Frechet distance between feature sets")
    p.add_argument("--features-a", required=True, help="SDADEMB1 store")
    p.add_argument("--features-b", required=True, help="SDADEMB1 store")
    p.add_argument(
        "--per-subgroup",
        action="store_true",
        help="also group rows by subgroup via the two manifests",
    )
    p.add_argument("--manifest-a")
    p.add_argument("--manifest-b")

    p = sub.add_parser("eval-seg", help="segmentation metrics over mask pairs")
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--palette", required=True)
    p.add_argument("--ignore-label", type=int, default=None)
    p.add_argument(
        "--include-empty-as-nan",
        action="store_true",
        help="propagate empty-union classes into the mean instead of excluding",
    )

    p = sub.add_parser("eval-drive", help="aggregate route results")
    p.add_argument("--routes", required=True, help="route log, JSON lines")
    p.add_argument("--manifest", help="taxonomy source (default: built-in grid)")
    p.add_argument("--penalties", help="JSON file {kind: factor}")

    p = sub.add_parser("report", help="render a per-subgroup comparison")
    p.add_argument(
        "--inputs",
        nargs="+",
        required=True,
        help="one values file, optionally followed by a baseline file",
    )
    p.add_argument("--format", default=FORMAT_TEXT, choices=["text", "json", "csv"])
    p.add_argument("--out", help="write to file instead of stdout")

    p = sub.add_parser("caption", help="show the caption trail for one sample")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sample", required=True, help="sample id")
    p.add_argument("--palette", help="class palette JSON")
    p.add_argument("--backend", default="mock", help="mock or remote[:url]")
    p.add_argument("--target", help='target subgroup phrase, e.g. "Rain, Night"')
    p.add_argument("--bank", help="text-bank file, used when the sample is unlabeled")
    p.add_argument("--data-root", help="base directory for relative sample URIs")

    return parser


def _setup_logging(config: RunConfig) -> None:
    level_name = os.environ.get(ENV_LOG) or config.log_level or "WARNING"
    level = getattr(logging, str(level_name).upper(), None)
    if not isinstance(level, int):
        raise ConfigError(f"unknown log level {level_name!r}")
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _resolve_backend(spec: Optional[str], config: RunConfig) -> BackendConfig:
    base = config.backend
    if spec is None or spec == "mock":
        return BackendConfig(
            endpoint=None,
            seed=base.seed,
            dimension=base.dimension,
            timeout=base.timeout,
            max_inflight=base.max_inflight,
            retries=base.retries,
            backoff_base=base.backoff_base,
        )
    if spec == "remote" or spec.startswith("remote:"):
        url = spec[len("remote:"):] if spec.startswith("remote:") else ""
        url = url or base.endpoint or os.environ.get(ENV_BACKEND_URL) or ""
        if not url:
            raise ConfigError(
                "remote backend needs a URL: use remote:<url>, a config "
                f"endpoint, or {ENV_BACKEND_URL}"
            )
        return BackendConfig(
            endpoint=url,
            seed=base.seed,
            dimension=base.dimension,
            timeout=base.timeout,
            max_inflight=base.max_inflight,
            retries=base.retries,
            backoff_base=base.backoff_base,
        )
    raise ConfigError(f"unknown backend spec {spec!r}")


def _load_bank(
    path: Optional[str], m: DatasetManifest, backend_cfg: BackendConfig
) -> SubgroupTextBank:
    if path:
        bank = SubgroupTextBank.load(path)
        if bank.taxonomy != m.taxonomy:
            raise ConfigError("bank taxonomy does not match the manifest")
        return bank
    return SubgroupTextBank.from_backend(m.taxonomy, make_backend(backend_cfg))


def _emit(doc: dict, as_json: bool, text_lines: Sequence[str]) -> None:
    if as_json:
        sys.stdout.write(
            json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
        )
    else:
        for line in text_lines:
            sys.stdout.write(line + "\n")


def _nan_to_none(x: float) -> Optional[float]:
    return None if math.isnan(x) else x


# --- commands ---

def _cmd_validate(args, config: RunConfig) -> int:
    m = load_manifest(args.manifest)
    originals = sum(1 for s in m.samples if not s.is_synthetic)
    labeled = sum(1 for s in m.samples if s.subgroup is not None)
    doc = {
        "command": "validate",
        "ok": True,
        "manifest": args.manifest,
        "samples": len(m.samples),
        "originals": originals,
        "synthetic": len(m.samples) - originals,
        "labeled": labeled,
        "subgroups": m.taxonomy.size,
    }
    _emit(
        doc,
        args.json,
        [
            f"{args.manifest}: ok",
            f"samples: {len(m.samples)} ({originals} original, "
            f"{len(m.samples) - originals} synthetic, {labeled} labeled)",
            f"subgroups: {m.taxonomy.size}",
        ],
    )
    return 0


def _parse_policy(text: str) -> tuple[str, Optional[float]]:
    if text == POLICY_BELOW_UNIFORM:
        return POLICY_BELOW_UNIFORM, None
    if text.startswith("below_threshold="):
        return POLICY_BELOW_THRESHOLD, float(text.split("=", 1)[1])
    if text == POLICY_BELOW_THRESHOLD:
        raise ConfigError("below_threshold needs a value: below_threshold=0.1")
    raise ConfigError(f"unknown policy {text!r}")


def _cmd_analyze(args, config: RunConfig) -> int:
    m = load_manifest(args.manifest)
    if any(s.subgroup is None for s in m.samples):
        store_path = args.embeddings or config.embeddings
        if not store_path:
            raise ConfigError(
                "manifest has unlabeled samples; supply --embeddings (and "
                "optionally --bank) to identify them"
            )
        backend_cfg = _resolve_backend(args.backend, config)
        bank = _load_bank(args.bank or config.bank, m, backend_cfg)
        m = label_dataset(m, open_store(store_path), bank)
    dist = compute_distribution(m)
    policy, threshold = _parse_policy(args.policy)
    low = underrepresented(dist, policy, threshold)
    rows = [
        {
            "subgroup": z.phrase,
            "count": dist.counts[z],
            "fraction": dist.fractions[z],
        }
        for z in enumerate_subgroups(m.taxonomy)
    ]
    doc = {
        "command": "analyze",
        "total": dist.total,
        "policy": args.policy,
        "rows": rows,
        "underrepresented": [z.phrase for z in low],
        "entropy": dist.entropy(),
    }
    width = max(len(r["subgroup"]) for r in rows)
    lines = [f"{'subgroup'.ljust(width)}  count  fraction"]
    lines.append(f"{'-' * width}  -----  --------")
    for r in rows:
        lines.append(
            f"{r['subgroup'].ljust(width)}  {r['count']:5d}  {r['fraction']:8.4f}"
        )
    lines.append(f"total: {dist.total}")
    # phrases contain commas, so separate with semicolons
    lines.append(
        "underrepresented: "
        + ("; ".join(z.phrase for z in low) if low else "(none)")
    )
    _emit(doc, args.json, lines)
    return 0


def _cmd_augment(args, config: RunConfig) -> int:
    m = load_manifest(args.manifest)
    plan_obj = json.loads(Path(args.plan).read_text("utf-8"))
    plan = AugmentationPlan.from_json(plan_obj)
    palette_path = args.palette or config.palette or plan_obj.get("palette")
    palette = load_palette(palette_path) if palette_path else None
    backend_cfg = _resolve_backend(args.backend, config)
    backend = make_backend(backend_cfg)
    bank = _load_bank(args.bank or config.bank, m, backend_cfg)
    base_dir = args.data_root or str(Path(args.manifest).parent)
    aug, records = augment_dataset(
        m, plan, backend, bank, args.out, palette=palette, base_dir=base_dir
    )
    out_manifest = Path(args.out) / "augmented.jsonl"
    save_manifest(aug, out_manifest)
    dist = compute_distribution(aug) if all(
        s.subgroup is not None for s in aug.samples
    ) else None
    doc = {
        "command": "augment",
        "manifest": str(out_manifest),
        "journal": str(Path(args.out) / "journal.jsonl"),
        "n_synth": plan.n_synth,
        "samples": len(aug.samples),
        "config": config.echo(),
    }
    if dist is not None:
        doc["distribution"] = [
            {"subgroup": z.phrase, "count": dist.counts[z]}
            for z in enumerate_subgroups(aug.taxonomy)
        ]
    _emit(
        doc,
        args.json,
        [
            f"wrote {out_manifest} ({len(aug.samples)} samples, "
            f"{plan.n_synth} synthetic)",
            f"journal: {Path(args.out) / 'journal.jsonl'}",
        ],
    )
    return 0


def _subgroup_stats(store, manifest_path: str):
    m = load_manifest(manifest_path)
    by_phrase: dict[str, FeatureStats] = {}
    for s in m.samples:
        if s.subgroup is None or s.embedding_ref is None:
            continue
        z = m.taxonomy.subgroup(s.subgroup.coordinates)
        stats = by_phrase.setdefault(z.phrase, FeatureStats(store.dimension))
        stats.update(store.get_row(s.embedding_ref))
    return m, by_phrase


def _cmd_eval_fd(args, config: RunConfig) -> int:
    store_a = open_store(args.features_a)
    store_b = open_store(args.features_b)
    stats_a = FeatureStats.from_store(store_a)
    stats_b = FeatureStats.from_store(store_b)
    overall = frechet_distance(stats_a, stats_b)
    doc = {
        "command": "eval-fd",
        "fd": overall,
        "n_a": store_a.count,
        "n_b": store_b.count,
        "dimension": store_a.dimension,
    }
    lines = [f"FD: {overall:.6g}  (n_a={store_a.count}, n_b={store_b.count})"]
    if args.per_subgroup:
        if not args.manifest_a or not args.manifest_b:
            raise ConfigError("--per-subgroup needs --manifest-a and --manifest-b")
        m_a, groups_a = _subgroup_stats(store_a, args.manifest_a)
        _, groups_b = _subgroup_stats(store_b, args.manifest_b)
        rows = []
        for z in enumerate_subgroups(m_a.taxonomy):
            a = groups_a.get(z.phrase)
            b = groups_b.get(z.phrase)
            if a is not None and b is not None and a.n >= 2 and b.n >= 2:
                value: Optional[float] = frechet_distance(a, b)
            else:
                value = None
            rows.append(
                {
                    "subgroup": z.phrase,
                    "fd": value,
                    "n_a": a.n if a else 0,
                    "n_b": b.n if b else 0,
                }
            )
        doc["per_subgroup"] = rows
        width = max(len(r["subgroup"]) for r in rows)
        for r in rows:
            shown = "n/a" if r["fd"] is None else f"{r['fd']:.6g}"
            lines.append(f"{r['subgroup'].ljust(width)}  {shown}")
    _emit(doc, args.json, lines)
    return 0


def _cmd_eval_seg(args, config: RunConfig) -> int:
    palette = load_palette(args.palette)
    gt_dir, pred_dir = Path(args.gt_dir), Path(args.pred_dir)
    gt_files = sorted(p for p in gt_dir.iterdir() if p.suffix == ".png")
    if not gt_files:
        raise ConfigError(f"no .png masks under {gt_dir}")
    ids = sorted(c.id for c in palette.classes)
    k = max(ids) + 1
    cm = ConfusionMatrix(k)
    for gt_path in gt_files:
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            raise ConfigError(f"no prediction for {gt_path.name} under {pred_dir}")
        cm.update(
            load_mask_ids(gt_path, palette),
            load_mask_ids(pred_path, palette),
            ignore_label=args.ignore_label,
        )
    iou = per_class_iou(cm)
    f1 = per_class_f1(cm)
    classes = [
        {
            "name": c.name,
            "iou": _nan_to_none(float(iou[c.id])),
            "f1": _nan_to_none(float(f1[c.id])),
        }
        for c in palette.classes
    ]
    miou_value = miou(cm, args.include_empty_as_nan)
    mf1_value = mf1(cm, args.include_empty_as_nan)
    doc = {
        "command": "eval-seg",
        "miou": _nan_to_none(miou_value),
        "mf1": _nan_to_none(mf1_value),
        "pixels": cm.total,
        "masks": len(gt_files),
        "classes": classes,
    }
    width = max(len(c["name"]) for c in classes)
    lines = [f"mIoU: {miou_value:.6f}   mF1: {mf1_value:.6f}   pixels: {cm.total}"]
    for c in classes:
        iou_s = "n/a" if c["iou"] is None else f"{c['iou']:.6f}"
        f1_s = "n/a" if c["f1"] is None else f"{c['f1']:.6f}"
        lines.append(f"{c['name'].ljust(width)}  IoU {iou_s}  F1 {f1_s}")
    _emit(doc, args.json, lines)
    return 0


def _cmd_eval_drive(args, config: RunConfig) -> int:
    taxonomy = (
        load_manifest(args.manifest).taxonomy if args.manifest else default_taxonomy()
    )
    penalties = DEFAULT_PENALTIES
    if args.penalties:
        loaded = json.loads(Path(args.penalties).read_text("utf-8"))
        if not isinstance(loaded, dict):
            raise ConfigError("penalties file must be a JSON object")
        penalties = {str(k): float(v) for k, v in loaded.items()}
    routes = load_route_log(args.routes, taxonomy, penalties)
    summary = aggregate_driving(routes)
    per = [
        {
            "subgroup": phrase,
            "rc_mean": s.rc_mean,
            "is_mean": s.is_mean,
            "ds_mean": s.ds_mean,
            "rendered": s.rendered(),
            "routes": s.route_count,
        }
        for phrase, s in summary.per_subgroup.items()
    ]
    doc = {
        "command": "eval-drive",
        "rc_mean": summary.rc_mean,
        "is_mean": summary.is_mean,
        "ds_mean": summary.ds_mean,
        "rendered": summary.rendered(),
        "routes": summary.route_count,
        "per_subgroup": per,
    }
    lines = [f"RC / IS / DS: {summary.rendered()}  ({summary.route_count} routes)"]
    if per:
        width = max(len(r["subgroup"]) for r in per)
        for r in per:
            lines.append(
                f"{r['subgroup'].ljust(width)}  {r['rendered']}  "
                f"({r['routes']} routes)"
            )
    _emit(doc, args.json, lines)
    return 0


def _cmd_report(args, config: RunConfig) -> int:
    if len(args.inputs) not in (1, 2):
        raise UsageError("--inputs takes one values file and at most one baseline")
    metric, taxonomy, values = load_report_values(args.inputs[0])
    baseline = None
    if len(args.inputs) == 2:
        _, base_taxonomy, baseline = load_report_values(args.inputs[1])
        taxonomy = taxonomy or base_taxonomy
    report = SubgroupReport(
        metric=metric,
        taxonomy=taxonomy or default_taxonomy(),
        values=values,
        baseline=baseline,
    )
    fmt = "json" if args.json and args.format == FORMAT_TEXT else args.format
    payload = render_report(report, fmt)
    if args.out:
        Path(args.out).write_bytes(payload)
        sys.stdout.write(f"wrote {args.out}\n")
    else:
        sys.stdout.write(payload.decode("utf-8"))
    return 0


def _cmd_caption(args, config: RunConfig) -> int:
    m = load_manifest(args.manifest)
    try:
        sample = m.by_id(args.sample)
    except KeyError:
        raise ConfigError(f"no sample with id {args.sample!r}")
    base_dir = Path(args.data_root or Path(args.manifest).parent)
    backend_cfg = _resolve_backend(args.backend, config)
    backend = make_backend(backend_cfg)

    def resolve(uri: str) -> Path:
        p = Path(uri)
        return p if p.is_absolute() else base_dir / p

    palette_path = args.palette or config.palette
    if palette_path:
        classes = extract_classes(resolve(sample.mask_uri), load_palette(palette_path))
    else:
        classes = ["scene"]
    prompt = build_vlm_prompt(classes, m.taxonomy)
    raw = backend.caption_image(resolve(sample.image_uri).read_bytes(), prompt)
    base = scrub_subgroup_terms(raw, m.taxonomy)
    if sample.subgroup is not None:
        source = m.taxonomy.subgroup(sample.subgroup.coordinates)
    else:
        bank = _load_bank(args.bank or config.bank, m, backend_cfg)
        from .subgroups import identify_subgroup

        source, _ = identify_subgroup(
            backend.embed_image(resolve(sample.image_uri).read_bytes()), bank
        )
    target = None
    styled = None
    if args.target:
        target = m.taxonomy.from_values(
            [part.strip() for part in args.target.split(",")]
        )
        styled = compose_caption(base, target, m.taxonomy)
    bundle = CaptionBundle(
        prompt=prompt,
        base_caption=base,
        styled_caption=styled,
        source_subgroup=source,
        target_subgroup=target,
    )
    doc = {
        "command": "caption",
        "sample": sample.id,
        "prompt": bundle.prompt,
        "base_caption": bundle.base_caption,
        "styled_caption": bundle.styled_caption,
        "source_subgroup": bundle.source_subgroup.phrase,
        "target_subgroup": bundle.target_subgroup.phrase if target else None,
    }
    sys.stdout.write(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
    return 0


_COMMANDS = {
    "validate": _cmd_validate,
    "analyze": _cmd_analyze,
    "augment": _cmd_augment,
    "eval-fd": _cmd_eval_fd,
    "eval-seg": _cmd_eval_seg,
    "eval-drive": _cmd_eval_drive,
    "report": _cmd_report,
    "caption": _cmd_caption,
}


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        config = load_config(args.config) if args.config else RunConfig()
        _setup_logging(config)
        return _COMMANDS[args.command](args, config)
    except UsageError as e:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"error: {e}\n")
        return 1
    except BackendError as e:
        sys.stderr.write(f"backend error: {e}\n")
        return 2
    except (SdadError, OSError, json.JSONDecodeError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1


def main() -> None:
    sys.exit(run_command())

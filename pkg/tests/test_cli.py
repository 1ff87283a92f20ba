import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from PIL import Image

from sdad.backend import BackendConfig, MockBackend
from sdad.captions import ClassPalette, PaletteClass, save_palette
from sdad.cli import run_command
from sdad.embeddings import write_store
from sdad.manifest import default_taxonomy, enumerate_subgroups, save_manifest
from sdad.subgroups import SubgroupTextBank

from conftest import make_demo_dataset

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "src" / "sdad" / "schemas"


def check_schema(doc: dict, name: str):
    schema = json.loads((SCHEMA_DIR / f"{name}.schema.json").read_text("utf-8"))
    jsonschema.validate(doc, schema)


@pytest.fixture
def workspace(tmp_path):
    m = make_demo_dataset(tmp_path, n_per_subgroup=2, size=8)
    save_manifest(m, tmp_path / "m.jsonl")
    palette = ClassPalette(
        classes=(
            PaletteClass(0, "road"),
            PaletteClass(1, "vehicle"),
            PaletteClass(2, "sky"),
        )
    )
    save_palette(palette, tmp_path / "palette.json")
    return tmp_path, m


def run_json(capsys, argv):
    code = run_command(argv)
    out = capsys.readouterr().out
    return code, json.loads(out)


class TestExitCodes:
    def test_no_command_is_usage_error(self, capsys):
        assert run_command([]) == 1
        err = capsys.readouterr().err
        assert "usage:" in err

    def test_unknown_command(self, capsys):
        assert run_command(["frobnicate"]) == 1

    def test_missing_file_is_error_not_crash(self, capsys, tmp_path):
        assert run_command(["validate", "--manifest", str(tmp_path / "no.jsonl")]) == 1

    def test_backend_failure_is_exit_2(self, capsys, workspace, tmp_path):
        root, m = workspace
        (root / "plan.json").write_text(json.dumps({"n_synth": 2}), "utf-8")
        config = {
            "backend": {"retries": 0, "timeout": 0.3, "backoff_base": 0.01}
        }
        (root / "cfg.json").write_text(json.dumps(config), "utf-8")
        code = run_command(
            [
                "--config", str(root / "cfg.json"),
                "augment",
                "--manifest", str(root / "m.jsonl"),
                "--plan", str(root / "plan.json"),
                "--backend", "remote:http://127.0.0.1:9",
                "--out", str(root / "out"),
            ]
        )
        assert code == 2


class TestValidate:
    def test_json_output(self, capsys, workspace):
        root, m = workspace
        code, doc = run_json(
            capsys, ["--json", "validate", "--manifest", str(root / "m.jsonl")]
        )
        assert code == 0
        check_schema(doc, "validate")
        assert doc["samples"] == 18
        assert doc["labeled"] == 18


class TestAnalyze:
    def test_json_output(self, capsys, workspace):
        root, m = workspace
        code, doc = run_json(
            capsys, ["--json", "analyze", "--manifest", str(root / "m.jsonl")]
        )
        assert code == 0
        check_schema(doc, "analyze")
        assert doc["total"] == 18
        assert len(doc["rows"]) == 9
        assert doc["underrepresented"] == []

    def test_threshold_policy(self, capsys, workspace):
        root, m = workspace
        code, doc = run_json(
            capsys,
            [
                "--json", "analyze",
                "--manifest", str(root / "m.jsonl"),
                "--policy", "below_threshold=0.5",
            ],
        )
        assert code == 0
        assert len(doc["underrepresented"]) == 9

    def test_labels_via_embeddings_and_bank(self, capsys, tmp_path):
        m = make_demo_dataset(tmp_path, n_per_subgroup=1, size=8, embedding_refs=True)
        # strip labels but keep embedding refs
        stripped = type(m)(
            taxonomy=m.taxonomy,
            samples=tuple(
                type(s)(
                    id=s.id, image_uri=s.image_uri, mask_uri=s.mask_uri,
                    subgroup=None, embedding_ref=s.embedding_ref, origin=s.origin,
                    parent_id=s.parent_id, annotation_kind=s.annotation_kind,
                )
                for s in m.samples
            ),
            provenance={},
        )
        save_manifest(stripped, tmp_path / "m.jsonl")
        backend = MockBackend(BackendConfig(dimension=16))
        bank = SubgroupTextBank.from_backend(m.taxonomy, backend)
        bank.save(tmp_path / "bank.json")
        rows = np.stack([np.asarray(bank.matrix)[i % 9] for i in range(9)])
        write_store(tmp_path / "emb.bin", [s.id for s in m.samples], rows)
        code, doc = run_json(
            capsys,
            [
                "--json", "analyze",
                "--manifest", str(tmp_path / "m.jsonl"),
                "--embeddings", str(tmp_path / "emb.bin"),
                "--bank", str(tmp_path / "bank.json"),
            ],
        )
        assert code == 0
        assert doc["total"] == 9
        assert all(r["count"] == 1 for r in doc["rows"])


class TestAugmentCommand:
    def test_full_run_and_validate_output(self, capsys, workspace):
        root, m = workspace
        (root / "plan.json").write_text(
            json.dumps({"n_synth": 9, "seed": 5}), "utf-8"
        )
        code, doc = run_json(
            capsys,
            [
                "--json", "augment",
                "--manifest", str(root / "m.jsonl"),
                "--plan", str(root / "plan.json"),
                "--palette", str(root / "palette.json"),
                "--out", str(root / "out"),
            ],
        )
        assert code == 0
        check_schema(doc, "augment")
        assert doc["samples"] == 27
        # output manifest revalidates cleanly
        code2 = run_command(["validate", "--manifest", doc["manifest"]])
        assert code2 == 0


class TestEvalFd:
    def test_overall_and_per_subgroup(self, capsys, tmp_path):
        rng = np.random.default_rng(0)
        m = make_demo_dataset(tmp_path, n_per_subgroup=3, size=8, embedding_refs=True)
        save_manifest(m, tmp_path / "m.jsonl")
        rows_a = rng.standard_normal((27, 6))
        rows_b = rng.standard_normal((27, 6)) + 0.5
        write_store(tmp_path / "a.bin", [s.id for s in m.samples], rows_a)
        write_store(tmp_path / "b.bin", [s.id for s in m.samples], rows_b)
        code, doc = run_json(
            capsys,
            [
                "--json", "eval-fd",
                "--features-a", str(tmp_path / "a.bin"),
                "--features-b", str(tmp_path / "b.bin"),
                "--per-subgroup",
                "--manifest-a", str(tmp_path / "m.jsonl"),
                "--manifest-b", str(tmp_path / "m.jsonl"),
            ],
        )
        assert code == 0
        check_schema(doc, "eval_fd")
        assert doc["fd"] > 0
        assert len(doc["per_subgroup"]) == 9
        assert all(r["fd"] is not None for r in doc["per_subgroup"])


class TestEvalSeg:
    def test_perfect_prediction(self, capsys, tmp_path):
        palette = ClassPalette(
            classes=(PaletteClass(0, "road"), PaletteClass(1, "sky"))
        )
        save_palette(palette, tmp_path / "palette.json")
        (tmp_path / "gt").mkdir()
        (tmp_path / "pred").mkdir()
        rng = np.random.default_rng(1)
        for i in range(3):
            arr = rng.integers(0, 2, (8, 8), dtype=np.uint8)
            Image.fromarray(arr, "L").save(tmp_path / "gt" / f"{i}.png")
            Image.fromarray(arr, "L").save(tmp_path / "pred" / f"{i}.png")
        code, doc = run_json(
            capsys,
            [
                "--json", "eval-seg",
                "--gt-dir", str(tmp_path / "gt"),
                "--pred-dir", str(tmp_path / "pred"),
                "--palette", str(tmp_path / "palette.json"),
            ],
        )
        assert code == 0
        check_schema(doc, "eval_seg")
        assert doc["miou"] == 1.0
        assert doc["mf1"] == 1.0

    def test_missing_prediction_fails(self, capsys, tmp_path):
        palette = ClassPalette(classes=(PaletteClass(0, "road"), PaletteClass(1, "sky")))
        save_palette(palette, tmp_path / "palette.json")
        (tmp_path / "gt").mkdir()
        (tmp_path / "pred").mkdir()
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8), "L").save(
            tmp_path / "gt" / "x.png"
        )
        code = run_command(
            [
                "eval-seg",
                "--gt-dir", str(tmp_path / "gt"),
                "--pred-dir", str(tmp_path / "pred"),
                "--palette", str(tmp_path / "palette.json"),
            ]
        )
        assert code == 1


class TestEvalDrive:
    def test_fixture_rendering(self, capsys, tmp_path):
        routes = [
            {"route_id": "a", "subgroup": [1, 1], "rc": 1.0, "events": []},
            {"route_id": "b", "subgroup": [0, 2], "rc": 0.5,
             "events": ["red_light", "stop_sign"]},
        ]
        path = tmp_path / "routes.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in routes) + "\n", "utf-8")
        code, doc = run_json(
            capsys, ["--json", "eval-drive", "--routes", str(path)]
        )
        assert code == 0
        check_schema(doc, "eval_drive")
        assert doc["routes"] == 2
        assert abs(doc["is_mean"] - (1.0 + 0.7 * 0.8) / 2) < 1e-12
        phrases = {r["subgroup"] for r in doc["per_subgroup"]}
        assert phrases == {"Clear, Day", "Rain, Night"}


class TestReportCommand:
    def _write_inputs(self, tmp_path):
        values = {z.phrase: float(i + 1) for i, z in enumerate(
            enumerate_subgroups(default_taxonomy()))}
        baseline = {p: v + 0.5 for p, v in values.items()}
        (tmp_path / "v.json").write_text(
            json.dumps({"metric": "fd", "values": values}), "utf-8"
        )
        (tmp_path / "b.json").write_text(
            json.dumps({"metric": "fd", "values": baseline}), "utf-8"
        )

    def test_json_format(self, capsys, tmp_path):
        self._write_inputs(tmp_path)
        code, doc = run_json(
            capsys,
            [
                "report",
                "--inputs", str(tmp_path / "v.json"), str(tmp_path / "b.json"),
                "--format", "json",
            ],
        )
        assert code == 0
        check_schema(doc, "report")
        assert all(abs(r["delta"] + 0.5) < 1e-12 for r in doc["rows"])

    def test_text_and_out_file(self, capsys, tmp_path):
        self._write_inputs(tmp_path)
        out = tmp_path / "report.txt"
        code = run_command(
            [
                "report",
                "--inputs", str(tmp_path / "v.json"),
                "--out", str(out),
            ]
        )
        assert code == 0
        assert out.read_text("utf-8").startswith("subgroup")

    def test_three_inputs_rejected(self, capsys, tmp_path):
        self._write_inputs(tmp_path)
        code = run_command(
            [
                "report",
                "--inputs",
                str(tmp_path / "v.json"),
                str(tmp_path / "b.json"),
                str(tmp_path / "v.json"),
            ]
        )
        assert code == 1


class TestCaptionCommand:
    def test_bundle_json(self, capsys, workspace):
        root, m = workspace
        code, doc = run_json(
            capsys,
            [
                "caption",
                "--manifest", str(root / "m.jsonl"),
                "--sample", "s0000",
                "--palette", str(root / "palette.json"),
                "--target", "Clear, Night",
            ],
        )
        assert code == 0
        check_schema(doc, "caption")
        assert doc["target_subgroup"] == "Clear, Night"
        assert doc["styled_caption"].endswith(
            "Image taken in clear weather at night time."
        )
        assert doc["source_subgroup"] == "Rain, Dawn / Dusk"

    def test_unknown_sample(self, capsys, workspace):
        root, m = workspace
        code = run_command(
            [
                "caption",
                "--manifest", str(root / "m.jsonl"),
                "--sample", "nope",
            ]
        )
        assert code == 1

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdad.captions import (
    CaptionBundle,
    CaptionCache,
    ClassPalette,
    DEFAULT_STYLE_TEMPLATE,
    PaletteClass,
    VLM_PROMPT_TEMPLATE,
    build_vlm_prompt,
    compose_caption,
    extract_classes_from_array,
    load_palette,
    mask_ids_from_array,
    prompt_hash,
    save_palette,
    scrub_subgroup_terms,
    style_sentence,
)
from sdad.errors import (
    EmptyCaption,
    EmptyMaskError,
    InvariantError,
    SchemaError,
    UnknownClassValue,
)
from sdad.manifest import Dimension, SubgroupTaxonomy, default_taxonomy


class TestPalette:
    def test_duplicate_id_rejected(self):
        with pytest.raises(SchemaError):
            ClassPalette(classes=(PaletteClass(0, "a"), PaletteClass(0, "b")))

    def test_duplicate_name_rejected(self):
        with pytest.raises(SchemaError):
            ClassPalette(classes=(PaletteClass(0, "a"), PaletteClass(1, "a")))

    def test_save_load_round_trip(self, palette, tmp_path):
        save_palette(palette, tmp_path / "p.json")
        again = load_palette(tmp_path / "p.json")
        assert again == palette


class TestMaskDecoding:
    def test_id_grid_passthrough(self, palette):
        arr = np.array([[0, 1], [2, 0]], dtype=np.uint8)
        ids = mask_ids_from_array(arr, palette)
        assert np.array_equal(ids, arr)

    def test_unknown_id_rejected(self, palette):
        with pytest.raises(UnknownClassValue):
            mask_ids_from_array(np.array([[0, 7]], dtype=np.uint8), palette)

    def test_rgb_decoding_against_pixel_scan(self, palette):
        colors = {c.id: c.color for c in palette.classes}
        rng = np.random.default_rng(0)
        id_grid = rng.integers(0, 3, (9, 7), dtype=np.int64)
        rgb = np.zeros((9, 7, 3), dtype=np.uint8)
        for y in range(9):
            for x in range(7):
                rgb[y, x] = colors[int(id_grid[y, x])]
        decoded = mask_ids_from_array(rgb, palette)
        # oracle: per-pixel lookup
        for y in range(9):
            for x in range(7):
                assert int(decoded[y, x]) == int(id_grid[y, x])

    def test_unknown_color_rejected(self, palette):
        rgb = np.zeros((2, 2, 3), dtype=np.uint8)
        rgb[...] = (1, 2, 3)
        with pytest.raises(UnknownClassValue):
            mask_ids_from_array(rgb, palette)

    def test_empty_mask_rejected(self, palette):
        with pytest.raises(EmptyMaskError):
            mask_ids_from_array(np.zeros((0, 4), dtype=np.uint8), palette)


class TestClassExtraction:
    def test_names_in_palette_order(self, palette):
        arr = np.array([[2, 2], [1, 2]], dtype=np.uint8)
        assert extract_classes_from_array(arr, palette) == ["vehicle", "sky"]

    def test_single_class(self, palette):
        arr = np.zeros((3, 3), dtype=np.uint8)
        assert extract_classes_from_array(arr, palette) == ["road"]


class TestVlmPrompt:
    def test_template_splice(self, taxonomy):
        prompt = build_vlm_prompt(["road", "sky"], taxonomy)
        assert prompt.startswith(
            "Provide a description of the objects - road, sky - and their "
            "relationships with respect to each other."
        )
        assert "Do not mention the subgroups - " in prompt
        assert "Rain, Dawn / Dusk" in prompt
        assert prompt == VLM_PROMPT_TEMPLATE.format(
            classes="road, sky",
            subgroups=", ".join(
                z.phrase
                for z in __import__("sdad.manifest", fromlist=["enumerate_subgroups"]).enumerate_subgroups(taxonomy)
            ),
        )

    def test_empty_class_list_rejected(self, taxonomy):
        with pytest.raises(EmptyMaskError):
            build_vlm_prompt([], taxonomy)


class TestScrub:
    def test_removes_vocabulary_words(self, taxonomy):
        out = scrub_subgroup_terms("A rainy street at night under clear skies.", taxonomy)
        lowered = out.lower()
        for word in ("rain", "rainy", "night", "clear"):
            assert word not in lowered.split()

    def test_clean_caption_unchanged(self, taxonomy):
        text = "Two cars parked beside a long fence,  with   odd spacing."
        assert scrub_subgroup_terms(text, taxonomy) == text

    def test_word_boundaries_respected(self, taxonomy):
        # "training" contains "rain" but is not a subgroup term
        out = scrub_subgroup_terms("A training day scene.", taxonomy)
        assert "training" in out
        assert " day " not in " " + out.lower() + " "

    def test_aliases_scrubbed(self, taxonomy):
        out = scrub_subgroup_terms("Overcast twilight over wet asphalt.", taxonomy)
        lowered = out.lower()
        for word in ("overcast", "twilight", "wet"):
            assert word not in lowered

    def test_case_insensitive(self, taxonomy):
        out = scrub_subgroup_terms("NIGHT RAIN Dusk", taxonomy)
        assert out.strip() == ""


class TestStyle:
    def test_paper_style_example(self, taxonomy):
        z = taxonomy.from_values(["Cloudy", "Night"])
        assert (
            style_sentence(taxonomy, z)
            == "Image taken in cloudy weather at night time."
        )

    def test_spaced_value_lowercases(self, taxonomy):
        z = taxonomy.from_values(["Rain", "Dawn / Dusk"])
        assert (
            style_sentence(taxonomy, z)
            == "Image taken in rain weather at dawn / dusk time."
        )

    def test_generic_template_for_custom_dimensions(self):
        t = SubgroupTaxonomy(
            dimensions=(
                Dimension(name="terrain", values=("Urban", "Rural")),
                Dimension(name="season", values=("Summer", "Winter")),
            )
        )
        z = t.from_values(["Urban", "Winter"])
        assert style_sentence(t, z) == "Image taken in urban, winter conditions."

    def test_custom_template(self, taxonomy):
        z = taxonomy.from_values(["Clear", "Day"])
        assert (
            style_sentence(taxonomy, z, template="{weather}/{time}")
            == "clear/day"
        )


class TestCompose:
    def test_concatenation(self, taxonomy):
        z = taxonomy.from_values(["Rain", "Night"])
        out = compose_caption("A street.", z, taxonomy)
        assert out == "A street. Image taken in rain weather at night time."

    def test_empty_caption_rejected(self, taxonomy):
        z = taxonomy.from_values(["Rain", "Night"])
        with pytest.raises(EmptyCaption):
            compose_caption("", z, taxonomy)

    def test_bundle_invariant(self, taxonomy):
        z = taxonomy.from_values(["Rain", "Night"])
        with pytest.raises(InvariantError):
            CaptionBundle(
                prompt="p",
                base_caption="c",
                styled_caption="styled",
                source_subgroup=z,
                target_subgroup=None,
            )


class TestCache:
    def test_hit_miss_accounting(self):
        cache = CaptionCache()
        key = ("s1", prompt_hash("p"))
        assert cache.get(*key) is None
        cache.put(*key, "caption")
        assert cache.get(*key) == "caption"
        assert cache.misses == 1
        assert cache.hits == 1


@given(st.text(alphabet=" abcdefghijklmnopqrstuvwxyz.,", max_size=120))
@settings(max_examples=150)
def test_scrub_idempotent(text):
    t = default_taxonomy()
    once = scrub_subgroup_terms(text, t)
    assert scrub_subgroup_terms(once, t) == once

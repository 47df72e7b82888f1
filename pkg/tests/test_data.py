import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tbnet.core import ClassTaxonomy, ConfigError, DataLoadError, Dataset, Sample
from tbnet.data import (
    GeneratorSpec,
    class_pixel_stats,
    compute_class_weights,
    default_class_mix,
    extract_boundary,
    generate_dataset,
    load_dataset,
    resize_sample,
    save_dataset,
)

TAX = ClassTaxonomy.default()


def brute_force_boundary(labels):
    """Independent oracle: explicit 4-neighbor scan per pixel."""
    h, w = labels.shape
    out = np.zeros((h, w), np.uint8)
    for y in range(h):
        for x in range(w):
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] != labels[y, x]:
                    out[y, x] = 1
    return out


class TestExtractBoundary:
    def test_constant_map_has_no_boundary(self):
        assert extract_boundary(np.full((6, 6), 3)).sum() == 0

    def test_half_split_marks_middle_columns(self):
        labels = np.zeros((4, 4), np.int64)
        labels[:, 2:] = 1
        expected = brute_force_boundary(labels)
        result = extract_boundary(labels)
        np.testing.assert_array_equal(result, expected)
        # the two middle columns, nothing else
        np.testing.assert_array_equal(result[:, 1], np.ones(4))
        np.testing.assert_array_equal(result[:, 2], np.ones(4))
        assert result[:, (0, 3)].sum() == 0

    def test_single_pixel_marks_cross(self):
        labels = np.zeros((5, 5), np.int64)
        labels[2, 2] = 1
        expected = brute_force_boundary(labels)
        result = extract_boundary(labels)
        np.testing.assert_array_equal(result, expected)
        assert result[2, 2] == 1
        assert result[1, 2] == result[3, 2] == result[2, 1] == result[2, 3] == 1
        assert result.sum() == 5

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.int64, (5, 7), elements=st.integers(0, 3)))
    def test_matches_brute_force(self, labels):
        np.testing.assert_array_equal(extract_boundary(labels), brute_force_boundary(labels))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.int64, (6, 6), elements=st.integers(0, 4)))
    def test_invariant_under_label_permutation(self, labels):
        perm = np.array([3, 0, 4, 1, 2])
        np.testing.assert_array_equal(
            extract_boundary(labels), extract_boundary(perm[labels])
        )

    def test_rerun_is_identical(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 9, (16, 16))
        np.testing.assert_array_equal(extract_boundary(labels), extract_boundary(labels))


class TestClassWeights:
    def test_hand_computed_two_class_example(self):
        labels = np.array([[0, 0], [0, 1]], np.int64)
        tax = ClassTaxonomy(((0, "background"), (1, "crack")))
        ds = Dataset(
            [Sample(np.zeros((2, 2), np.float32), labels, "a")], "train", tax
        )
        w = compute_class_weights(ds)
        np.testing.assert_allclose(w.raw, [4 / 3, 4.0])
        np.testing.assert_allclose(w.normalized, [0.25, 0.75])

    def test_balanced_classes_get_equal_weight(self):
        labels = np.array([[0, 1], [1, 0]], np.int64)
        tax = ClassTaxonomy(((0, "background"), (1, "crack")))
        ds = Dataset([Sample(np.zeros((2, 2), np.float32), labels, "a")], "train", tax)
        np.testing.assert_allclose(compute_class_weights(ds).normalized, [0.5, 0.5])

    def test_duplicating_images_leaves_weights_unchanged(self):
        labels = np.array([[0, 0], [0, 1]], np.int64)
        tax = ClassTaxonomy(((0, "background"), (1, "crack")))
        one = Dataset([Sample(np.zeros((2, 2), np.float32), labels, "a")], "train", tax)
        two = Dataset(
            [
                Sample(np.zeros((2, 2), np.float32), labels, "a"),
                Sample(np.zeros((2, 2), np.float32), labels.copy(), "b"),
            ],
            "train",
            tax,
        )
        np.testing.assert_allclose(
            compute_class_weights(one).normalized, compute_class_weights(two).normalized
        )

    def test_absent_class_gets_zero_weight_and_sum_stays_one(self):
        labels = np.array([[0, 0], [0, 1]], np.int64)
        ds = Dataset([Sample(np.zeros((2, 2), np.float32), labels, "a")], "train", TAX)
        w = compute_class_weights(ds)
        assert w.raw[2:].sum() == 0
        assert abs(w.normalized.sum() - 1.0) < 1e-9

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.int64, (8, 8), elements=st.integers(0, 8)))
    def test_rarer_class_weighs_more(self, labels):
        ds = Dataset([Sample(np.zeros((8, 8), np.float32), labels, "a")], "train", TAX)
        w = compute_class_weights(ds)
        assert abs(w.normalized.sum() - 1.0) < 1e-9
        counts = np.bincount(labels.ravel(), minlength=9)
        present = np.nonzero(counts)[0]
        for i in present:
            for j in present:
                if counts[i] < counts[j]:
                    assert w.normalized[i] > w.normalized[j]


class TestGenerator:
    def test_same_seed_is_bit_identical(self):
        spec = GeneratorSpec(num_samples=3, image_size=(64, 64), seed=7)
        a = generate_dataset(spec)
        b = generate_dataset(spec)
        for sa, sb in zip(a.samples, b.samples):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.labels, sb.labels)
            np.testing.assert_array_equal(sa.boundary, sb.boundary)

    def test_different_seeds_differ(self):
        a = generate_dataset(GeneratorSpec(num_samples=1, image_size=(64, 64), seed=1))
        b = generate_dataset(GeneratorSpec(num_samples=1, image_size=(64, 64), seed=2))
        assert not np.array_equal(a.samples[0].labels, b.samples[0].labels)

    def test_sizes_and_label_range(self):
        spec = GeneratorSpec(num_samples=4, image_size=(128, 128), seed=3)
        ds = generate_dataset(spec)
        assert len(ds) == 4
        for s in ds.samples:
            assert s.image.shape == (128, 128)
            assert s.labels.shape == (128, 128)
            assert s.labels.min() >= 0 and s.labels.max() < 9
            assert s.image.min() >= 0 and s.image.max() <= 1

    def test_every_sample_has_foreground(self):
        spec = GeneratorSpec(
            num_samples=12, image_size=(48, 48), seed=11, class_mix={8: 0.05}
        )
        ds = generate_dataset(spec)
        for s in ds.samples:
            assert (s.labels != 0).any()

    def test_restricted_mix_only_draws_those_classes(self):
        spec = GeneratorSpec(num_samples=6, image_size=(64, 64), seed=5, class_mix={1: 2.0})
        ds = generate_dataset(spec)
        for s in ds.samples:
            values = set(np.unique(s.labels))
            assert values <= {0, 1}
            assert 1 in values

    def test_boundary_matches_label_transitions(self):
        spec = GeneratorSpec(num_samples=3, image_size=(64, 64), seed=9)
        for s in generate_dataset(spec).samples:
            np.testing.assert_array_equal(s.boundary, extract_boundary(s.labels))

    def test_invalid_specs_rejected(self):
        with pytest.raises(ConfigError):
            generate_dataset(GeneratorSpec(num_samples=0))
        with pytest.raises(ConfigError):
            generate_dataset(GeneratorSpec(num_samples=1, class_mix={0: 1.0}))
        with pytest.raises(ConfigError):
            generate_dataset(GeneratorSpec(num_samples=1, class_mix={99: 1.0}))
        with pytest.raises(ConfigError):
            generate_dataset(GeneratorSpec(num_samples=1, grain=-0.1))

    def test_default_mix_mirrors_survey_proportions(self):
        mix = default_class_mix(TAX)
        assert mix[TAX.id_of("crack")] == pytest.approx(3.586)
        assert mix[TAX.id_of("light")] == pytest.approx(0.058)
        assert len(mix) == 8


class TestDiskRoundTrip:
    def test_save_then_load_is_equal(self, tmp_path):
        spec = GeneratorSpec(num_samples=3, image_size=(64, 64), seed=21)
        ds = generate_dataset(spec)
        save_dataset(ds, tmp_path)
        loaded = load_dataset(tmp_path, "train")
        assert loaded.taxonomy == ds.taxonomy
        assert len(loaded) == len(ds)
        for a, b in zip(ds.samples, loaded.samples):
            assert a.id == b.id
            np.testing.assert_array_equal(a.labels, b.labels)
            np.testing.assert_array_equal(a.boundary, b.boundary)
            np.testing.assert_allclose(a.image, b.image, atol=1e-7)

    def test_missing_mask_names_stem(self, tmp_path):
        ds = generate_dataset(GeneratorSpec(num_samples=2, image_size=(32, 32), seed=1))
        save_dataset(ds, tmp_path)
        (tmp_path / "train" / "masks" / "train_00001.png").unlink()
        with pytest.raises(DataLoadError, match="train_00001"):
            load_dataset(tmp_path, "train")

    def test_out_of_range_mask_value_reports_file(self, tmp_path):
        from PIL import Image

        ds = generate_dataset(GeneratorSpec(num_samples=1, image_size=(32, 32), seed=1))
        save_dataset(ds, tmp_path)
        bad = np.zeros((32, 32), np.uint8)
        bad[3, 4] = 9
        Image.fromarray(bad, mode="L").save(tmp_path / "train" / "masks" / "train_00000.png")
        with pytest.raises(DataLoadError, match="train_00000"):
            load_dataset(tmp_path, "train")

    def test_empty_directory_errors(self, tmp_path):
        with pytest.raises(DataLoadError, match="no samples found"):
            load_dataset(tmp_path, "train")
        (tmp_path / "train" / "images").mkdir(parents=True)
        (tmp_path / "train" / "masks").mkdir(parents=True)
        with pytest.raises(DataLoadError, match="no samples found"):
            load_dataset(tmp_path, "train")

    def test_boundary_recomputed_when_absent(self, tmp_path):
        import shutil

        ds = generate_dataset(GeneratorSpec(num_samples=1, image_size=(32, 32), seed=4))
        save_dataset(ds, tmp_path)
        shutil.rmtree(tmp_path / "train" / "boundaries")
        loaded = load_dataset(tmp_path, "train")
        np.testing.assert_array_equal(
            loaded.samples[0].boundary, extract_boundary(loaded.samples[0].labels)
        )


class TestResizeAndStats:
    def test_resize_keeps_boundary_consistent(self):
        ds = generate_dataset(GeneratorSpec(num_samples=1, image_size=(48, 48), seed=2))
        resized = resize_sample(ds.samples[0], (32, 32))
        assert resized.image.shape == (32, 32)
        assert resized.labels.shape == (32, 32)
        np.testing.assert_array_equal(resized.boundary, extract_boundary(resized.labels))

    def test_resize_noop_returns_same_sample(self):
        ds = generate_dataset(GeneratorSpec(num_samples=1, image_size=(32, 32), seed=2))
        assert resize_sample(ds.samples[0], (32, 32)) is ds.samples[0]

    def test_pixel_stats_count_everything(self):
        ds = generate_dataset(GeneratorSpec(num_samples=2, image_size=(32, 32), seed=2))
        counts = class_pixel_stats(ds)
        assert counts.sum() == 2 * 32 * 32

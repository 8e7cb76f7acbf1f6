import numpy as np
import pytest

from tvseg.synth_data import (
    BACKGROUND,
    CLASS_COUNT,
    CYTOPLASM,
    NUCLEUS,
    NetpbmHeaderError,
    NetpbmMaxvalError,
    NetpbmPayloadError,
    NoiseKind,
    NoiseSpec,
    Sample,
    add_gaussian_noise,
    add_salt_pepper,
    corrupt_training_subset,
    generate_cells,
    read_dataset,
    read_image,
    read_label,
    read_manifest,
    write_image,
    write_label,
)


@pytest.fixture
def gray():
    return np.full((3, 64, 64), 0.5)


class TestGenerateCells:
    def test_deterministic(self):
        first, second = generate_cells(3, 32, seed=11), generate_cells(3, 32, seed=11)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.label, b.label)

    def test_different_seeds_differ(self):
        assert not np.array_equal(generate_cells(1, 32, seed=1)[0].label, generate_cells(1, 32, seed=2)[0].label)

    def test_every_class_is_present(self):
        for sample in generate_cells(100, 32, seed=0):
            counts = np.bincount(sample.label.ravel(), minlength=CLASS_COUNT)
            assert counts[NUCLEUS] > 0
            assert counts[NUCLEUS] < counts[CYTOPLASM] < counts[BACKGROUND]

    def test_cell_stays_off_the_border(self):
        for sample in generate_cells(20, 32, seed=5):
            border = np.concatenate([sample.label[0], sample.label[-1], sample.label[:, 0], sample.label[:, -1]])
            assert np.all(border == BACKGROUND)

    def test_shapes_and_range(self):
        sample = generate_cells(1, 48, seed=0)[0]
        assert sample.image.shape == (3, 48, 48)
        assert sample.label.shape == (48, 48)
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0

    def test_prefix_is_stable(self):
        np.testing.assert_array_equal(generate_cells(2, 32, seed=9)[1].image, generate_cells(5, 32, seed=9)[1].image)

    @pytest.mark.parametrize('size', [16, 30, 33])
    def test_invalid_size(self, size):
        with pytest.raises(ValueError):
            generate_cells(1, size, seed=0)


class TestGaussianNoise:
    def test_zero_sigma(self, gray):
        np.testing.assert_array_equal(add_gaussian_noise(gray, 0.0, seed=1), gray)

    def test_standard_deviation(self, gray):
        noisy = add_gaussian_noise(gray, 0.05, seed=1)
        assert np.std(noisy - gray) == pytest.approx(0.05, rel=0.05)

    def test_clipped(self, gray):
        noisy = add_gaussian_noise(gray, 2.0, seed=1)
        assert noisy.min() >= 0.0 and noisy.max() <= 1.0

    def test_same_seed_same_noise(self, gray):
        np.testing.assert_array_equal(add_gaussian_noise(gray, 0.1, 4), add_gaussian_noise(gray, 0.1, 4))

    def test_input_is_untouched(self, gray):
        add_gaussian_noise(gray, 0.1, 4)
        np.testing.assert_array_equal(gray, 0.5)


class TestSaltPepper:
    def test_zero_fraction(self, gray):
        np.testing.assert_array_equal(add_salt_pepper(gray, 0.0, NoiseKind.SALT, seed=1), gray)

    def test_full_salt(self, gray):
        np.testing.assert_array_equal(add_salt_pepper(gray, 1.0, NoiseKind.SALT, seed=1), 1.0)

    @pytest.mark.parametrize('kind, value', [(NoiseKind.SALT, 1.0), (NoiseKind.PEPPER, 0.0)])
    def test_pixel_count(self, gray, kind, value):
        noisy = add_salt_pepper(gray, 0.01, kind, seed=3)
        changed = np.any(noisy != gray, axis=0)
        assert changed.sum() == 40
        assert np.all(noisy[:, changed] == value)

    def test_both_splits_evenly(self, gray):
        noisy = add_salt_pepper(gray, 0.01, NoiseKind.BOTH, seed=3)
        assert (noisy[0] == 1.0).sum() == 20
        assert (noisy[0] == 0.0).sum() == 20

    def test_gaussian_kind_is_rejected(self, gray):
        with pytest.raises(ValueError):
            add_salt_pepper(gray, 0.1, NoiseKind.GAUSSIAN, seed=0)

    def test_fraction_range(self, gray):
        with pytest.raises(ValueError):
            add_salt_pepper(gray, 1.5, NoiseKind.SALT, seed=0)


class TestNoiseSpec:
    def test_dispatch(self, gray):
        np.testing.assert_array_equal(NoiseSpec(NoiseKind.GAUSSIAN, sigma=0.1, seed=2).apply(gray),
                                      add_gaussian_noise(gray, 0.1, 2))
        np.testing.assert_array_equal(NoiseSpec(NoiseKind.PEPPER, fraction=0.02, seed=2).apply(gray),
                                      add_salt_pepper(gray, 0.02, NoiseKind.PEPPER, 2))

    def test_invalid(self):
        with pytest.raises(ValueError):
            NoiseSpec(NoiseKind.GAUSSIAN, sigma=-1.0)


class TestCorruptTrainingSubset:
    def test_zero_count(self, tiny_cells):
        corrupted = corrupt_training_subset(tiny_cells, 0, seed=1)
        for before, after in zip(tiny_cells, corrupted):
            assert after is before

    def test_exact_count_and_labels_kept(self, tiny_cells):
        corrupted = corrupt_training_subset(tiny_cells, 2, seed=1)
        changed = [not np.array_equal(a.image, b.image) for a, b in zip(tiny_cells, corrupted)]
        assert sum(changed) == 2
        for before, after in zip(tiny_cells, corrupted):
            np.testing.assert_array_equal(after.label, before.label)

    def test_deterministic(self, tiny_cells):
        first, second = corrupt_training_subset(tiny_cells, 3, 8), corrupt_training_subset(tiny_cells, 3, 8)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.image, b.image)

    def test_too_many(self, tiny_cells):
        with pytest.raises(ValueError):
            corrupt_training_subset(tiny_cells, len(tiny_cells) + 1, seed=0)


class TestNetpbm:
    def test_label_round_trip(self, tmp_path, rng):
        label = rng.integers(0, 3, size=(7, 5))
        write_label(str(tmp_path / 'l.pgm'), label)
        np.testing.assert_array_equal(read_label(str(tmp_path / 'l.pgm')), label)

    def test_image_round_trip_within_quantization(self, tmp_path, rng):
        image = rng.uniform(size=(3, 6, 9))
        write_image(str(tmp_path / 'i.ppm'), image)
        restored = read_image(str(tmp_path / 'i.ppm'))
        assert restored.shape == image.shape
        assert np.max(np.abs(restored - image)) <= 1.0 / 510.0 + 1e-12

    def test_header_comments(self, tmp_path):
        path = tmp_path / 'c.pgm'
        path.write_bytes(b'P5\n# made by hand\n2 1\n255\n\x01\x02')
        np.testing.assert_array_equal(read_label(str(path)), [[1, 2]])

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / 't.pgm'
        path.write_bytes(b'P5\n2 2\n255\n\x01\x02')
        with pytest.raises(NetpbmPayloadError):
            read_label(str(path))

    def test_maxval(self, tmp_path):
        path = tmp_path / 'm.pgm'
        path.write_bytes(b'P5\n1 1\n65535\n\x00\x01')
        with pytest.raises(NetpbmMaxvalError):
            read_label(str(path))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / 'w.pgm'
        path.write_bytes(b'P6\n1 1\n255\n\x00\x00\x00')
        with pytest.raises(NetpbmHeaderError):
            read_label(str(path))

    def test_empty_file(self, tmp_path):
        path = tmp_path / 'e.pgm'
        path.write_bytes(b'')
        with pytest.raises(NetpbmHeaderError):
            read_label(str(path))


class TestDatasetFiles:
    def test_round_trip(self, tiny_dataset, tiny_cells):
        manifest = read_manifest(tiny_dataset)
        assert manifest['count'] == '6'
        assert manifest['train'] == '0000,0001,0002,0003'
        assert manifest['seed'] == '3'
        splits = read_dataset(tiny_dataset)
        assert [len(splits['train']), len(splits['test'])] == [4, 2]
        np.testing.assert_array_equal(splits['test'][0].label, tiny_cells[4].label)
        assert isinstance(splits['train'][0], Sample)
        assert np.max(np.abs(splits['train'][1].image - tiny_cells[1].image)) <= 1.0 / 510.0 + 1e-12

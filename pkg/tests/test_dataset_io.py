import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bagssl.dataset_io import (
    AugmentParams,
    ImageRecord,
    bilinear_resize,
    color_augment,
    extract_patch,
    load_cifar10,
    load_idx,
    random_resized_crop,
    sample_patch_pair,
)
from bagssl.errors import DataError

from oracles import resize_oracle
from util_digits import write_idx_images, write_idx_labels


def make_image(pixels, image_id=0, label=None):
    pixels = np.asarray(pixels, dtype=np.float64)
    c, h, w = pixels.shape
    return ImageRecord(image_id, w, h, c, pixels, label)


def cifar_record(label, pixel_bytes):
    return bytes([label]) + bytes(pixel_bytes)


class TestLoadCifar10:
    def test_empty_file_is_error(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(b"")
        with pytest.raises(DataError, match="empty"):
            load_cifar10(path)

    def test_bad_length_is_error(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(b"\x00" * 3072)
        with pytest.raises(DataError, match="3073"):
            load_cifar10(path)

    def test_bad_label_names_record(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(cifar_record(1, [0] * 3072) + cifar_record(17, [0] * 3072))
        with pytest.raises(DataError, match="record 1.*17"):
            load_cifar10(path)

    def test_saturated_record(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(cifar_record(3, [255] * 3072))
        records = load_cifar10(path)
        assert len(records) == 1
        rec = records[0]
        assert rec.label == 3
        assert rec.width == rec.height == 32 and rec.channels == 3
        assert np.all(rec.pixels == 1.0)

    def test_two_records_match_byte_oracle(self, tmp_path):
        rng = np.random.default_rng(7)
        raw = b"".join(
            cifar_record(int(rng.integers(0, 10)), rng.integers(0, 256, 3072).tolist())
            for _ in range(2)
        )
        path = tmp_path / "batch.bin"
        path.write_bytes(raw)
        records = load_cifar10(path)
        from oracles import decode_cifar_bytes

        expected = decode_cifar_bytes(raw)
        assert [r.id for r in records] == [0, 1]
        for rec, (label, pix) in zip(records, expected):
            assert rec.label == label
            np.testing.assert_array_equal(rec.pixels, pix)


class TestLoadIdx:
    def test_count_mismatch(self, tmp_path):
        write_idx_images(tmp_path / "im", np.zeros((10, 2, 2), dtype=np.uint8))
        write_idx_labels(tmp_path / "lab", np.zeros(9, dtype=np.uint8))
        with pytest.raises(DataError, match="10.*9"):
            load_idx(tmp_path / "im", tmp_path / "lab")

    def test_hand_decoded_fixture(self, tmp_path):
        # 1 image, 2x2, payload (0, 128, 255, 64) row-major
        write_idx_images(tmp_path / "im", np.array([[[0, 128], [255, 64]]], dtype=np.uint8))
        write_idx_labels(tmp_path / "lab", np.array([5], dtype=np.uint8))
        (rec,) = load_idx(tmp_path / "im", tmp_path / "lab")
        assert rec.channels == 1 and rec.width == 2 and rec.height == 2
        assert rec.label == 5
        np.testing.assert_array_equal(
            rec.pixels, np.array([[[0.0, 128 / 255], [1.0, 64 / 255]]])
        )

    def test_all_zero_payload(self, tmp_path):
        write_idx_images(tmp_path / "im", np.zeros((3, 4, 4), dtype=np.uint8))
        write_idx_labels(tmp_path / "lab", np.zeros(3, dtype=np.uint8))
        records = load_idx(tmp_path / "im", tmp_path / "lab")
        assert len(records) == 3
        assert all(np.all(r.pixels == 0.0) for r in records)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "im").write_bytes(b"\x00\x00\x09\x03" + b"\x00" * 16)
        write_idx_labels(tmp_path / "lab", np.zeros(1, dtype=np.uint8))
        with pytest.raises(DataError, match="magic"):
            load_idx(tmp_path / "im", tmp_path / "lab")

    def test_truncated_payload(self, tmp_path):
        import struct

        (tmp_path / "im").write_bytes(struct.pack(">IIII", 0x803, 2, 4, 4) + b"\x00" * 20)
        write_idx_labels(tmp_path / "lab", np.zeros(2, dtype=np.uint8))
        with pytest.raises(DataError, match="truncated"):
            load_idx(tmp_path / "im", tmp_path / "lab")

    def test_empty_is_error(self, tmp_path):
        write_idx_images(tmp_path / "im", np.zeros((0, 2, 2), dtype=np.uint8))
        write_idx_labels(tmp_path / "lab", np.zeros(0, dtype=np.uint8))
        with pytest.raises(DataError, match="empty"):
            load_idx(tmp_path / "im", tmp_path / "lab")

    def test_digits_fixture_loads(self, digits_paths):
        records = load_idx(digits_paths["train_images"], digits_paths["train_labels"])
        assert len(records) == 1200
        assert records[0].width == records[0].height == 28
        assert {r.label for r in records} == set(range(10))


class TestExtractPatch:
    def test_same_size_is_identity(self, rng):
        img = make_image(rng.random((3, 8, 8)))
        patch = extract_patch(img, 2, 1, 5, 5)
        np.testing.assert_array_equal(patch.pixels, img.pixels[:, 1:6, 2:7])
        assert (patch.x, patch.y, patch.src_size, patch.canonical_size) == (2, 1, 5, 5)

    def test_constant_preserved(self, rng):
        img = make_image(np.full((1, 9, 9), 0.37))
        patch = extract_patch(img, 1, 2, 4, 7)
        np.testing.assert_allclose(patch.pixels, 0.37, rtol=0, atol=1e-15)

    def test_2x2_to_4x4_matches_scalar_oracle(self):
        grid = np.array([[0.0, 1.0], [1.0, 0.0]])
        img = make_image(grid[None, :, :])
        patch = extract_patch(img, 0, 0, 2, 4)
        expected = resize_oracle(grid, 4, 4)
        np.testing.assert_allclose(patch.pixels[0], expected, atol=1e-15)
        # frozen values computed from the scalar oracle: v(y,x) = x + y - 2xy
        np.testing.assert_allclose(
            patch.pixels[0],
            np.array(
                [
                    [0.0, 1 / 3, 2 / 3, 1.0],
                    [1 / 3, 4 / 9, 5 / 9, 2 / 3],
                    [2 / 3, 5 / 9, 4 / 9, 1 / 3],
                    [1.0, 2 / 3, 1 / 3, 0.0],
                ]
            ),
            atol=1e-15,
        )

    def test_out_of_bounds(self, rng):
        img = make_image(rng.random((1, 8, 8)))
        with pytest.raises(ValueError, match="out of bounds"):
            extract_patch(img, 5, 0, 4, 4)
        with pytest.raises(ValueError, match="out of bounds"):
            extract_patch(img, -1, 0, 4, 4)

    @given(st.integers(2, 6), st.integers(0, 3), st.data())
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_bit_identical(self, src, offset, data):
        seed = data.draw(st.integers(0, 2**32 - 1))
        r = np.random.default_rng(seed)
        img = make_image(r.random((2, 10, 10)))
        patch = extract_patch(img, offset, offset, src, src)
        assert np.array_equal(patch.pixels, img.pixels[:, offset : offset + src, offset : offset + src])

    def test_resize_linearity(self, rng):
        x = rng.random((2, 5, 5))
        a, c = 1.7, 0.3
        lhs = bilinear_resize(a * x + c, 9, 9)
        rhs = a * bilinear_resize(x, 9, 9) + c
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)


class TestColorAugment:
    def patch_of(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        return extract_patch(make_image(pixels), 0, 0, pixels.shape[1], pixels.shape[1])

    def test_identity_params_bit_identical(self, rng):
        patch = self.patch_of(rng.random((3, 6, 6)))
        out = color_augment(patch, AugmentParams.identity(), rng)
        assert np.array_equal(out.pixels, patch.pixels)

    def test_grayscale_prob_one(self, rng):
        patch = self.patch_of(rng.random((3, 4, 4)))
        aug = AugmentParams((1, 1), (1, 1), (1, 1), grayscale_prob=1.0, flip_prob=0.0)
        out = color_augment(patch, aug, rng)
        np.testing.assert_array_equal(out.pixels[0], out.pixels[1])
        np.testing.assert_array_equal(out.pixels[1], out.pixels[2])

    def test_brightness_clamps(self, rng):
        patch = self.patch_of(np.full((1, 3, 3), 0.9))
        aug = AugmentParams(brightness_range=(1.0, 2.0), contrast_range=(1, 1),
                            saturation_range=(1, 1), grayscale_prob=0, flip_prob=0)
        seen_above = False
        r = np.random.default_rng(0)
        for _ in range(50):
            out = color_augment(patch, aug, r)
            assert out.pixels.max() <= 1.0
            seen_above = seen_above or np.all(out.pixels == 1.0)
        assert seen_above  # some draw had factor >= 1/0.9, proving the clamp fired

    def test_ranges_must_contain_one(self):
        with pytest.raises(ValueError, match="contain 1.0"):
            AugmentParams(brightness_range=(2.0, 3.0))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_output_always_in_unit_interval(self, seed):
        r = np.random.default_rng(seed)
        patch = self.patch_of(r.random((3, 5, 5)))
        out = color_augment(patch, AugmentParams(), r)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


class TestSamplePatchPair:
    def test_single_position(self, rng):
        img = make_image(rng.random((3, 32, 32)))
        p1, p2 = sample_patch_pair(img, 32, 32, AugmentParams(), rng)
        assert (p1.x, p1.y) == (0, 0) and (p2.x, p2.y) == (0, 0)

    def test_fixed_seed_reproduces(self, rng):
        img = make_image(rng.random((3, 16, 16)))
        a = sample_patch_pair(img, 8, 8, AugmentParams(), np.random.default_rng(42))
        b = sample_patch_pair(img, 8, 8, AugmentParams(), np.random.default_rng(42))
        for pa, pb in zip(a, b):
            assert (pa.x, pa.y) == (pb.x, pb.y)
            assert np.array_equal(pa.pixels, pb.pixels)

    def test_oversized_src(self, rng):
        img = make_image(rng.random((1, 8, 8)))
        with pytest.raises(ValueError, match="exceeds"):
            sample_patch_pair(img, 9, 8, AugmentParams(), rng)

    def test_positions_uniform_chi_square(self, rng):
        # statistical oracle: chi-square GOF against uniform over 0..18
        from scipy.stats import chi2

        img = make_image(rng.random((1, 32, 32)))
        aug = AugmentParams.identity()
        r = np.random.default_rng(99)
        n = 30_000
        counts = np.zeros(19)
        for _ in range(n):
            p1, p2 = sample_patch_pair(img, 14, 14, aug, r)
            counts[p1.x] += 1
            counts[p2.x] += 1
        expected = 2 * n / 19
        stat = ((counts - expected) ** 2 / expected).sum()
        assert stat < chi2.ppf(0.999, df=18)


class TestRandomResizedCrop:
    def test_full_scale_square(self, rng):
        img = make_image(rng.random((1, 20, 20)))
        patch = random_resized_crop(img, 1.0, 1.0, 16, rng)
        assert patch.src_size == 20 and (patch.x, patch.y) == (0, 0)

    def test_scale_range_cifar_sized(self, rng):
        img = make_image(rng.random((1, 32, 32)))
        sides = {random_resized_crop(img, 0.08, 1.0, 16, rng).src_size for _ in range(4000)}
        assert min(sides) == 9 and max(sides) == 32

    def test_scale_range_imagenet_sized(self):
        img = make_image(np.zeros((1, 224, 224)))
        r = np.random.default_rng(5)
        sides = [random_resized_crop(img, 0.08, 1.0, 16, r).src_size for _ in range(3000)]
        assert abs(min(sides) - 63) <= 1  # spec quotes 64 with +-1 rounding tolerance
        assert abs(max(sides) - 224) <= 1

    def test_invalid_interval(self, rng):
        img = make_image(rng.random((1, 8, 8)))
        with pytest.raises(ValueError, match="scale"):
            random_resized_crop(img, 0.5, 0.2, 8, rng)
        with pytest.raises(ValueError, match="scale"):
            random_resized_crop(img, 0.0, 1.0, 8, rng)

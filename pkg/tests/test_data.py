import numpy as np
import pytest

from thermoflow.data import (
    AlignedMapPair,
    ImagePair,
    PairLoader,
    grid_positions,
    grid_sample,
    load_image,
    load_pair,
    normalize_thermal,
    random_resize_crop,
    read_manifest,
    save_png,
    synth_generate,
    synth_oracle_thermal,
    validate_manifest,
    write_manifest,
)
from thermoflow.errors import DataError, DimensionError, StyleLookupError


def map_pair(h=256, w=256, mpp=1.0, invalid=None, seed=0):
    rng = np.random.default_rng(seed)
    return AlignedMapPair(
        rgb_map=rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8),
        thermal_map=rng.integers(0, 256, size=(h, w), dtype=np.uint8),
        meters_per_pixel=mpp,
        invalid_mask=invalid,
    )


class TestGridSample:
    def test_position_count_formula(self):
        # 2048 px map at 1 m/px, stride 35 m, crop 512: 44 positions per axis.
        assert len(grid_positions(2048, 512, 35.0)) == 44

    def test_counts_match_arithmetic_oracle_randomized(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            h = int(rng.integers(600, 1500))
            w = int(rng.integers(600, 1500))
            crop = int(rng.integers(64, 512))
            mpp = float(rng.uniform(0.5, 2.0))
            stride_m = float(rng.uniform(10, 120))
            maps = map_pair(h, w, mpp, seed=int(rng.integers(1e6)))
            pairs = grid_sample(maps, stride_m, crop)
            stride_px = stride_m / mpp
            expect = (int(np.floor((h - crop) / stride_px)) + 1) * (
                int(np.floor((w - crop) / stride_px)) + 1
            )
            assert len(pairs) == expect

    def test_crops_stay_in_bounds_and_aligned(self):
        maps = map_pair(300, 300, 1.0)
        pairs = grid_sample(maps, 97.0, 128)
        for p in pairs:
            assert p.rgb.shape == (128, 128, 3)
            assert p.thermal.shape == (128, 128, 1)

    def test_fully_invalid_map_gives_empty(self):
        maps = map_pair(invalid=np.ones((256, 256), dtype=bool))
        assert grid_sample(maps, 35.0, 64) == []

    def test_stride_beyond_map_single_origin_crop(self):
        maps = map_pair(128, 128)
        pairs = grid_sample(maps, 1000.0, 64)
        assert len(pairs) == 1
        assert np.array_equal(pairs[0].rgb, maps.rgb_map[:64, :64])

    def test_crop_larger_than_map(self):
        with pytest.raises(DimensionError):
            grid_sample(map_pair(100, 100), 35.0, 128)

    def test_invalid_fraction_threshold(self):
        invalid = np.zeros((256, 256), dtype=bool)
        invalid[:64, :64] = True  # fully poisons the first crop only
        maps = map_pair(invalid=invalid)
        kept = grid_sample(maps, 64.0, 64)
        all_pairs = grid_sample(map_pair(), 64.0, 64)
        assert len(kept) == len(all_pairs) - 1

    def test_16bit_thermal_rejected_before_normalize(self):
        maps = map_pair()
        maps.thermal_map = maps.thermal_map.astype(np.uint16) * 256
        with pytest.raises(DataError):
            grid_sample(maps, 35.0, 64)


class TestNormalizeThermal:
    def test_constant_maps_to_zero(self):
        out = normalize_thermal(np.full((8, 8), 1234, dtype=np.uint16), method="minmax")
        assert out.dtype == np.uint8 and np.all(out == 0)

    def test_minmax_endpoints(self):
        raw = np.array([[0, 65535]], dtype=np.uint16)
        out = normalize_thermal(raw, method="minmax")
        assert out.tolist() == [[0, 255]]

    def test_percentile_ramp_linear(self):
        # Per-pixel closed form: clip to the (1, 99) percentiles, then
        # scale linearly; the interior must match within one level.
        raw = np.arange(10000, dtype=np.uint16).reshape(100, 100)
        out = normalize_thermal(raw, method="percentile", p_lo=1.0, p_hi=99.0)
        lo, hi = np.percentile(raw.astype(np.float64), [1.0, 99.0])
        expect = np.rint(np.clip((raw - lo) / (hi - lo), 0, 1) * 255)
        assert np.max(np.abs(out.astype(np.int64) - expect.astype(np.int64))) <= 1

    def test_all_invalid_raises(self):
        with pytest.raises(DataError):
            normalize_thermal(np.ones((4, 4), dtype=np.uint16),
                              invalid_mask=np.ones((4, 4), dtype=bool))

    def test_invalid_mask_excluded_from_range(self):
        raw = np.array([[0, 100], [200, 60000]], dtype=np.uint16)
        mask = np.array([[False, False], [False, True]])
        out = normalize_thermal(raw, method="minmax", invalid_mask=mask)
        assert out[1, 1] == 255  # clipped hot corner
        assert out[1, 0] == 255  # true valid max

    def test_unknown_method(self):
        with pytest.raises(DataError):
            normalize_thermal(np.ones((2, 2), dtype=np.uint16), method="zscore")


def ramp_pair(size=64):
    # Coordinate ramps injected as content: any geometry change that
    # desynchronizes rgb and thermal will break their equality.
    ramp = (np.arange(size)[:, None] * 7 + np.arange(size)[None, :] * 3) % 256
    ramp = ramp.astype(np.uint8)
    rgb = np.stack([ramp, ramp, ramp], axis=2)
    return ImagePair(rgb=rgb, thermal=ramp[:, :, None], style_id="synthA",
                     split="train", source="ramp")


class TestRandomResizeCrop:
    def test_seeded_reproducible(self):
        pair = ramp_pair(96)
        a = random_resize_crop(pair, 64, np.random.default_rng(3))
        b = random_resize_crop(pair, 64, np.random.default_rng(3))
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.thermal, b.thermal)

    def test_coordinate_ramp_alignment(self):
        pair = ramp_pair(96)
        rng = np.random.default_rng(4)
        for _ in range(10):
            out = random_resize_crop(pair, 64, rng)
            assert np.array_equal(out.rgb[:, :, 0], out.thermal[:, :, 0])
            assert out.rgb.shape == (64, 64, 3)

    def test_unit_scale_centered_is_identity(self):
        pair = ramp_pair(64)
        out = random_resize_crop(pair, 64, np.random.default_rng(5), scale_range=(1.0, 1.0))
        assert np.array_equal(out.rgb, pair.rgb)
        assert np.array_equal(out.thermal, pair.thermal)

    def test_small_image_rejected(self):
        with pytest.raises(DataError):
            random_resize_crop(ramp_pair(32), 64, np.random.default_rng(6))


class TestSynthGenerate:
    def test_white_rgb_oracles(self):
        white = np.full((4, 4, 3), 255, dtype=np.uint8)
        assert np.all(synth_oracle_thermal(white, "synthA") == 255)
        assert np.all(synth_oracle_thermal(white, "synthB") == 0)

    def test_styles_sum_to_255(self):
        a = synth_generate("synthA", 3, 32, seed=7)
        b = synth_generate("synthB", 3, 32, seed=7)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.rgb, pb.rgb)
            total = pa.thermal.astype(np.int64) + pb.thermal.astype(np.int64)
            assert np.all(total == 255)

    def test_reproducible_from_seed(self):
        a = synth_generate("synthA", 2, 32, seed=8)
        b = synth_generate("synthA", 2, 32, seed=8)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.rgb, pb.rgb)

    def test_oracle_error_zero_right_style_max_wrong_style(self):
        pairs = synth_generate("synthA", 2, 32, seed=9)
        for p in pairs:
            right = synth_oracle_thermal(p.rgb, "synthA")
            wrong = synth_oracle_thermal(p.rgb, "synthB")
            assert np.array_equal(right, p.thermal)
            err_wrong = np.mean(
                (wrong.astype(np.float64) - p.thermal.astype(np.float64)) ** 2
            )
            assert err_wrong > 0

    def test_unknown_style(self):
        with pytest.raises(StyleLookupError):
            synth_generate("synthC", 1, 16, seed=0)
        with pytest.raises(DataError):
            synth_generate("synthA", 0, 16, seed=0)


class TestManifestAndLoader:
    def _write_corpus(self, tmp_path, n=6):
        pairs = synth_generate("synthA", n // 2, 16, seed=1) + synth_generate(
            "synthB", n - n // 2, 16, seed=2
        )
        records = []
        for i, p in enumerate(pairs):
            rgb_rel = f"images/{i}_rgb.png"
            th_rel = f"images/{i}_th.png"
            save_png(p.rgb, tmp_path / rgb_rel)
            save_png(p.thermal, tmp_path / th_rel)
            records.append(
                {"rgb_path": rgb_rel, "thermal_path": th_rel, "style_id": p.style_id,
                 "split": "train", "source": p.source}
            )
        manifest = tmp_path / "manifest.jsonl"
        write_manifest(manifest, records)
        return manifest, records

    def test_png_roundtrip(self, tmp_path):
        pair = synth_generate("synthA", 1, 16, seed=3)[0]
        save_png(pair.rgb, tmp_path / "x.png")
        save_png(pair.thermal, tmp_path / "t.png")
        assert np.array_equal(load_image(tmp_path / "x.png"), pair.rgb)
        assert np.array_equal(load_image(tmp_path / "t.png"), pair.thermal[:, :, 0])

    def test_16bit_png_roundtrip(self, tmp_path):
        raw = np.random.default_rng(4).integers(0, 65536, size=(8, 8), dtype=np.uint16)
        save_png(raw, tmp_path / "raw16.png")
        assert np.array_equal(load_image(tmp_path / "raw16.png"), raw)

    def test_validate_manifest_ok(self, tmp_path):
        manifest, records = self._write_corpus(tmp_path)
        assert len(validate_manifest(manifest)) == len(records)

    def test_validate_missing_file(self, tmp_path):
        manifest, records = self._write_corpus(tmp_path)
        (tmp_path / records[0]["rgb_path"]).unlink()
        with pytest.raises(DataError) as exc:
            validate_manifest(manifest)
        assert records[0]["rgb_path"].split("/")[-1] in str(exc.value)

    def test_read_manifest_rejects_bad_split(self, tmp_path):
        manifest = tmp_path / "m.jsonl"
        manifest.write_text(
            '{"rgb_path": "a.png", "thermal_path": "b.png", "style_id": "s", '
            '"split": "training", "source": "x"}\n'
        )
        with pytest.raises(DataError):
            read_manifest(manifest)

    def test_single_pair_loader_repeats(self, tmp_path):
        manifest, records = self._write_corpus(tmp_path, n=2)
        loader = PairLoader(manifest, "train", 1, np.random.default_rng(5),
                            records=records[:1])
        stream = loader.batches()
        first = next(stream)
        second = next(stream)
        assert len(first) == 1 and len(second) == 1
        assert np.array_equal(first[0].rgb, second[0].rgb)

    def test_loader_seeded_order_reproducible(self, tmp_path):
        manifest, _ = self._write_corpus(tmp_path)

        def orders(seed):
            loader = PairLoader(manifest, "train", 2, np.random.default_rng(seed))
            stream = loader.batches()
            return [tuple(p.source for p in next(stream)) for _ in range(6)]

        assert orders(7) == orders(7)
        assert orders(7) != orders(8)

    def test_loader_source_frequency(self, tmp_path):
        manifest, records = self._write_corpus(tmp_path, n=10)
        loader = PairLoader(manifest, "train", 5, np.random.default_rng(9))
        counts = {"synth-synthA": 0, "synth-synthB": 0}
        total = 0
        stream = loader.batches()
        for _ in range(400):
            for p in next(stream):
                counts[p.source] += 1
                total += 1
        share_a = counts["synth-synthA"] / total
        want = sum(r["source"] == "synth-synthA" for r in records) / len(records)
        assert abs(share_a - want) < 0.02

    def test_load_pair_roundtrip(self, tmp_path):
        manifest, records = self._write_corpus(tmp_path, n=2)
        pair = load_pair(records[0], tmp_path)
        assert pair.rgb.shape == (16, 16, 3)
        assert pair.split == "train"

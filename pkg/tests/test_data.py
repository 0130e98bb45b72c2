import numpy as np
import pytest
from hypothesis import given, strategies as st

from occlusion_attn.data import (MASK_COLORS, AugmentConfig, apply_mask, augment,
                                 gen_identity_image, load_image_folder, make_eval_dataset,
                                 make_synthetic_dataset, make_verification_pairs, read_manifest,
                                 read_pnm, write_image_folder, write_pnm)


class TestGenerator:
    def test_bitwise_deterministic(self):
        a, b = gen_identity_image(7, 3, 11), gen_identity_image(7, 3, 11)
        assert a.image.tobytes() == b.image.tobytes()

    def test_identities_differ(self):
        for i in range(100):
            a, b = gen_identity_image(0, 2 * i, 0), gen_identity_image(0, 2 * i + 1, 0)
            differs = (np.abs(a.image - b.image) > 1 / 255).any(axis=0)
            assert differs.mean() >= 0.05

    @given(st.integers(0, 2**32 - 1), st.integers(0, 500), st.integers(0, 500))
    def test_range_and_unmasked(self, seed, ident, idx):
        s = gen_identity_image(seed, ident, idx, 24)
        assert s.image.shape == (3, 24, 24) and s.image.dtype == np.float32
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert not s.masked and not s.mask_region.any()

    def test_order_independent(self):
        ds = make_synthetic_dataset(5, 3, 4, 16)
        single = gen_identity_image(5, 2, 3, 16)
        assert ds.images[2 * 4 + 3].tobytes() == single.image.tobytes()
        assert ds.n_classes == 3


class TestApplyMask:
    def test_zero_probability_is_identity(self):
        s = gen_identity_image(0, 1, 1)
        out = apply_mask(s, AugmentConfig(ma_probability=0.0), 0.0, 0)
        assert out is s

    @pytest.mark.parametrize("pick", range(4))
    def test_forced_mask_uses_configured_colour(self, pick):
        s = gen_identity_image(0, 4, 2)
        out = apply_mask(s, AugmentConfig(ma_probability=1.0), 0.999, pick)
        assert out.masked and out.mask_region.any()
        colour = np.array(list(MASK_COLORS.values())[pick], dtype=np.float32)
        np.testing.assert_array_equal(out.image[:, out.mask_region],
                                      np.repeat(colour[:, None], out.mask_region.sum(), axis=1))
        assert set(MASK_COLORS) == {"blue", "green", "black", "white"}

    def test_binomial_rate(self):
        s = gen_identity_image(0, 0, 0, 16)
        cfg = AugmentConfig(ma_probability=0.3)
        rng = np.random.default_rng(2024)
        hits = sum(apply_mask(s, cfg, rng.uniform(), int(rng.integers(4))).masked
                   for _ in range(10_000))
        assert abs(hits / 10_000 - 0.3) <= 0.015

    def test_rejects_masked_input(self):
        s = apply_mask(gen_identity_image(0, 0, 0), AugmentConfig(ma_probability=1.0), 0.0, 0)
        with pytest.raises(ValueError):
            apply_mask(s, AugmentConfig(ma_probability=1.0), 0.0, 0)

    @given(st.integers(0, 2**32 - 1), st.integers(0, 300), st.sampled_from([16, 32, 48]))
    def test_region_invariants(self, seed, ident, size):
        s = gen_identity_image(seed, ident, 0, size)
        out = apply_mask(s, AugmentConfig(ma_probability=1.0), 0.0, seed % 4)
        region = out.mask_region
        assert out.masked == bool(region.any())
        assert not region[: int(np.ceil(0.45 * size))].any()
        assert not region[: size // 2].any()
        np.testing.assert_array_equal(out.image[:, ~region], s.image[:, ~region])

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            AugmentConfig(ma_probability=1.5)


@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.integers(0, 3))
def test_augment_preserves_range_and_shape(seed, p, t):
    rng = np.random.default_rng(seed)
    s = gen_identity_image(seed, seed % 50, 0, 20)
    out = augment(s, AugmentConfig(ma_probability=p, translate_px=t), rng)
    assert out.image.shape == s.image.shape and out.mask_region.shape == s.mask_region.shape
    assert out.image.min() >= 0 and out.image.max() <= 1
    assert out.masked == s.masked or not s.masked


class TestPnm:
    def test_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, (3, 5, 7), dtype=np.uint8)
        gray = rng.integers(0, 256, (4, 6), dtype=np.uint8)
        write_pnm(tmp_path / "a.ppm", img)
        write_pnm(tmp_path / "b.pgm", gray)
        np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), img)
        np.testing.assert_array_equal(read_pnm(tmp_path / "b.pgm"), gray)
        assert (tmp_path / "b.pgm").read_bytes().startswith(b"P5\n6 4\n255\n")

    def test_header_comments(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        np.testing.assert_array_equal(read_pnm(tmp_path / "c.pgm"), [[0, 255]])

    @pytest.mark.parametrize("payload", [b"P3\n1 1\n255\n", b"P6\n2 2\n255\n\x00", b"P5\nx y\n"])
    def test_bad_files_name_the_path(self, tmp_path, payload):
        path = tmp_path / "bad.ppm"
        path.write_bytes(payload)
        with pytest.raises(ValueError, match="bad.ppm"):
            read_pnm(path)


def _fixture_folder(root, rng):
    for name, n in (("alice", 3), ("bob", 2)):
        (root / name).mkdir(parents=True)
        for k in range(n):
            write_pnm(root / name / f"{k}.ppm", rng.integers(0, 256, (3, 8, 8), dtype=np.uint8))
    region = np.zeros((8, 8), np.uint8)
    region[5:7, 2:6] = 255
    write_pnm(root / "bob" / "1.mask.pgm", region)


class TestImageFolder:
    def test_two_identity_fixture(self, tmp_path, rng):
        _fixture_folder(tmp_path, rng)
        ds = load_image_folder(tmp_path)
        assert ds.n_classes == 2
        assert np.bincount(ds.identities).tolist() == [3, 2]
        assert ds.masked.tolist() == [False, False, False, False, True]
        assert ds.regions[4].sum() == 8
        again = load_image_folder(tmp_path)
        assert again.paths == ds.paths and again.images.tobytes() == ds.images.tobytes()

    def test_corrupt_file_named(self, tmp_path, rng):
        _fixture_folder(tmp_path, rng)
        (tmp_path / "bob" / "0.ppm").write_bytes(b"P9 garbage")
        with pytest.raises(ValueError, match=r"bob.0\.ppm"):
            load_image_folder(tmp_path)

    def test_empty_identity_dir(self, tmp_path, rng):
        _fixture_folder(tmp_path, rng)
        (tmp_path / "carol").mkdir()
        with pytest.raises(ValueError, match="carol"):
            load_image_folder(tmp_path)

    def test_write_then_load(self, tmp_path):
        ds = make_eval_dataset(0, 2, 2, 16)
        manifest = write_image_folder(ds, tmp_path)
        rows = read_manifest(manifest)
        assert len(rows) == len(ds) and sum(m for _, _, m in rows) == ds.masked.sum()
        loaded = load_image_folder(tmp_path)
        assert loaded.masked.sum() == ds.masked.sum()
        # 8-bit quantisation is the only loss
        assert np.abs(np.sort(loaded.images.ravel()) - np.sort(ds.images.ravel())).max() <= 0.5 / 255 + 1e-6
        assert manifest.read_text(encoding="utf-8").splitlines()[0] == "0000/0000.ppm\t0\t0"


class TestPairs:
    @pytest.fixture
    def ds(self):
        return make_eval_dataset(3, 5, 4, 16)

    def test_impostor_only(self, ds):
        pairs = make_verification_pairs(ds, 0, 0, 37)
        assert len(pairs) == 37 and not any(g for _, _, g in pairs)

    @pytest.mark.parametrize("mode", ["clean", "masked_probe"])
    def test_labels_and_no_self_pairs(self, ds, mode):
        pairs = make_verification_pairs(ds, 1, 25, 60, mode)
        for a, b, same in pairs:
            assert a != b and ds.source[a] != ds.source[b]
            assert (ds.identities[a] == ds.identities[b]) == same
            if mode == "masked_probe":
                assert ds.masked[a] and not ds.masked[b]
            else:
                assert not ds.masked[a] and not ds.masked[b]
        assert len(set(pairs)) == len(pairs)

    def test_deterministic(self, ds):
        assert make_verification_pairs(ds, 9, 10, 10) == make_verification_pairs(ds, 9, 10, 10)

    def test_insufficient(self, ds):
        with pytest.raises(ValueError, match="insufficient"):
            make_verification_pairs(ds, 0, 10_000, 0)
        one = make_synthetic_dataset(0, 1, 3, 16)
        with pytest.raises(ValueError, match="insufficient"):
            make_verification_pairs(one, 0, 1, 1)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_kept
from ssit import saliency as sl
from ssit.config import ConfigError
from ssit.imaging import box_mean, integral_image, to_gray


def disc_image(size=64, radius=8, value=1.0):
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    mask = np.hypot(yy - c, xx - c) <= radius
    return np.where(mask, value, 0.0)[..., None].repeat(3, axis=2), mask


class TestHelpers:
    def test_box_mean_matches_loop(self, rng):
        g = rng.random((9, 11))
        table = integral_image(g)
        out = box_mean(g, 2, table)
        for y in range(9):
            for x in range(11):
                win = g[max(0, y - 2):y + 3, max(0, x - 2):x + 3]
                assert out[y, x] == pytest.approx(win.mean(), abs=1e-12)

    def test_luma(self):
        img = np.zeros((2, 2, 3))
        img[..., 1] = 1.0
        assert np.allclose(to_gray(img), 0.587)


class TestNormalize:
    def test_range_and_max(self, rng):
        out = sl.normalize(rng.normal(size=(16, 16)))
        assert out.min() == 0.0 and out.max() == 1.0

    def test_flat_map(self):
        assert not sl.normalize(np.full((8, 8), 3.0)).any()

    @given(arrays(np.float64, (6, 7), elements=st.floats(-1e3, 1e3)))
    def test_idempotent(self, x):
        once = sl.normalize(x)
        np.testing.assert_allclose(sl.normalize(once), once, atol=1e-12)


class TestFineGrained:
    def test_constant_image(self):
        assert not sl.fine_grained_saliency(np.full((32, 32, 3), 0.4)).any()

    def test_single_pixel_peak(self):
        img = np.zeros((64, 64))
        img[20, 41] = 1.0
        sal = sl.fine_grained_saliency(img)
        assert np.unravel_index(np.argmax(sal), sal.shape) == (20, 41)
        assert sal[20, 41] == 1.0

    def test_disc_contrast(self):
        img, mask = disc_image()
        sal = sl.fine_grained_saliency(img)
        assert sal[mask].mean() >= 2 * sal[~mask].mean()

    def test_shape(self, rng):
        assert sl.fine_grained_saliency(rng.random((40, 56, 3))).shape == (40, 56)

    def test_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            sl.fine_grained_saliency(np.zeros((7, 20)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-0.5, 0.5))
    def test_constant_offset_invariance(self, seed, c):
        img = np.random.default_rng(seed).random((24, 24, 3))
        np.testing.assert_allclose(sl.fine_grained_saliency(img + c), sl.fine_grained_saliency(img), atol=1e-9)


class TestSpectral:
    def test_constant_image(self):
        assert not sl.spectral_residual_saliency(np.full((64, 64), 0.7)).any()

    def test_shape_preserved(self, rng):
        assert sl.spectral_residual_saliency(rng.random((96, 128, 3))).shape == (96, 128)

    def test_square_concentration(self):
        img = np.zeros((64, 64))
        img[24:32, 36:44] = 1.0
        sal = sl.spectral_residual_saliency(img)
        # bounding box doubled about its center
        box = sal[20:36, 32:48]
        assert box.sum() >= 0.6 * sal.sum()

    def test_dispatch(self, rng):
        img = rng.random((16, 16))
        np.testing.assert_array_equal(sl.compute_saliency(img, "spectral"), sl.spectral_residual_saliency(img))
        with pytest.raises(ConfigError):
            sl.compute_saliency(img, "learned")


class TestBinarize:
    def test_examples(self):
        assert not sl.binarize(np.zeros((4, 4))).any()
        np.testing.assert_array_equal(sl.binarize(np.array([0.2, 0.8])), [0, 1])

    def test_disc_area(self):
        sal = sl.fine_grained_saliency(disc_image()[0])
        assert sl.binarize(sal, 0.5).sum() == np.count_nonzero(sal >= 0.5)

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
    def test_bad_threshold(self, t):
        with pytest.raises(ConfigError):
            sl.binarize(np.zeros(3), t)


class TestPatchScores:
    def test_uniform(self):
        assert np.all(sl.patch_scores(np.full((8, 8), 0.3), 4).scores == 0.3)

    def test_top_left(self):
        s = np.zeros((4, 4))
        s[0, 1] = 1.0
        np.testing.assert_array_equal(sl.patch_scores(s, 2).scores, [1, 0, 0, 0])

    def test_loop_oracle(self, rng):
        s = rng.random((32, 32))
        ps = sl.patch_scores(s, 16)
        oracle = []
        for i in range(2):
            for j in range(2):
                m = -1.0
                for y in range(16):
                    for x in range(16):
                        m = max(m, s[16 * i + y, 16 * j + x])
                oracle.append(m)
        assert (ps.grid_h, ps.grid_w, len(ps)) == (2, 2, 4)
        np.testing.assert_array_equal(ps.scores, oracle)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            sl.patch_scores(np.zeros((10, 12)), 4)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (8, 12), elements=st.floats(0, 1)), st.floats(0.01, 0.99))
    def test_threshold_commutes(self, s, t):
        a = sl.patch_scores(s, 4).scores >= t
        b = sl.patch_scores(sl.binarize(s, t), 4).scores == 1
        np.testing.assert_array_equal(a, b)


class TestSelectSalient:
    def test_keep_all(self, rng):
        ks = sl.select_salient(rng.random(10), 0)
        np.testing.assert_array_equal(ks.kept_indices, np.arange(10))

    def test_vit_small_count(self, rng):
        assert len(sl.select_salient(rng.random(196), 25)) == 147

    def test_tie_rule(self):
        np.testing.assert_array_equal(sl.select_salient(np.ones(8), 50).kept_indices, [0, 1, 2, 3])

    def test_bad_ratio(self):
        for m in (-1, 100, 150):
            with pytest.raises(ConfigError):
                sl.select_salient(np.ones(4), m)

    @given(st.integers(1, 400), st.floats(0, 99.99))
    def test_size(self, n, m):
        ks = sl.select_salient(np.zeros(n), m)
        assert len(ks) == n - sl.num_removed(n, m)
        assert np.all(np.diff(ks.kept_indices) > 0)

    def test_num_removed_exact(self):
        # 0.29 * 100 is 28.999... in binary floating point
        assert sl.num_removed(100, 29) == 29
        assert sl.num_removed(196, 25) == 49
        assert sl.num_removed(7, 50) == 3

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(77)
        for _ in range(200):
            n = int(rng.integers(1, 13))
            m = float(rng.choice([0, 10, 25, 33.3, 50, 75, 90]))
            # coarse values so ties are common
            scores = rng.integers(0, 4, size=n) / 3.0
            ks = sl.select_salient(scores, m)
            np.testing.assert_array_equal(ks.kept_indices, brute_force_kept(scores, sl.num_removed(n, m)))
            removed = np.setdiff1d(np.arange(n), ks.kept_indices)
            if len(removed) and len(ks):
                assert scores[ks.kept_indices].min() >= scores[removed].max()


class TestCache:
    def test_roundtrip(self, tmp_path, rng):
        img = rng.random((16, 16, 3))
        cache = sl.SaliencyCache(tmp_path)
        first = cache.get(img)
        again = sl.SaliencyCache(tmp_path).get(img)
        np.testing.assert_array_equal(first, again)
        np.testing.assert_allclose(first, sl.fine_grained_saliency(img), atol=1e-7)
        lines = (tmp_path / "manifest.txt").read_text().splitlines()
        assert len(lines) == 1
        digest, backend, params, rel = lines[0].split("\t")
        assert backend == "fine" and params == "{}" and (tmp_path / rel).exists()
        assert (tmp_path / rel.replace(".sstn", ".pgm")).read_bytes().startswith(b"P5\n16 16\n255\n")

    def test_keys_separate_backends(self, tmp_path, rng):
        img = rng.random((16, 16))
        cache = sl.SaliencyCache(tmp_path)
        cache.get(img, "fine")
        cache.get(img, "spectral")
        cache.get(img, "fine", {"radii": [1, 2]})
        assert len(cache) == 3
        assert cache.lookup(img + 0.5, "fine") is None

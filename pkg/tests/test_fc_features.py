import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcage.fc_features import CLAMP_EPS, FCImage, fc_image, fisher_z, inter_icn_fc, pearson
from fcage.icn_decomp import ICNSet


def two_pass_pearson(x, y):
    # definitional oracle: explicit means, then explicit sums
    mx = sum(x) / len(x)
    my = sum(y) / len(y)
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    dx = math.sqrt(sum((a - mx) ** 2 for a in x))
    dy = math.sqrt(sum((b - my) ** 2 for b in y))
    return num / (dx * dy)


class TestPearson:
    def test_self_correlation(self):
        x = np.array([1.0, 2.0, 5.0, 3.0])
        assert pearson(x, x) == 1.0

    def test_sign_flip(self):
        x = np.array([1.0, 2.0, 5.0, 3.0])
        assert pearson(x, -x) == -1.0

    def test_matches_definitional_oracle(self):
        x = [1.0, 2.0, 3.0, 5.0]
        y = [2.0, 1.0, 4.0, 6.0]
        assert abs(pearson(np.array(x), np.array(y)) - two_pass_pearson(x, y)) < 1e-12

    def test_zero_variance_returns_zero(self):
        assert pearson(np.full(5, 2.0), np.arange(5.0)) == 0.0

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            pearson(np.array([1.0, np.nan, 2.0]), np.array([1.0, 2.0, 3.0]))

    def test_short_series_rejected(self):
        with pytest.raises(ValueError):
            pearson(np.array([1.0, 2.0]), np.array([1.0, 2.0]))

    @settings(max_examples=100, deadline=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        scale=st.floats(0.01, 100.0),
        shift=st.floats(-50.0, 50.0),
    )
    def test_positive_affine_invariance(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(20)
        y = rng.standard_normal(20)
        r0 = pearson(x, y)
        r1 = pearson(scale * x + shift, y)
        assert abs(r0 - r1) < 1e-9


class TestFisherZ:
    def test_zero(self):
        assert fisher_z(0.0) == 0.0

    def test_half(self):
        assert abs(fisher_z(0.5) - math.atanh(0.5)) < 1e-15
        assert abs(fisher_z(0.5) - 0.5493061443340549) < 1e-12

    def test_clamp_at_one(self):
        z = fisher_z(1.0)
        assert math.isfinite(z)
        assert z == math.atanh(1.0 - CLAMP_EPS)
        assert fisher_z(-1.0) == -z

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            fisher_z(1.5)

    def test_odd_function(self):
        for r in (0.1, 0.3, 0.77):
            assert fisher_z(-r) == -fisher_z(r)


def make_icns(k, t, grid, seed=0, mask=None):
    rng = np.random.default_rng(seed)
    v = int(np.prod(grid))
    if mask is None:
        mask = np.ones(grid, dtype=bool)
    spatial = rng.uniform(0.1, 1.0, (k, mask.sum()))
    spatial /= spatial.max(axis=1, keepdims=True)
    tc = rng.standard_normal((k, t))
    tc -= tc.mean(axis=1, keepdims=True)
    return ICNSet(spatial=spatial, timecourses=tc, mask=mask)


class TestFCImage:
    def test_perfect_correlation_voxel(self):
        grid = (4, 4, 4)
        icns = make_icns(2, 50, grid, seed=1)
        vol = np.random.default_rng(2).standard_normal((50, *grid))
        vol[:, 0, 0, 0] = icns.timecourses[0]
        img = fc_image(vol, icns)
        assert img.data[0, 0, 0, 0] == pytest.approx(math.atanh(1 - CLAMP_EPS), rel=1e-6)

    def test_identity_downsample_keeps_grid(self):
        grid = (4, 4, 4)
        icns = make_icns(2, 30, grid)
        vol = np.random.default_rng(0).standard_normal((30, *grid))
        img = fc_image(vol, icns, downsample=(1, 1, 1))
        assert img.grid == grid

    def test_matches_brute_force_oracle_with_downsampling(self):
        grid = (4, 4, 4)
        t, k = 50, 3
        icns = make_icns(k, t, grid, seed=3)
        vol = np.random.default_rng(4).standard_normal((t, *grid))

        # brute force: per-voxel two-pass pearson + atanh, then explicit
        # 2x2x2 block averaging
        expect = np.zeros((k, *grid))
        for c in range(k):
            for z in range(4):
                for y in range(4):
                    for x in range(4):
                        r = two_pass_pearson(list(icns.timecourses[c]), list(vol[:, z, y, x]))
                        r = min(1 - CLAMP_EPS, max(-1 + CLAMP_EPS, r))
                        expect[c, z, y, x] = math.atanh(r)
        coarse = np.zeros((k, 2, 2, 2))
        for c in range(k):
            for z in range(2):
                for y in range(2):
                    for x in range(2):
                        block = expect[c, 2 * z : 2 * z + 2, 2 * y : 2 * y + 2, 2 * x : 2 * x + 2]
                        coarse[c, z, y, x] = block.mean()

        img = fc_image(vol, icns, downsample=(2, 2, 2))
        np.testing.assert_allclose(img.data, coarse, atol=1e-6)

    def test_out_of_mask_voxels_are_zero(self):
        grid = (4, 4, 4)
        mask = np.ones(grid, dtype=bool)
        mask[0, 0, 0] = False
        icns = make_icns(2, 40, grid, seed=5, mask=mask)
        vol = np.random.default_rng(6).standard_normal((40, *grid))
        img = fc_image(vol, icns)
        assert img.data[0, 0, 0, 0] == 0.0
        assert img.data[1, 0, 0, 0] == 0.0

    def test_zero_variance_voxel_is_zero(self):
        grid = (4, 4, 4)
        icns = make_icns(2, 40, grid, seed=7)
        vol = np.random.default_rng(8).standard_normal((40, *grid))
        vol[:, 1, 1, 1] = 4.2
        img = fc_image(vol, icns)
        assert img.data[0, 1, 1, 1] == 0.0

    def test_affine_rescaling_invariance(self):
        grid = (4, 4, 4)
        icns = make_icns(2, 40, grid, seed=9)
        vol = np.random.default_rng(10).standard_normal((40, *grid))
        a = fc_image(vol, icns)
        b = fc_image(3.7 * vol + 11.0, icns)
        np.testing.assert_allclose(a.data, b.data, atol=1e-5)

    def test_non_dividing_grid_zero_padded(self):
        grid = (3, 3, 3)
        icns = make_icns(1, 30, grid, seed=11)
        vol = np.random.default_rng(12).standard_normal((30, *grid))
        img = fc_image(vol, icns, downsample=(2, 2, 2))
        assert img.grid == (2, 2, 2)
        full = fc_image(vol, icns).data
        # corner block is a single real voxel plus 7 padded zeros
        assert img.data[0, 1, 1, 1] == pytest.approx(full[0, 2, 2, 2] / 8.0, rel=1e-5)

    def test_all_values_finite_and_bounded(self):
        grid = (4, 4, 4)
        icns = make_icns(3, 30, grid, seed=13)
        vol = np.random.default_rng(14).standard_normal((30, *grid))
        vol[:, 2, 2, 2] = icns.timecourses[1]  # saturated correlation
        img = fc_image(vol, icns)
        assert np.all(np.isfinite(img.data))
        assert np.all(np.abs(img.data) <= math.atanh(1 - CLAMP_EPS) + 1e-6)


class TestInterIcnFC:
    def test_pair_count_for_56(self):
        icns = make_icns(56, 60, (4, 4, 4), seed=0)
        assert inter_icn_fc(icns).shape == (1540,)

    def test_two_components(self):
        icns = make_icns(2, 40, (4, 4, 4), seed=1)
        vec = inter_icn_fc(icns)
        assert vec.shape == (1,)
        expect = fisher_z(pearson(icns.timecourses[0], icns.timecourses[1]))
        assert vec[0] == pytest.approx(expect, abs=1e-12)

    def test_duplicated_timecourses_clamp(self):
        icns = make_icns(2, 40, (4, 4, 4), seed=2)
        icns.timecourses[1] = icns.timecourses[0]
        vec = inter_icn_fc(icns)
        assert vec[0] == pytest.approx(math.atanh(1 - CLAMP_EPS), rel=1e-12)

    def test_lexicographic_order(self):
        icns = make_icns(3, 40, (4, 4, 4), seed=3)
        vec = inter_icn_fc(icns)
        tc = icns.timecourses
        expect = [
            fisher_z(pearson(tc[0], tc[1])),
            fisher_z(pearson(tc[0], tc[2])),
            fisher_z(pearson(tc[1], tc[2])),
        ]
        np.testing.assert_allclose(vec, expect, atol=1e-12)

    def test_single_component_rejected(self):
        icns = make_icns(1, 40, (4, 4, 4), seed=4)
        with pytest.raises(ValueError):
            inter_icn_fc(icns)


def test_permuting_components_permutes_channels_and_pairs():
    grid = (4, 4, 4)
    icns = make_icns(3, 40, grid, seed=20)
    vol = np.random.default_rng(21).standard_normal((40, *grid))
    perm = [2, 0, 1]
    permuted = ICNSet(
        spatial=icns.spatial[perm],
        timecourses=icns.timecourses[perm],
        mask=icns.mask,
    )
    img = fc_image(vol, icns)
    img_p = fc_image(vol, permuted)
    np.testing.assert_allclose(img_p.data, img.data[perm], atol=1e-7)

    vec = inter_icn_fc(icns)
    vec_p = inter_icn_fc(permuted)
    # pair (i,j) of the permuted set is pair (perm[i], perm[j]) of the original
    def pair_index(i, j, k=3):
        i, j = min(i, j), max(i, j)
        return i * k - i * (i + 1) // 2 + (j - i - 1)

    for i in range(3):
        for j in range(i + 1, 3):
            assert vec_p[pair_index(i, j)] == pytest.approx(
                vec[pair_index(perm[i], perm[j])], abs=1e-12
            )

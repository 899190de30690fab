import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slidekit.errors import CropTooLarge, ExtractionTooLarge
from slidekit.slide_pipeline import (
    PatchGrid,
    SlideRaster,
    TissueMask,
    bilinear_resize_array,
    center_crop,
    compute_tissue_mask,
    extract_patches,
    mpp_histogram,
    otsu_threshold,
    plan_patch_grid,
    resize_bilinear,
    round_half_away,
    tissue_fraction,
)
from slidekit.stain_norm import RgbPatch

PINK = np.array([230, 120, 160], dtype=np.uint8)


def otsu_oracle(hist):
    """Exhaustive search over all 256 thresholds (low class = values <= t)."""
    hist = np.asarray(hist, dtype=np.float64)
    levels = np.arange(256.0)
    best_t, best_v = None, -np.inf
    for t in range(256):
        w0 = hist[: t + 1].sum()
        w1 = hist[t + 1:].sum()
        if w0 == 0 or w1 == 0:
            continue
        mu0 = (hist[: t + 1] * levels[: t + 1]).sum() / w0
        mu1 = (hist[t + 1:] * levels[t + 1:]).sum() / w1
        v = w0 * w1 * (mu0 - mu1) ** 2
        if v > best_v:
            best_v, best_t = v, t
    return best_t


def make_slide(h=256, w=256, mpp=0.5):
    return SlideRaster(pixels=np.full((h, w, 3), 255, dtype=np.uint8), mpp=mpp)


class TestOtsu:
    def test_single_bin_degenerate(self):
        hist = np.zeros(256)
        hist[7] = 123
        assert otsu_threshold(hist) == 7

    def test_bimodal_matches_oracle(self):
        hist = np.zeros(256)
        hist[20] = 1000
        hist[200] = 1000
        t = otsu_threshold(hist)
        assert 20 <= t <= 199
        assert t == otsu_oracle(hist)

    def test_shift_invariance(self):
        hist = np.zeros(256)
        hist[30:40] = 50
        hist[90:110] = 80
        t = otsu_threshold(hist)
        shifted = np.zeros(256)
        shifted[35:45] = 50
        shifted[95:115] = 80
        assert otsu_threshold(shifted) == t + 5

    def test_matches_exhaustive_oracle_on_100_random_histograms(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            hist = rng.integers(0, 50, size=256).astype(float)
            if hist.sum() == 0:
                hist[rng.integers(0, 256)] = 1
            assert otsu_threshold(hist) == otsu_oracle(hist)

    def test_empty_histogram_rejected(self):
        with pytest.raises(ValueError):
            otsu_threshold(np.zeros(256))


class TestTissueMask:
    def test_pure_white_slide_empty_mask(self):
        mask = compute_tissue_mask(make_slide())
        assert not mask.bits.any()

    def test_pink_rectangle_iou(self):
        px = np.full((800, 800, 3), 255, dtype=np.uint8)
        px[100:500, 200:600] = PINK
        slide = SlideRaster(pixels=px, mpp=0.5)
        mask = compute_tissue_mask(slide)
        ds = mask.downsample
        truth = np.zeros_like(mask.bits)
        yy, xx = np.mgrid[0: mask.bits.shape[0], 0: mask.bits.shape[1]]
        truth = ((yy * ds >= 100) & (yy * ds < 500)
                 & (xx * ds >= 200) & (xx * ds < 600))
        inter = (mask.bits & truth).sum()
        union = (mask.bits | truth).sum()
        assert inter / union >= 0.95

    def test_area_filter_drops_small_blob(self):
        px = np.full((800, 800, 3), 255, dtype=np.uint8)
        px[64:320, 64:320] = PINK       # 16x16 mask px: survives
        px[640:672, 640:672] = PINK     # 2x2 mask px: dropped
        slide = SlideRaster(pixels=px, mpp=0.5)
        mask = compute_tissue_mask(slide, median_radius=0, min_region_area=16)
        assert mask.bits[8, 8]
        assert not mask.bits[40:, 40:].any()

    def test_tissue_fraction_full_and_empty(self):
        bits = np.zeros((10, 10), dtype=bool)
        bits[:5, :] = True
        mask = TissueMask(bits=bits, downsample=16)
        assert tissue_fraction(mask, 0, 0, 80) == 1.0
        assert tissue_fraction(mask, 0, 80, 80) == 0.0
        assert tissue_fraction(mask, 0, 0, 160) == 0.5


class TestPatchGrid:
    @pytest.mark.parametrize("mpp,expect", [(0.25, 512), (0.5, 256), (1.0, 128)])
    def test_extraction_size_for_256_at_half_mpp(self, mpp, expect):
        slide = make_slide(1024, 1024, mpp=mpp)
        mask = TissueMask(bits=np.ones((64, 64), dtype=bool), downsample=16)
        grid = plan_patch_grid(slide, 0.5, 256, mask)
        assert grid.extraction_size == expect

    def test_round_half_away(self):
        assert round_half_away(2.5) == 3
        assert round_half_away(3.5) == 4
        assert round_half_away(-2.5) == -3
        assert round_half_away(0.0) == 0

    def test_grid_is_non_overlapping_and_inside(self):
        slide = make_slide(300, 500, mpp=0.5)
        mask = TissueMask(bits=np.ones((19, 32), dtype=bool), downsample=16)
        grid = plan_patch_grid(slide, 0.5, 100, mask, min_tissue_fraction=0.0)
        s = grid.extraction_size
        assert s == 100
        seen = set()
        for x, y in grid.coords:
            assert x + s <= slide.width and y + s <= slide.height
            cells = {(i, j) for i in range(x, x + s) for j in range(y, y + s)
                     if i % 100 == 0 and j % 100 == 0}
            assert not cells & seen
            seen |= cells
        assert len(grid.coords) == 3 * 5

    def test_tissue_threshold_enforced(self):
        slide = make_slide(320, 320, mpp=0.5)
        bits = np.zeros((20, 20), dtype=bool)
        bits[:10, :] = True  # top half tissue
        mask = TissueMask(bits=bits, downsample=16)
        grid = plan_patch_grid(slide, 0.5, 160, mask, min_tissue_fraction=0.5)
        for x, y in grid.coords:
            assert tissue_fraction(mask, x, y, grid.extraction_size) >= 0.5
        assert grid.coords == ((0, 0), (160, 0))

    def test_extraction_too_large(self):
        slide = make_slide(100, 100, mpp=0.25)
        mask = TissueMask(bits=np.ones((7, 7), dtype=bool), downsample=16)
        with pytest.raises(ExtractionTooLarge):
            plan_patch_grid(slide, 0.5, 256, mask)


class TestExtractPatches:
    def test_full_slide_single_patch(self):
        rng = np.random.default_rng(3)
        px = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
        slide = SlideRaster(pixels=px, mpp=0.5)
        grid = PatchGrid(extraction_size=64, coords=((0, 0),),
                         target_mpp=0.5, target_size=64, min_tissue_fraction=0.0)
        (patch,) = extract_patches(slide, grid)
        assert np.array_equal(patch.pixels, px)
        assert patch.mpp == 0.5

    def test_matches_naive_crop_oracle(self):
        rng = np.random.default_rng(4)
        px = rng.integers(0, 256, size=(96, 128, 3), dtype=np.uint8)
        slide = SlideRaster(pixels=px, mpp=0.25)
        coords = ((0, 0), (32, 0), (64, 32))
        grid = PatchGrid(extraction_size=32, coords=coords, target_mpp=0.5,
                         target_size=16, min_tissue_fraction=0.0)
        patches = extract_patches(slide, grid)
        for (x, y), patch in zip(coords, patches):
            oracle = np.empty((32, 32, 3), dtype=np.uint8)
            for r in range(32):
                for c in range(32):
                    oracle[r, c] = px[y + r, x + c]
            assert np.array_equal(patch.pixels, oracle)

    def test_out_of_bounds_coordinate_rejected(self):
        slide = make_slide(64, 64)
        grid = PatchGrid(extraction_size=32, coords=((40, 0),),
                         target_mpp=0.5, target_size=32, min_tissue_fraction=0.0)
        with pytest.raises(ValueError):
            extract_patches(slide, grid)


class TestResize:
    def test_identity_dims(self):
        rng = np.random.default_rng(5)
        px = rng.integers(0, 256, size=(16, 20, 3), dtype=np.uint8)
        out = resize_bilinear(RgbPatch(pixels=px, mpp=0.5), 20, 16)
        assert np.array_equal(out.pixels, px)

    @given(st.integers(0, 255), st.integers(1, 8), st.integers(1, 8))
    @settings(max_examples=30)
    def test_constant_image_stays_constant(self, value, out_h, out_w):
        px = np.full((6, 7, 3), value, dtype=np.uint8)
        out = resize_bilinear(RgbPatch(pixels=px), out_w, out_h)
        assert np.all(out.pixels == value)

    def test_matches_bilinear_oracle_on_checkerboard(self):
        board = np.indices((8, 8)).sum(axis=0) % 2 * 255.0
        got = bilinear_resize_array(board, 4, 4)
        oracle = np.empty((4, 4))
        for i in range(4):
            for j in range(4):
                y = min(max((i + 0.5) * 2 - 0.5, 0), 7)
                x = min(max((j + 0.5) * 2 - 0.5, 0), 7)
                y0, x0 = int(np.floor(y)), int(np.floor(x))
                y1, x1 = min(y0 + 1, 7), min(x0 + 1, 7)
                fy, fx = y - y0, x - x0
                oracle[i, j] = (board[y0, x0] * (1 - fy) * (1 - fx)
                                + board[y0, x1] * (1 - fy) * fx
                                + board[y1, x0] * fy * (1 - fx)
                                + board[y1, x1] * fy * fx)
        assert np.abs(got - oracle).max() < 1e-12

    def test_range_preserved(self):
        rng = np.random.default_rng(6)
        px = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        out = resize_bilinear(RgbPatch(pixels=px), 13, 9)
        assert out.pixels.min() >= 0 and out.pixels.max() <= 255

    def test_mpp_scales_with_width(self):
        px = np.zeros((512, 512, 3), dtype=np.uint8)
        out = resize_bilinear(RgbPatch(pixels=px, mpp=0.25), 256, 256)
        assert out.mpp == pytest.approx(0.5)


class TestCenterCrop:
    def test_256_to_224_offset(self):
        px = np.zeros((256, 256, 3), dtype=np.uint8)
        px[16, 16] = 99
        out = center_crop(RgbPatch(pixels=px), 224, 224)
        assert out.pixels.shape == (224, 224, 3)
        assert out.pixels[0, 0, 0] == 99

    def test_identity_when_same_size(self):
        rng = np.random.default_rng(7)
        px = rng.integers(0, 256, size=(10, 12, 3), dtype=np.uint8)
        out = center_crop(RgbPatch(pixels=px), 12, 10)
        assert np.array_equal(out.pixels, px)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(8)
        px = rng.integers(0, 256, size=(21, 17, 3), dtype=np.uint8)
        out = center_crop(RgbPatch(pixels=px), 8, 9)
        oy, ox = (21 - 9) // 2, (17 - 8) // 2
        assert np.array_equal(out.pixels, px[oy:oy + 9, ox:ox + 8])

    def test_too_large_raises(self):
        px = np.zeros((8, 8, 3), dtype=np.uint8)
        with pytest.raises(CropTooLarge):
            center_crop(RgbPatch(pixels=px), 9, 8)


class TestMppHistogram:
    def test_single_slide_single_bin(self):
        bins = mpp_histogram([(0.25, 10)])
        assert bins == [(0.25, 0.30000000000000004, 10)] or len(bins) == 1
        assert bins[0][2] == 10

    def test_two_slides_two_bins(self):
        bins = mpp_histogram([(0.25, 10), (0.5, 4)])
        assert len(bins) == 2
        assert [b[2] for b in bins] == [10, 4]

    def test_counts_conserved(self):
        rng = np.random.default_rng(9)
        stats = [(float(rng.uniform(0.1, 1.0)), int(rng.integers(1, 50)))
                 for _ in range(30)]
        bins = mpp_histogram(stats)
        assert sum(b[2] for b in bins) == sum(n for _, n in stats)

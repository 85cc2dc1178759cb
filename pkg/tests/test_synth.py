import numpy as np
import pytest
from shapely.geometry import Point, Polygon

from textscrub.synth import (
    TextInstance,
    compose_partial_gt,
    dilate_mask,
    fill_polygons,
    make_scene,
    make_triplet,
    rasterize_mask,
    render_scene,
    select_instances,
)


def scanline_oracle(polygons, h, w):
    """Independent fill: shapely covers() per pixel center."""
    mask = np.zeros((h, w), dtype=np.uint8)
    for poly in polygons:
        shape = Polygon(poly)
        for y in range(h):
            for x in range(w):
                if shape.covers(Point(x, y)):
                    mask[y, x] = 1
    return mask


class TestFillPolygons:
    def test_axis_aligned_square_inclusive(self):
        mask = fill_polygons([[(0, 0), (3, 0), (3, 3), (0, 3)]], 8, 8)
        assert int(mask.sum()) == 16
        assert mask[:4, :4].all()

    def test_empty_subset_is_all_zero(self):
        assert fill_polygons([], 5, 7).sum() == 0

    def test_two_disjoint_rectangles(self):
        polys = [
            [(0, 0), (2, 0), (2, 1), (0, 1)],  # 3x2 pixel centers = 6
            [(4, 3), (7, 3), (7, 4), (4, 4)],  # 4x2 pixel centers = 8
        ]
        assert int(fill_polygons(polys, 10, 10).sum()) == 14

    def test_matches_shapely_oracle_on_random_quads(self, rng):
        for _ in range(10):
            cx, cy = rng.uniform(4, 12, size=2)
            w, h = rng.uniform(2, 6, size=2)
            theta = rng.uniform(0, np.pi)
            c, s = np.cos(theta), np.sin(theta)
            poly = [
                (cx + c * dx - s * dy, cy + s * dx + c * dy)
                for dx, dy in [(-w, -h), (w, -h), (w, h), (-w, h)]
            ]
            ours = fill_polygons([poly], 18, 18)
            oracle = scanline_oracle([poly], 18, 18)
            assert np.array_equal(ours, oracle)

    def test_output_is_binary(self, rng):
        poly = [(1.2, 0.7), (9.4, 2.1), (7.7, 8.8), (0.4, 6.0)]
        mask = fill_polygons([poly], 12, 12)
        assert set(np.unique(mask)) <= {0, 1}

    def test_rejects_degenerate_polygon(self):
        with pytest.raises(ValueError):
            fill_polygons([[(0, 0), (1, 1)]], 4, 4)


class TestSelectInstances:
    def _instances(self, n):
        return [TextInstance(id=i, polygon=[(0, 0), (1, 0), (1, 1)], text="x") for i in range(n)]

    def test_alpha_zero_selects_all(self):
        insts = self._instances(50)
        assert select_instances(insts, 0.0, seed=1) == {i.id for i in insts}

    def test_alpha_one_selects_none(self):
        assert select_instances(self._instances(50), 1.0, seed=1) == set()

    def test_keep_rate_matches_one_minus_alpha(self):
        insts = self._instances(10_000)
        rate = len(select_instances(insts, 0.4, seed=7)) / 10_000
        assert 0.58 <= rate <= 0.62

    def test_deterministic_per_seed(self):
        insts = self._instances(100)
        assert select_instances(insts, 0.5, seed=3) == select_instances(insts, 0.5, seed=3)
        assert select_instances(insts, 0.5, seed=3) != select_instances(insts, 0.5, seed=4)

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            select_instances(self._instances(3), 1.5, seed=0)


class TestRenderScene:
    def test_full_render_contains_every_instance(self):
        scene = make_scene(64, 64, seed=11, min_instances=2, max_instances=3)
        img = render_scene(scene, {i.id for i in scene.instances})
        for inst in scene.instances:
            region = rasterize_mask([inst], 64, 64) > 0
            assert np.any(img[region] != scene.background[region])

    def test_empty_include_is_background(self):
        scene = make_scene(40, 40, seed=2)
        assert np.array_equal(render_scene(scene, set()), scene.background)

    def test_single_instance_render_is_local(self):
        scene = make_scene(128, 128, seed=11, min_instances=3, max_instances=3)
        assert len(scene.instances) == 3
        target = scene.instances[2]
        img = render_scene(scene, {target.id})
        diff = np.any(img != scene.background, axis=2)
        region = rasterize_mask([target], 128, 128) > 0
        assert diff.any()
        assert not np.any(diff & ~region)

    def test_unknown_id_rejected(self):
        scene = make_scene(32, 32, seed=0)
        with pytest.raises(ValueError, match="unknown"):
            render_scene(scene, {999})

    def test_deterministic(self):
        scene = make_scene(48, 48, seed=9)
        ids = {i.id for i in scene.instances}
        assert np.array_equal(render_scene(scene, ids), render_scene(scene, ids))

    def test_polygons_within_bounds(self):
        scene = make_scene(56, 72, seed=21, min_instances=3, max_instances=4)
        for inst in scene.instances:
            xs = [p[0] for p in inst.polygon]
            ys = [p[1] for p in inst.polygon]
            assert min(xs) >= 0 and max(xs) <= 71
            assert min(ys) >= 0 and max(ys) <= 55

    def test_instances_pairwise_disjoint(self):
        scene = make_scene(72, 72, seed=31, min_instances=3, max_instances=4)
        total = np.zeros((72, 72), dtype=np.int64)
        for inst in scene.instances:
            total += rasterize_mask([inst], 72, 72)
        assert total.max() <= 1


class TestMakeTriplet:
    def test_alpha_one_noop_sample(self):
        scene = make_scene(48, 48, seed=4)
        t = make_triplet(scene, alpha=1.0, seed=5)
        assert t.mask.sum() == 0
        assert np.array_equal(t.gt, t.image)

    def test_alpha_zero_removes_everything(self):
        scene = make_scene(48, 48, seed=4)
        t = make_triplet(scene, alpha=0.0, seed=5)
        assert np.array_equal(t.gt, scene.background)
        union = rasterize_mask(scene.instances, 48, 48)
        assert np.array_equal(t.mask, union)

    def test_gt_differs_only_inside_mask(self):
        for seed in (3, 8, 13):
            scene = make_scene(64, 64, seed=seed, min_instances=2, max_instances=4)
            t = make_triplet(scene, alpha=0.4, seed=seed * 7 + 1)
            diff = np.any(t.image != t.gt, axis=2)
            assert not np.any(diff & (t.mask == 0))

    def test_bit_reproducible(self):
        a = make_triplet(make_scene(40, 40, seed=6), alpha=0.4, seed=77)
        b = make_triplet(make_scene(40, 40, seed=6), alpha=0.4, seed=77)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.gt, b.gt)
        assert np.array_equal(a.preserved_mask, b.preserved_mask)

    def test_gt_equals_image_outside_all_instances(self):
        scene = make_scene(56, 56, seed=12, min_instances=2, max_instances=3)
        t = make_triplet(scene, alpha=0.5, seed=3)
        union = rasterize_mask(scene.instances, 56, 56) > 0
        outside = ~union
        assert np.array_equal(t.image[outside], t.gt[outside])
        assert np.array_equal(t.image[outside], scene.background[outside])

    def test_mask_and_preserved_partition_instances(self):
        scene = make_scene(64, 64, seed=19, min_instances=3, max_instances=4)
        t = make_triplet(scene, alpha=0.5, seed=8)
        union = rasterize_mask(scene.instances, 64, 64)
        assert np.array_equal((t.mask | t.preserved_mask), union)
        assert not np.any(t.mask & t.preserved_mask)


class TestComposePartialGt:
    def test_all_zero_mask_keeps_image(self, rng):
        image = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        gt = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        out = compose_partial_gt(image, gt, np.zeros((8, 8), np.uint8))
        assert np.array_equal(out, image)

    def test_all_one_mask_keeps_gt(self, rng):
        image = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        gt = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        out = compose_partial_gt(image, gt, np.ones((8, 8), np.uint8))
        assert np.array_equal(out, gt)

    def test_checkerboard_selects_per_pixel(self, rng):
        image = rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)
        gt = rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)
        mask = np.indices((6, 6)).sum(axis=0) % 2
        out = compose_partial_gt(image, gt, mask.astype(np.uint8))
        for y in range(6):
            for x in range(6):
                expected = gt[y, x] if mask[y, x] else image[y, x]
                assert np.array_equal(out[y, x], expected)

    def test_shape_mismatch_rejected(self, rng):
        image = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        with pytest.raises(ValueError):
            compose_partial_gt(image, image[:4], np.zeros((8, 8), np.uint8))


def test_dilate_mask_grows_by_radius():
    mask = np.zeros((9, 9), dtype=np.uint8)
    mask[4, 4] = 1
    grown = dilate_mask(mask, 2)
    assert grown[2:7, 2:7].all()
    assert grown.sum() == 25

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelunc.dataio import crop_object_points, parse_labels, read_points
from labelunc.geometry import BoxBev, nearest_surface_points
from labelunc.synthscene import (
    NoiseSpec,
    PlacementSpec,
    SceneConfig,
    generate_scene,
    inject_label_noise,
    noise_study,
    occlusion_level,
    place_objects,
    study_objects,
    write_scene,
)


def _scan(*boxes, noise=0.0, seed=0):
    return generate_scene(SceneConfig(objects=list(boxes), range_noise=noise, seed=seed))


class TestVisibility:
    def test_frontal_box_near_edge_only(self):
        box = BoxBev(0.0, 20.0, 4.5, 1.8, math.pi / 2)  # length along the line of sight
        pts = _scan(box).points[0]
        assert len(pts) > 10
        np.testing.assert_allclose(pts[:, 1], 20.0 - 2.25, atol=1e-9)
        assert np.all(np.abs(pts[:, 0]) <= 0.9 + 1e-9)

    def test_oblique_box_l_shape(self):
        box = BoxBev(0.0, 15.0, 4.5, 1.8, math.pi / 4)
        pts = _scan(box).points[0]
        edges = nearest_surface_points(pts, box, 1).edge[:, 0]
        counts = np.bincount(edges, minlength=4)
        assert np.sum(counts > 2) == 2

    def test_full_occlusion(self):
        front = BoxBev(0.0, 10.0, 4.5, 4.5, 0.0)
        back = BoxBev(0.0, 25.0, 4.5, 1.8, 0.0)
        sc = _scan(front, back)
        assert sc.num_points[1] == 0
        assert sc.occlusion[1] == 1.0
        assert occlusion_level(sc.occlusion[1]) == 2

    def test_partial_occlusion(self):
        front = BoxBev(1.5, 10.0, 2.0, 2.0, 0.0)
        back = BoxBev(0.0, 25.0, 4.5, 1.8, 0.0)
        sc = _scan(front, back)
        assert 0 < sc.occlusion[1] < 1
        assert sc.occlusion[0] == 0.0

    @settings(max_examples=10)
    @given(st.integers(0, 10_000))
    def test_points_near_surface(self, seed):
        noise = 0.05
        sc = generate_scene(SceneConfig(range_noise=noise, seed=seed, placement=PlacementSpec(count=6)))
        for box, pts in zip(sc.boxes, sc.points):
            if len(pts):
                d = nearest_surface_points(pts, box, 1).distance[:, 0]
                assert np.all(d <= 5 * noise)

    def test_noise_is_along_the_beam(self):
        box = BoxBev(0.0, 20.0, 4.5, 1.8, math.pi / 2)
        clean, noisy = _scan(box).points[0], _scan(box, noise=0.1, seed=5).points[0]
        np.testing.assert_allclose(np.arctan2(noisy[:, 0], noisy[:, 1]), np.arctan2(clean[:, 0], clean[:, 1]), atol=1e-12)
        resid = np.linalg.norm(noisy, axis=1) - np.linalg.norm(clean, axis=1)
        assert np.std(resid) == pytest.approx(0.1, rel=0.25)


class TestDeterminism:
    def test_same_seed_same_scene(self):
        a = generate_scene(SceneConfig(seed=4))
        b = generate_scene(SceneConfig(seed=4))
        assert a.boxes == b.boxes
        for p, q in zip(a.points, b.points):
            np.testing.assert_array_equal(p, q)

    def test_seeds_decorrelate(self):
        counts = [generate_scene(SceneConfig(seed=s)).num_points for s in range(20)]
        n = min(len(c) for c in counts)
        corr = [np.corrcoef(counts[i][:n], counts[i + 1][:n])[0, 1] for i in range(19)]
        assert np.nanmean(corr) < 0.2

    def test_placement_respects_band(self):
        spec = PlacementSpec(count=20, distance=(10, 30))
        boxes = place_objects(spec, (0, 0), np.random.default_rng(0))
        d = np.array([math.hypot(b.c1, b.c2) for b in boxes])
        assert np.all((d >= 10) & (d <= 30))
        assert np.all(np.array([b.c2 for b in boxes]) > 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SceneConfig(angular_res=0.0)
        with pytest.raises(ValueError):
            SceneConfig(range_noise=-0.1)


class TestLabelNoise:
    BOXES = [BoxBev(0, 10, 4.5, 1.8, 0.2), BoxBev(3, 20, 4.0, 1.7, -1.0)]

    def test_level_zero_identity(self):
        assert inject_label_noise(self.BOXES, NoiseSpec(), 0) == self.BOXES

    def test_empirical_std(self):
        spec = NoiseSpec(levels=(0.0, 0.1), seed=3)
        base = [BoxBev(0, 0, 4.5, 1.8, 0)] * 10_000
        noisy = np.array([b.as_array() for b in inject_label_noise(base, spec, 1)])
        stds = noisy[:, :4].std(axis=0)
        np.testing.assert_allclose(stds, 0.1, rtol=0.03)
        np.testing.assert_array_equal(noisy[:, 4], 0.0)

    def test_clamped_extents(self):
        spec = NoiseSpec(levels=(0.0, 1.0), min_extent=0.5)
        base = [BoxBev(0, 0, 0.6, 0.6, 0)] * 2000
        noisy = inject_label_noise(base, spec, 1)
        assert min(min(b.l, b.w) for b in noisy) >= 0.5

    def test_deterministic_per_seed_and_stream(self):
        spec = NoiseSpec(seed=9)
        assert inject_label_noise(self.BOXES, spec, 2, 5) == inject_label_noise(self.BOXES, spec, 2, 5)
        assert inject_label_noise(self.BOXES, spec, 2, 5) != inject_label_noise(self.BOXES, spec, 2, 6)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            NoiseSpec(levels=(0.0, 2.0))
        with pytest.raises(ValueError):
            NoiseSpec(weights=(1.0, 1.0))
        with pytest.raises(IndexError):
            inject_label_noise(self.BOXES, NoiseSpec(), 5)


class TestNoiseStudy:
    def test_small_study(self):
        cfg = SceneConfig(placement=PlacementSpec(count=4, distance=(5, 25)), seed=2)
        res = noise_study(cfg, NoiseSpec(levels=(0.0, 0.5, 1.0)), scenes=2)
        assert res.mean_normalized[0] == 1.0
        assert res.mean_normalized[2] < res.mean_normalized[0]
        pts, _, dropped = study_objects(cfg, 2)
        assert res.num_objects + res.excluded == len(pts) + dropped
        lines = res.to_csv().splitlines()
        assert lines[0] == "level,std_m,mean_normalized_jiou_gt,num_objects"
        assert lines[1].startswith("0,0.0,1.0,")


class TestWriteScene:
    def test_consumable_by_dataio(self, tmp_path):
        sc = generate_scene(SceneConfig(placement=PlacementSpec(count=5), seed=1))
        write_scene(sc, tmp_path, "000000")
        entries = parse_labels(tmp_path / "label_2" / "000000.txt")
        assert len(entries) == len(sc.boxes)
        frame = read_points(tmp_path / "velodyne" / "000000.bin")
        assert len(frame) == sc.num_points.sum()
        for e, box, pts in zip(entries, sc.boxes, sc.points):
            np.testing.assert_allclose(e.box.as_array(), box.as_array(), atol=1e-12)
            if len(pts):
                crop = crop_object_points(frame, e.box, margin=0.1)
                assert len(crop) >= len(pts)

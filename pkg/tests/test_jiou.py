import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from labelunc.geometry import BoxBev, rotated_iou
from labelunc.jiou import (
    JIOU_GT,
    UndefinedRatioError,
    is_deterministic,
    jiou,
    jiou_any,
    jiou_det,
    jiou_gt,
    jiou_ratio,
    label_distribution,
    prob_jaccard,
    prob_jaccard_bruteforce,
)
from labelunc.labelvb import LabelPosterior, PriorSpec, VbConfig, infer_posterior, prior_phi_covariance
from labelunc.spatialdist import (
    DiscreteSampler,
    GridMismatchError,
    GridSpec,
    spatial_pdq,
    spatial_pg,
    spatial_pg_discrete,
    uniform_box_grid,
)
from conftest import edge_points

masses = hnp.arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 1))


class TestProbJaccard:
    def test_identical(self):
        p = np.array([0.1, 0.2, 0.7])
        assert prob_jaccard(p, p) == pytest.approx(1.0)

    def test_single_shared_cell(self):
        assert prob_jaccard([0.5, 0.5, 0], [0, 0.5, 0.5]) == pytest.approx(1 / 3)

    def test_hand_value(self):
        # 1/5 + 3/13 + 1/5 by direct evaluation of the definition
        assert prob_jaccard([0.2, 0.3, 0.5], [0.5, 0.3, 0.2]) == pytest.approx(41 / 65, abs=1e-15)

    def test_disjoint(self):
        assert prob_jaccard([1, 0], [0, 1]) == 0.0

    def test_renormalizes(self):
        assert prob_jaccard([1, 1, 0], [0, 2, 2]) == pytest.approx(1 / 3)

    def test_uniform_sets_reduce_to_iou(self):
        a = np.array([1, 1, 1, 1, 0, 0], float)
        b = np.array([0, 0, 1, 1, 1, 0], float)
        assert prob_jaccard(a, b) == pytest.approx(2 / 5)

    @pytest.mark.parametrize("p,q", [([1, 1], [1, 1, 1]), ([-1, 2], [1, 1]), ([0, 0], [1, 1])])
    def test_invalid(self, p, q):
        with pytest.raises(ValueError):
            prob_jaccard(p, q)

    def test_fast_equals_bruteforce(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 201))
            p = rng.uniform(0, 1, n) * (rng.uniform(size=n) > 0.3)
            q = rng.uniform(0, 1, n) * (rng.uniform(size=n) > 0.3)
            p[0] += 0.1
            q[-1] += 0.1
            assert abs(prob_jaccard(p, q) - prob_jaccard_bruteforce(p, q)) <= 1e-12

    def test_ties_in_ratio(self):
        p = np.array([0.1, 0.2, 0.3, 0.4])
        q = np.array([0.2, 0.4, 0.15, 0.25])  # two pairs of equal ratios
        assert prob_jaccard(p, q) == pytest.approx(prob_jaccard_bruteforce(p, q), abs=1e-14)

    @given(masses, st.data())
    def test_properties(self, p, data):
        q = data.draw(hnp.arrays(np.float64, len(p), elements=st.floats(0, 1)))
        if p.sum() < 1e-6 or q.sum() < 1e-6:
            return
        v = prob_jaccard(p, q)
        assert 0.0 <= v <= 1.0 + 1e-12
        assert v == pytest.approx(prob_jaccard(q, p), abs=1e-12)
        assert v == pytest.approx(prob_jaccard(3.0 * p, q), abs=1e-12)
        assert v == pytest.approx(prob_jaccard_bruteforce(p, q), abs=1e-12)


class TestJiouOnGrids:
    def test_identical_boxes(self):
        spec = GridSpec.covering(-2, -2, 2, 2, 0.05)
        g = uniform_box_grid(BoxBev(0, 0, 2, 2, 0.3), spec)
        assert jiou(g, g).value == pytest.approx(1.0)

    def test_half_shift_matches_iou(self):
        spec = GridSpec.covering(-2, -2, 3, 2, 0.05)
        a = uniform_box_grid(BoxBev(0, 0, 2, 2, 0), spec)
        b = uniform_box_grid(BoxBev(1, 0, 2, 2, 0), spec)
        assert jiou(a, b).value == pytest.approx(1 / 3, abs=0.02)

    def test_grid_mismatch(self):
        a = uniform_box_grid(BoxBev(0, 0, 2, 2, 0), GridSpec.covering(-2, -2, 2, 2, 0.1))
        b = uniform_box_grid(BoxBev(0, 0, 2, 2, 0), GridSpec.covering(-3, -2, 2, 2, 0.1))
        with pytest.raises(GridMismatchError):
            jiou(a, b)
        assert jiou_any(a, b).value == pytest.approx(1.0)

    @settings(max_examples=30)
    @given(st.integers(0, 2**32 - 1))
    def test_uniform_grids_track_iou(self, seed):
        # independent vehicle-sized pairs; near-coincident pairs alias along edges
        rng = np.random.default_rng(seed)
        a, b = (
            BoxBev(*rng.uniform(-1, 1, 2), rng.uniform(2.5, 5.5), rng.uniform(1.4, 2.4), rng.uniform(-math.pi, math.pi))
            for _ in range(2)
        )
        spec = GridSpec.covering(-4.5, -4.5, 4.5, 4.5, 0.05)
        ga, gb = uniform_box_grid(a, spec), uniform_box_grid(b, spec)
        v = prob_jaccard(ga.values, gb.values) if np.any((ga.values > 0) & (gb.values > 0)) else 0.0
        assert v == pytest.approx(rotated_iou(a, b), abs=0.02)

    def test_two_box_label(self):
        small, big = BoxBev(-3, 0, 1, 1, 0), BoxBev(2, 0, 3, 3, 0)
        spec = GridSpec.covering(-4, -2, 4, 2, 0.05)
        pred = uniform_box_grid(small, spec)
        pg = spatial_pg_discrete([small, big], [0.5, 0.5], spec)
        assert jiou(pred, pg).value == pytest.approx(0.5, abs=0.02)
        pdq = spatial_pdq(DiscreteSampler([small, big], [0.5, 0.5]), spec, draws=4000, seed=1)
        inside = pdq.values > 0
        np.testing.assert_allclose(pdq.values[inside], 0.5, atol=0.05)
        # the membership field read as a density spreads mass by area: 1 / (1 + 9)
        assert prob_jaccard(pred.values, pdq.values) == pytest.approx(0.1, abs=0.01)

    def test_shift_ray_monotone(self):
        label = BoxBev(0, 0, 4, 2, 0)
        post = infer_posterior(edge_points(label, (2, 3), 10), label, cfg=VbConfig(sigma_mode="fixed", sigma=0.1))
        spec = GridSpec.covering(-7, -5, 7, 5, 0.1)
        pg = spatial_pg(post, spec)
        for direction in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            vals = []
            for t in np.arange(0, 3.01, 0.25):
                d = BoxBev(t * direction[0], t * direction[1], 4, 2, 0)
                g = uniform_box_grid(d, spec)
                vals.append(prob_jaccard(g.values, pg.values) if np.any((g.values > 0) & (pg.values > 0)) else 0.0)
            assert np.all(np.diff(vals) <= 1e-12), (direction, vals)


class TestJiouGt:
    LABEL = BoxBev(1, 10, 4.5, 1.8, 0.2)

    def test_delta_posterior(self):
        post = LabelPosterior.delta(self.LABEL)
        assert is_deterministic(post)
        v = jiou_gt(self.LABEL, post, resolution=0.05)
        assert v.kind == JIOU_GT
        assert v.value == pytest.approx(1.0)

    def test_near_delta_posterior(self):
        post = LabelPosterior.from_feature_cov(self.LABEL, 1e-8 * np.eye(6))
        assert not is_deterministic(post)
        assert jiou_gt(self.LABEL, post, resolution=0.05).value >= 0.95

    def test_weight_sweep(self):
        pts = edge_points(self.LABEL, (0, 1), 10)
        vals = [
            jiou_gt(self.LABEL, infer_posterior(pts, self.LABEL, PriorSpec(weight=w), VbConfig(sigma_mode="fixed"))).value
            for w in (0.1, 1.0, 10.0, 100.0)
        ]
        assert np.all(np.diff(vals) >= 0)

    def test_dense_near_beats_sparse_far(self):
        near = BoxBev(0, 8, 4.5, 1.8, 0.5)
        far = BoxBev(0, 40, 4.5, 1.8, 0.5)
        cfg = VbConfig(sigma_mode="fixed")
        p_near = infer_posterior(edge_points(near, (2, 3), 30), near, cfg=cfg)
        p_far = infer_posterior(edge_points(far, (2,), 4), far, cfg=cfg)
        assert jiou_gt(far, p_far).value < jiou_gt(near, p_near).value

    def test_label_mismatch(self):
        with pytest.raises(ValueError):
            jiou_gt(BoxBev(0, 0, 1, 1, 0), LabelPosterior.delta(self.LABEL))

    def test_label_distribution_switch(self):
        spec = GridSpec.covering(-3, 7, 5, 13, 0.1)
        g = label_distribution(LabelPosterior.delta(self.LABEL), spec)
        np.testing.assert_array_equal(g.values, uniform_box_grid(self.LABEL, spec).values)


class TestJiouRatio:
    LABEL = BoxBev(0, 12, 4.5, 1.8, 0.0)

    def _uncertain(self, weight=0.2):
        cov = prior_phi_covariance(PriorSpec(weight=weight), self.LABEL)
        return LabelPosterior.from_feature_cov(self.LABEL, cov)

    def test_same_box(self):
        post = self._uncertain()
        assert jiou_ratio(self.LABEL, post).value == pytest.approx(1.0)

    def test_uncertain_label_perfect_detection(self):
        post = self._uncertain(0.05)
        assert jiou_det(self.LABEL, post).value < 0.6
        assert jiou_ratio(self.LABEL, post).value == pytest.approx(1.0)

    def test_disjoint(self):
        post = self._uncertain(10.0)
        assert jiou_ratio(BoxBev(30, 12, 4.5, 1.8, 0), post).value == 0.0

    def test_clamped(self):
        post = self._uncertain()
        for dx in (0.1, 0.3, 0.6):
            v = jiou_ratio(BoxBev(dx, 12, 4.5, 1.8, 0), post).value
            assert 0.0 <= v <= 1.0

    def test_undefined(self):
        from labelunc.jiou import _clamp_ratio

        with pytest.raises(UndefinedRatioError):
            _clamp_ratio(0.2, 0.0)

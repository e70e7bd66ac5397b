import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelunc.geometry import BoxBev, feature_vector, points_in_box, rotation
from labelunc.labelvb import LabelPosterior, PriorSpec, VbConfig, infer_posterior, prior_phi_covariance
from labelunc.spatialdist import (
    MEMBERSHIP,
    CoverageError,
    DeltaSampler,
    DiscreteSampler,
    GaussianSampler,
    GridSpec,
    SpatialGrid,
    sampled_density_tv,
    corner_total_variance,
    default_grid,
    read_grid,
    read_pgm,
    resample,
    spatial_pdq,
    spatial_pg,
    spatial_pg_discrete,
    spatial_pg_sampled,
    total_variation,
    uniform_box_grid,
    union_grid,
    write_grid,
    write_pgm,
)
from conftest import edge_points

CAR = BoxBev(1.0, 12.0, 4.5, 1.8, 0.4)


def l_shape_posterior(box=CAR, sigma=0.1):
    pts = edge_points(box, (2, 3), 15)
    return infer_posterior(pts, box, cfg=VbConfig(sigma_mode="fixed", sigma=sigma))


def _centers(spec):
    X, Y = np.meshgrid(spec.xs, spec.ys, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


class TestGridSpec:
    def test_covering_is_aligned(self):
        g = GridSpec.covering(-1.03, 0.98, 2.01, 3.0, 0.1)
        assert g.origin == pytest.approx((-1.1, 0.9))
        assert (g.nx, g.ny) == (32, 21)

    @pytest.mark.parametrize("kw", [{"resolution": 0.0}, {"nx": 0}])
    def test_invalid(self, kw):
        args = {"origin": (0, 0), "resolution": 0.1, "nx": 2, "ny": 2, **kw}
        with pytest.raises(ValueError):
            GridSpec(**args)

    def test_union(self):
        a = GridSpec((0, 0), 0.1, 10, 10)
        b = GridSpec((0.5, -0.5), 0.05, 40, 10)
        u = union_grid(a, b)
        assert u.resolution == 0.05
        assert u.bounds == pytest.approx((0, -0.5, 2.5, 1.0))

    def test_resample_conserves_mass(self, rng):
        g = SpatialGrid(GridSpec((0, 0), 0.1, 8, 6), rng.uniform(0, 1, (8, 6)))
        for spec in (GridSpec((-0.5, -0.5), 0.05, 40, 40), GridSpec((-0.3, -0.2), 0.1, 20, 20)):
            assert resample(g, spec).total() == pytest.approx(g.total())


class TestUniformBox:
    def test_two_by_two(self):
        g = uniform_box_grid(BoxBev(0, 0, 2, 2, 0), GridSpec((-2, -2), 0.1, 40, 40))
        nz = g.values[g.values > 0]
        assert len(nz) == 400
        np.testing.assert_allclose(nz, 1 / 400)

    def test_rotated_sums_to_one(self):
        y = BoxBev(0.3, -0.2, 3, 1.4, 0.7)
        spec = default_grid(y, resolution=0.05)
        g = uniform_box_grid(y, spec)
        assert g.total() == pytest.approx(1.0)
        # support equals the center-in-box test
        inside = points_in_box(_centers(spec), y).reshape(spec.nx, spec.ny)
        np.testing.assert_array_equal(g.values > 0, inside)

    def test_outside(self):
        with pytest.raises(ValueError):
            uniform_box_grid(BoxBev(50, 50, 2, 2, 0), GridSpec((0, 0), 0.1, 10, 10))


class TestSpatialPg:
    def test_delta_is_uniform(self):
        y = BoxBev(0, 0, 2, 2, 0)
        g = spatial_pg(LabelPosterior.delta(y), default_grid(y, resolution=0.05))
        inside = points_in_box(_centers(g.spec), y).reshape(g.values.shape)
        dev = np.abs(g.values[inside] * inside.sum() - 1.0)
        assert dev.max() <= 0.03

    def test_delta_rotated_interior_uniform(self):
        y = BoxBev(0.2, 0.1, 3.0, 1.5, 0.6)
        g = spatial_pg(LabelPosterior.delta(y), default_grid(y, resolution=0.05))
        c = _centers(g.spec)
        inside = points_in_box(c, y).reshape(g.values.shape)
        inner = points_in_box(c, BoxBev(y.c1, y.c2, y.l - 0.2, y.w - 0.2, y.r)).reshape(g.values.shape)
        dev = np.abs(g.values[inner] * inside.sum() - 1.0)
        assert dev.max() <= 0.03

    def test_one_sided_observation(self):
        box = BoxBev(0, 0, 4.5, 1.8, 0)
        post = l_shape_posterior(box)  # rear (x = -2.25) and right (y = -0.9) edges observed
        g = spatial_pg(post)
        xs = g.spec.xs
        # mass spilling past the observed edge is much smaller than past the unobserved one
        near = g.values[xs < -2.25].sum()
        far = g.values[xs > 2.25].sum()
        assert near < 0.5 * far

    def test_coverage_error(self):
        post = l_shape_posterior()
        with pytest.raises(CoverageError) as ei:
            spatial_pg(post, GridSpec.covering(CAR.c1 - 1, CAR.c2 - 1, CAR.c1 + 1, CAR.c2 + 1, 0.1))
        assert ei.value.deficit > 0

    @settings(max_examples=15)
    @given(st.floats(0.01, 3.0), st.floats(-math.pi, math.pi), st.floats(1.5, 6), st.floats(1.0, 2.5))
    def test_normalized(self, w, r, l, wd):
        box = BoxBev(3.0, 20.0, l, wd, r)
        post = infer_posterior(edge_points(box, (0, 1), 6), box, PriorSpec(weight=w))
        g = spatial_pg(post)
        assert abs(g.total() - 1.0) <= 1e-3
        assert np.all(g.values >= 0)

    def test_entropy_grows_with_covariance(self):
        post = l_shape_posterior()
        ents = []
        for t in (0.25, 1.0, 4.0):
            scaled = LabelPosterior.from_feature_cov(post.label, t * post.phi_cov)
            ents.append(spatial_pg(scaled).entropy())
        assert ents[0] <= ents[1] <= ents[2]

    def test_translation_by_whole_cells_is_exact(self):
        post = l_shape_posterior()
        g = spatial_pg(post)
        moved_label = BoxBev(CAR.c1 + 1.0, CAR.c2 - 2.0, CAR.l, CAR.w, CAR.r)
        moved = LabelPosterior.from_feature_cov(moved_label, post.phi_cov)
        spec = GridSpec((g.spec.origin[0] + 1.0, g.spec.origin[1] - 2.0), g.spec.resolution, g.spec.nx, g.spec.ny)
        np.testing.assert_allclose(spatial_pg(moved, spec).values, g.values, atol=1e-9)

    def test_quarter_turn_invariance(self):
        box = BoxBev(0, 0, 4.5, 1.8, 0.3)
        post = l_shape_posterior(box)
        spec = GridSpec.covering(-5, -5, 5, 5, 0.1)
        g = spatial_pg(post, spec)
        R = rotation(math.pi / 2)
        T = np.kron(np.eye(3), R)
        turned = LabelPosterior(
            BoxBev(0, 0, box.l, box.w, box.r + math.pi / 2), T @ post.phi_mean, T @ post.phi_cov @ T.T
        )
        np.testing.assert_allclose(turned.phi_mean, feature_vector(turned.label), atol=1e-12)
        h = spatial_pg(turned, spec)
        # (x, y) -> (-y, x): cell (i, j) moves to (n - 1 - j, i)
        back = SpatialGrid(spec, np.rot90(h.values, k=-1))
        assert total_variation(g, back) <= 0.02


class TestDiscreteAndPdq:
    SMALL = BoxBev(0, 0, 1, 1, 0)
    BIG = BoxBev(0, 0, 3, 3, 0)

    def test_discrete_mass_per_component(self):
        spec = GridSpec.covering(-2, -2, 2, 2, 0.05)
        g = spatial_pg_discrete([self.SMALL, self.BIG], [0.5, 0.5], spec)
        small = uniform_box_grid(self.SMALL, spec).values > 0
        big = uniform_box_grid(self.BIG, spec).values > 0
        ring = big & ~small
        # the small box holds its own 0.5 plus the big box's share over its area
        assert g.values[small].sum() == pytest.approx(0.5 + 0.5 * small.sum() / big.sum())
        assert g.values[ring].sum() == pytest.approx(0.5 * ring.sum() / big.sum())

    def test_discrete_disjoint(self):
        a, b = BoxBev(-2, 0, 1, 1, 0), BoxBev(2, 0, 2, 1, 0)
        spec = GridSpec.covering(-3, -1, 3.5, 1, 0.1)
        g = spatial_pg_discrete([a, b], [0.5, 0.5], spec)
        assert g.values[uniform_box_grid(a, spec).values > 0].sum() == pytest.approx(0.5)

    def test_discrete_single_is_uniform(self):
        spec = GridSpec.covering(-2, -2, 2, 2, 0.1)
        np.testing.assert_allclose(
            spatial_pg_discrete([self.BIG], [1.0], spec).values, uniform_box_grid(self.BIG, spec).values
        )

    def test_discrete_bad_probs(self):
        with pytest.raises(ValueError):
            spatial_pg_discrete([self.BIG], [0.7], GridSpec((0, 0), 0.1, 4, 4))

    def test_pdq_delta_indicator(self):
        spec = GridSpec.covering(-2, -2, 2, 2, 0.1)
        g = spatial_pdq(DeltaSampler(self.BIG), spec, draws=3)
        assert g.kind == MEMBERSHIP
        np.testing.assert_array_equal(g.values, (uniform_box_grid(self.BIG, spec).values > 0).astype(float))

    def test_pdq_two_boxes(self):
        a, b = BoxBev(-1.5, 0, 1, 1, 0), BoxBev(1.5, 0, 1, 1, 0)
        spec = GridSpec.covering(-3, -1, 3, 1, 0.1)
        g = spatial_pdq(DiscreteSampler([a, b], [0.5, 0.5]), spec, draws=20000, seed=3)
        inside = uniform_box_grid(a, spec).values > 0
        np.testing.assert_allclose(g.values[inside], 0.5, atol=0.02)

    def test_pdq_monte_carlo_spread(self):
        post = l_shape_posterior()
        spec = default_grid(CAR, post, 0.2)
        draws = 400
        runs = np.array([spatial_pdq(GaussianSampler.from_posterior(post), spec, draws, seed=s).values for s in range(30)])
        assert runs.std(axis=0).max() <= 1.3 * 0.5 / math.sqrt(draws)
        assert runs.min() >= 0 and runs.max() <= 1


class TestCornerVariance:
    def test_zero(self):
        assert corner_total_variance(LabelPosterior.delta(CAR), 0) == 0.0

    def test_translation_only(self):
        cov = np.zeros((6, 6))
        cov[0, 0] = cov[1, 1] = 0.09
        post = LabelPosterior.from_feature_cov(CAR, cov)
        for k in range(4):
            assert corner_total_variance(post, k) == pytest.approx(0.18)

    def test_l_shape(self):
        box = BoxBev(0, 0, 4.5, 1.8, 0)
        post = l_shape_posterior(box)
        tv = [corner_total_variance(post, k) for k in range(4)]
        assert tv[2] < tv[0]  # observed rear-right corner vs. opposite front-left


class TestSampledDensityTv:
    def test_delta(self):
        assert sampled_density_tv(LabelPosterior.delta(CAR), mc_draws=1000) <= 0.02

    def test_generic(self):
        post = infer_posterior(edge_points(CAR, (0, 1), 8), CAR, PriorSpec(weight=0.5))
        assert sampled_density_tv(post, mc_draws=100_000) <= 0.05

    def test_more_draws_closer(self):
        post = LabelPosterior.from_feature_cov(CAR, prior_phi_covariance(PriorSpec(weight=4.0), CAR))
        spec = default_grid(CAR, post, 0.1)
        ref = spatial_pg(post, spec)
        few, many = [], []
        for s in range(10):
            few.append(total_variation(ref, spatial_pg_sampled(GaussianSampler.from_posterior(post), spec, 2000, s)))
            many.append(total_variation(ref, spatial_pg_sampled(GaussianSampler.from_posterior(post), spec, 4000, 100 + s)))
        assert np.mean(many) < np.mean(few)


class TestExport:
    def test_grid_round_trip(self, tmp_path):
        g = spatial_pg(l_shape_posterior(), resolution=0.2)
        write_grid(g, tmp_path / "sub" / "g.csv")
        back = read_grid(tmp_path / "sub" / "g.csv")
        assert back.spec == g.spec and back.kind == g.kind
        np.testing.assert_array_equal(back.values, g.values)

    def test_pgm_round_trip(self, tmp_path):
        g = spatial_pg(LabelPosterior.delta(CAR), resolution=0.1)
        write_pgm(g, tmp_path / "g.pgm")
        img = read_pgm(tmp_path / "g.pgm")
        assert img.shape == g.values.shape
        np.testing.assert_allclose(img, g.values / g.values.max(), atol=0.5 / 255 + 1e-12)

    def test_read_grid_rejects_headerless(self, tmp_path):
        (tmp_path / "x.csv").write_text("1,2\n")
        with pytest.raises(ValueError):
            read_grid(tmp_path / "x.csv")


@pytest.mark.parametrize("samples", [16, 256, 1024])
def test_surface_sample_count_converged(samples):
    post = l_shape_posterior()
    spec = default_grid(CAR, post, 0.1)
    ref = spatial_pg(post, spec, surface_samples=16384)
    assert total_variation(ref, spatial_pg(post, spec, surface_samples=samples)) <= 1e-3

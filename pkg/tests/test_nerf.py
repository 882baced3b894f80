import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from geovox.autodiff import grad_check
from geovox.geometry import GridSpec, Ray, voxel_centers
from geovox.gradcheck_suite import render_micro
from geovox.nerf import (ColorMLP, GeometryMLP, gather_ray_features, nerf_losses,
                         positional_encoding, ray_keep, render_ray,
                         sample_ray_points, sample_t_values, transmittance)
from geovox.volume import augment_cell, build_augmented_volume

from test_volume import GRID4, views_around


class TestPositionalEncoding:
    def test_zero(self):
        enc = positional_encoding(torch.zeros(1, 3, dtype=torch.float64), 4)
        e = enc.reshape(3, 4, 2)
        assert_allclose(e[..., 0].numpy(), 0.0)
        assert_allclose(e[..., 1].numpy(), 1.0)

    def test_one_single_frequency(self):
        enc = positional_encoding(torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64), 1)
        assert_allclose(enc[0, :2].numpy(), [0.0, -1.0], atol=1e-15)

    def test_length(self):
        assert positional_encoding(torch.zeros(5, 3), 10).shape == (5, 60)

    def test_grid_normalisation(self):
        g = GridSpec(2, 2, 2, origin=(0.0, 0.0, 0.0), voxel_size=(1.0, 1.0, 1.0))
        lo = positional_encoding(torch.zeros(1, 3, dtype=torch.float64), 1, g)
        # the grid minimum maps to -1: sin(-pi) = 0, cos(-pi) = -1
        assert_allclose(lo.reshape(3, 2).numpy(), [[0, -1]] * 3, atol=1e-15)


class TestSampling:
    def test_reference_spacing(self):
        d = (8.0 - 0.2) / 64
        assert d == pytest.approx(0.121875, abs=1e-15)
        assert float(sample_t_values(1, 0.2, 8.0, 64, dtype=torch.float64)[0, 0]) == pytest.approx(0.2609375, abs=1e-12)

    def test_two_bins(self):
        ray = Ray(np.zeros(3), np.array([0, 0, 1.0]))
        assert_allclose(sample_ray_points(ray, 1e-9, 1.0, 2), [0.25, 0.75], atol=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 20), n=st.integers(2, 64))
    def test_stratified_in_bins(self, seed, n):
        gen = torch.Generator().manual_seed(seed)
        t = sample_t_values(3, 0.2, 8.0, n, "stratified", gen, torch.float64).numpy()
        edges = 0.2 + (8.0 - 0.2) / n * np.arange(n + 1)
        assert (t >= edges[:-1]).all() and (t <= edges[1:]).all()
        assert (np.diff(t, axis=1) > 0).all()

    def test_invalid(self):
        with pytest.raises(ValueError):
            sample_t_values(1, 0.0, 1.0, 4)
        with pytest.raises(ValueError):
            sample_t_values(1, 0.5, 1.0, 1)


class TestRayKeep:
    @pytest.mark.parametrize("empty,expected", [(0, True), (8, True), (9, False), (64, False)])
    def test_boundary(self, empty, expected):
        assert ray_keep(empty, 64) is expected

    def test_vectorised(self):
        assert_array_equal(ray_keep(torch.tensor([7, 8, 9])).numpy(), [True, True, False])

    def test_count_larger_than_samples(self):
        with pytest.raises(ValueError):
            ray_keep(10, 8)


class TestMLPs:
    def test_zero_params(self):
        g = GeometryMLP(10, 12, 16)
        c = ColorMLP(16, 16)
        for m in (g, c):
            for p in m.parameters():
                torch.nn.init.zeros_(p)
        sigma, h = g(torch.randn(4, 10), torch.randn(4, 12))
        assert (sigma == 0).all() and (h == 0).all()
        rgb = c(h, torch.randn(4, 3))
        assert_allclose(rgb.detach().numpy(), 0.5)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_ranges(self, seed):
        torch.manual_seed(seed)
        g, c = GeometryMLP(10, 12, 16), ColorMLP(16, 16)
        sigma, h = g(torch.randn(32, 10) * 5, torch.randn(32, 12))
        rgb = c(h, torch.randn(32, 3))
        assert (sigma >= 0).all()
        assert ((rgb > 0) & (rgb < 1)).all()

    def test_direction_matters(self):
        torch.manual_seed(0)
        g, c = GeometryMLP(10, 12, 16), ColorMLP(16, 16)
        _, h = g(torch.randn(1, 10), torch.randn(1, 12))
        d = torch.tensor([[0.0, 0.6, 0.8]])
        assert not torch.allclose(c(h, d), c(h, -d))

    def test_layer_shapes(self):
        g = GeometryMLP(70, 60, 256)
        assert g.l1.in_features == 130 and g.l3.in_features == 256 + 130
        assert ColorMLP(256, 256).l1.in_features == 259


class TestRendering:
    def test_worked_example(self):
        out = render_ray([math.log(2), math.log(4)], [[1, 0, 0], [0, 1, 0]], [1.0, 2.0], 1.0)
        assert_allclose(out.color.numpy(), [0.5, 0.375, 0.0], atol=1e-12)
        assert abs(float(out.depth) - 1.25) < 1e-12
        assert_allclose(transmittance(torch.tensor([math.log(2), math.log(4)], dtype=torch.float64), 1.0).numpy(),
                        [1.0, 0.5, 0.125], atol=1e-12)

    def test_transparent(self):
        out = render_ray(np.zeros(5), np.ones((5, 3)), np.arange(1, 6.0), 0.5)
        assert float(out.weight_sum) == 0 and float(out.depth) == 0
        assert_allclose(out.color.numpy(), 0.0)

    def test_opaque_first_sample(self):
        out = render_ray([50.0, 1.0, 2.0], [[0.2, 0.4, 0.6], [1, 1, 1], [0, 0, 0]], [1.0, 2.0, 3.0], 1.0)
        assert_allclose(out.color.numpy(), [0.2, 0.4, 0.6], atol=1e-8)
        assert abs(float(out.depth) - 1.0) < 1e-8 * 3

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2 ** 30), n=st.integers(1, 64), scale=st.floats(1e-3, 50.0))
    def test_telescoping_and_bounds(self, seed, n, scale):
        rng = np.random.default_rng(seed)
        sigma = rng.exponential(scale, n) * (rng.random(n) < 0.8)
        t = np.sort(rng.uniform(0.2, 8.0, n))
        out = render_ray(sigma, rng.random((n, 3)), t, 0.3)
        T = transmittance(torch.from_numpy(sigma), 0.3).numpy()
        assert abs(float(out.weight_sum) - (1 - T[-1])) <= 1e-12
        assert (np.diff(T) <= 0).all() and (T > 0).all() or T[-1] == 0
        assert float(out.weight_sum) <= 1 + 1e-15
        if float(out.weight_sum) > 0:
            # depth is a sub-convex combination of sample positions
            assert float(out.depth) <= t[-1] * float(out.weight_sum) + 1e-12
            assert float(out.depth) >= t[0] * float(out.weight_sum) - 1e-12


class TestLosses:
    def test_perfect(self):
        c = torch.rand(4, 3)
        d = torch.rand(4)
        l_c, l_d, empty = nerf_losses(c, d, c, d)
        assert float(l_c) == 0 and float(l_d) == 0 and not empty

    def test_values(self):
        l_c, l_d, _ = nerf_losses(torch.tensor([[1.0, 0, 0]]), torch.tensor([1.25]),
                                  torch.zeros(1, 3), torch.tensor([1.0]))
        assert float(l_c) == 1.0 and float(l_d) == 0.25

    def test_toggles(self):
        l_c, l_d, _ = nerf_losses(torch.ones(2, 3), torch.ones(2), torch.zeros(2, 3), torch.zeros(2),
                                  use_photo=False)
        assert float(l_c) == 0 and float(l_d) == 1

    def test_empty_kept_set(self):
        with pytest.warns(RuntimeWarning):
            l_c, l_d, empty = nerf_losses(torch.ones(2, 3), torch.ones(2), torch.zeros(2, 3),
                                          torch.zeros(2), keep=torch.zeros(2, dtype=torch.bool))
        assert empty and float(l_c) == 0 and float(l_d) == 0

    def test_discarded_rays_have_zero_gradient(self):
        color = torch.rand(3, 3, dtype=torch.float64, requires_grad=True)
        depth = torch.rand(3, dtype=torch.float64, requires_grad=True)
        keep = torch.tensor([True, False, True])
        l_c, l_d, _ = nerf_losses(color, depth, torch.zeros(3, 3), torch.zeros(3), keep)
        (l_c + l_d).backward()
        assert (color.grad[1] == 0).all() and depth.grad[1] == 0
        assert (color.grad[0] != 0).any()


class TestRayFeatures:
    def test_matches_volume_cell(self):
        views = views_around(4)
        fmaps = torch.randn((4, 3, 3, 4), generator=torch.Generator().manual_seed(0),
                            dtype=torch.float64)
        vol = build_augmented_volume(views, fmaps, GRID4, interp="bilinear")
        centers = voxel_centers(GRID4)
        feats, count, empty = gather_ray_features(centers[None], views, fmaps)
        for flat in (3, 17, 40, 60):
            i, j, k = flat % 4, (flat // 4) % 4, flat // 16
            assert_allclose(feats[0, flat].numpy(), augment_cell(vol, (i, j, k)).numpy(), atol=1e-12)
            assert count[0, flat] == vol.m_p[i, j, k]

    def test_single_view_zero_variance_and_empty(self):
        views = views_around(2)
        fmaps = torch.randn((2, 3, 3, 4), dtype=torch.float64)
        rng = np.random.default_rng(0)
        pts = np.concatenate([rng.uniform(-4, 8, (400, 3)), [[100.0, 100.0, 100.0]]])
        feats, count, empty = gather_ray_features(pts[None], views, fmaps)
        single = np.nonzero(count[0].numpy() == 1)[0]
        assert single.size > 0
        assert_allclose(feats[0, single, 3:6].numpy(), 0.0)     # v_var
        assert_allclose(feats[0, single, -3:].numpy(), 0.0)     # rgb_var
        assert count[0, -1] == 0 and (feats[0, -1] == 0).all()
        assert int(empty[0]) == int((count[0] == 0).sum())


def test_render_pipeline_gradients():
    loss_fn, params = render_micro()
    rep = grad_check(loss_fn, params)
    assert rep.max_rel_error <= 1e-4, "\n".join(rep.lines())

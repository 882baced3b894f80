import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from geovox.autodiff import grad_check
from geovox.detection import (Box3D, DetectionHead, HeadOutput, assign_targets,
                              average_precision, boxes_from_json, boxes_to_json,
                              decode_and_nms, detection_losses, eval_map, focal_loss,
                              iou3d, iou_matrix)
from geovox.geometry import GridSpec, voxel_centers
from geovox.gradcheck_suite import detection_micro
from geovox.volume import flat_to_grid

GRID = GridSpec(8, 8, 4, origin=(0.0, 0.0, 0.0), voxel_size=(0.5, 0.5, 0.5))

box_strategy = st.tuples(
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    st.lists(st.floats(0.1, 2), min_size=3, max_size=3),
).map(lambda cs: Box3D(cs[0], cs[1]))


def voxel_iou(a: Box3D, b: Box3D, n=64):
    lo = np.minimum(a.min, b.min)
    hi = np.maximum(a.max, b.max)
    axes = [lo[i] + (np.arange(n) + 0.5) * (hi[i] - lo[i]) / n for i in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    p = np.stack([X, Y, Z], -1)
    ina = np.all((p >= a.min) & (p <= a.max), -1)
    inb = np.all((p >= b.min) & (p <= b.max), -1)
    union = (ina | inb).sum()
    return (ina & inb).sum() / union if union else 0.0


class TestBoxes:
    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            Box3D([0, 0, 0], [1, 0, 1])

    def test_json_round_trip(self):
        boxes = [Box3D([1, 2, 3], [0.5, 0.6, 0.7], 2, 0.8)]
        back = boxes_from_json(boxes_to_json(boxes))
        assert_allclose(back[0].center, boxes[0].center)
        assert back[0].label == 2 and back[0].score == 0.8

    def test_iou_basics(self):
        a = Box3D([0, 0, 0], [2, 2, 2])
        assert iou3d(a, a) == pytest.approx(1.0)
        assert iou3d(a, Box3D([5, 0, 0], [1, 1, 1])) == 0.0
        assert iou3d(a, Box3D([1, 0, 0], [2, 2, 2])) == pytest.approx(4 / 12)

    @settings(max_examples=40, deadline=None)
    @given(a=box_strategy, b=box_strategy)
    def test_iou_properties(self, a, b):
        ab, ba = iou3d(a, b), iou3d(b, a)
        assert ab == pytest.approx(ba, abs=1e-12)
        assert 0.0 <= ab <= 1.0 + 1e-12
        assert abs(ab - voxel_iou(a, b)) <= 0.02 + 0.1 * (ab > 0 and min(a.size.min(), b.size.min()) < 0.2)


class TestHead:
    def test_zero_params(self):
        head = DetectionHead(4, 3)
        for p in head.parameters():
            torch.nn.init.zeros_(p)
        out = head(torch.randn(5, 6, 7, 4))
        assert out.cls_logits.shape == (5, 6, 7, 3)
        assert out.box_deltas.shape == (5, 6, 7, 6)
        assert out.centerness_logits.shape == (5, 6, 7)
        assert (out.cls_logits == 0).all() and (out.centerness_logits == 0).all()

    def test_deterministic(self):
        torch.manual_seed(0)
        head = DetectionHead(4, 3, neck_layers=1, neck_channels=8)
        x = torch.randn(4, 4, 4, 4)
        a, b = head(x), head(x)
        assert torch.equal(a.cls_logits, b.cls_logits)

    def test_prior(self):
        head = DetectionHead(4, 3)
        head.init_prior(0.01)
        assert torch.sigmoid(head.cls.bias).detach().numpy() == pytest.approx(0.01)


class TestTargets:
    def test_centre_voxel(self):
        # voxel (3, 3, 1) has centre (1.75, 1.75, 0.75)
        box = Box3D([1.75, 1.75, 0.75], [1.5, 1.5, 1.5], 1)
        t = assign_targets(GRID, [box])
        assert t.labels[3, 3, 1] == 1
        assert t.centerness[3, 3, 1].item() == pytest.approx(1.0)
        assert_allclose(t.offsets[3, 3, 1].numpy(), 0.75)

    def test_background(self):
        t = assign_targets(GRID, [Box3D([1.0, 1.0, 1.0], [0.9, 0.9, 0.9], 0)])
        assert t.labels[7, 7, 3] == -1
        assert (t.offsets[7, 7, 3] == 0).all() and t.centerness[7, 7, 3] == 0

    def test_nested_takes_smaller(self):
        big = Box3D([2.0, 2.0, 1.0], [3.8, 3.8, 1.9], 0)
        small = Box3D([1.75, 1.75, 0.75], [0.6, 0.6, 0.6], 2)
        t = assign_targets(GRID, [big, small])
        assert t.labels[3, 3, 1] == 2
        t = assign_targets(GRID, [small, big])
        assert t.labels[3, 3, 1] == 2
        assert t.labels[0, 0, 0] == 0

    def test_centerness_formula(self):
        box = Box3D([2.0, 2.0, 1.0], [3.0, 3.0, 1.5], 0)
        t = assign_targets(GRID, [box])
        c = voxel_centers(GRID)[GRID.flat_index(2, 4, 1)]
        lo, hi = c - box.min, box.max - c
        expected = np.prod(np.minimum(lo, hi) / np.maximum(lo, hi)) ** (1 / 3)
        assert t.centerness[2, 4, 1].item() == pytest.approx(expected)

    def test_degenerate_box(self):
        box = Box3D([1, 1, 1], [1, 1, 1])
        box.size = np.array([1.0, 0.0, 1.0])
        with pytest.raises(ValueError):
            assign_targets(GRID, [box])


class TestLosses:
    def test_focal_half(self):
        v = focal_loss(torch.tensor([0.0], dtype=torch.float64), torch.tensor([1.0]))
        assert float(v) == pytest.approx(-0.25 * 0.25 * math.log(0.5))
        assert float(v) == pytest.approx(0.04332, abs=1e-5)

    def _perfect_output(self, targets, k=3):
        shape = targets.labels.shape
        pos = targets.positive
        cls = torch.full((*shape, k), -30.0, dtype=torch.float64)
        cls[pos, targets.labels[pos]] = 30.0
        c = targets.centerness.clamp(1e-12, 1 - 1e-12)
        cntr = torch.log(c) - torch.log1p(-c)
        deltas = targets.offsets.clone().double()
        deltas[~pos] = 0.5
        return HeadOutput(cls, deltas, cntr)

    def test_perfect_predictions(self):
        targets = assign_targets(GRID, [Box3D([2.0, 2.0, 1.0], [3.0, 2.5, 1.5], 1)])
        l_cls, l_cntr, l_loc = detection_losses(self._perfect_output(targets), targets)
        assert float(l_loc) == pytest.approx(0.0, abs=1e-12)
        assert float(l_cntr) == pytest.approx(0.0, abs=1e-9)
        assert float(l_cls) < 1e-20

    def test_no_positives(self):
        targets = assign_targets(GRID, [])
        out = DetectionHead(2, 3)(torch.randn(8, 8, 4, 2))
        l_cls, l_cntr, l_loc = detection_losses(out, targets)
        assert l_cntr.item() == 0 and l_loc.item() == 0 and l_cls.item() > 0

    def test_gradients(self):
        loss_fn, params = detection_micro()
        rep = grad_check(loss_fn, params)
        assert rep.max_rel_error <= 1e-4, "\n".join(rep.lines())


def single_voxel_output(grid, idx, label=0, k=3, offsets=(0.4,) * 6):
    n = grid.num_voxels
    cls = torch.full((n, k), -20.0)
    cls[idx, label] = 5.0
    deltas = torch.full((n, 6), 0.1)
    deltas[idx] = torch.tensor(offsets)
    cntr = torch.full((n,), 5.0)
    return HeadOutput(flat_to_grid(cls, grid), flat_to_grid(deltas, grid), flat_to_grid(cntr, grid))


class TestDecode:
    def test_single_confident_voxel(self):
        idx = GRID.flat_index(2, 3, 1)
        boxes = decode_and_nms(single_voxel_output(GRID, idx, 1, offsets=(0.2, 0.3, 0.4, 0.5, 0.1, 0.6)), GRID)
        assert len(boxes) == 1
        c = voxel_centers(GRID)[idx]
        assert_allclose(boxes[0].min, c - [0.2, 0.4, 0.1], atol=1e-6)
        assert_allclose(boxes[0].max, c + [0.3, 0.5, 0.6], atol=1e-6)
        assert boxes[0].label == 1

    def test_below_threshold(self):
        out = single_voxel_output(GRID, 0)
        out.cls_logits[:] = -20
        assert decode_and_nms(out, GRID) == []

    def test_nms_duplicates(self):
        lo = np.array([[0, 0, 0], [0, 0, 0], [5, 5, 5]], dtype=float)
        hi = lo + 1
        from geovox.detection import nms
        assert nms(lo, hi, np.array([0.8, 0.9, 0.1]), 0.25) == [1, 2]

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_nms_output_pairwise_iou(self, seed):
        gen = torch.Generator().manual_seed(seed)
        shape = GRID.shape
        out = HeadOutput(torch.randn((*shape, 3), generator=gen),
                         torch.rand((*shape, 6), generator=gen) + 0.2,
                         torch.randn(shape, generator=gen))
        boxes = decode_and_nms(out, GRID, 0.05, 0.25)
        for c in range(3):
            bs = [b for b in boxes if b.label == c]
            if len(bs) > 1:
                lo = np.stack([b.min for b in bs]); hi = np.stack([b.max for b in bs])
                m = iou_matrix(lo, hi, lo, hi)
                np.fill_diagonal(m, 0)
                assert m.max() < 0.25


class TestMAP:
    gts = [[Box3D([1, 1, 1], [1, 1, 1], 0), Box3D([3, 3, 1], [1, 1, 1], 1)],
           [Box3D([2, 2, 1], [1, 2, 1], 0)]]

    def test_identical(self):
        res = eval_map(self.gts, self.gts)
        assert res[0.25] == 1.0 and res[0.5] == 1.0

    def test_empty(self):
        res = eval_map([[], []], self.gts)
        assert res[0.25] == 0.0 and res[0.5] == 0.0

    def test_half_recall(self):
        gts = [[Box3D([1, 1, 1], [1, 1, 1], 0), Box3D([3, 3, 1], [1, 1, 1], 0)]]
        preds = [[Box3D([1, 1, 1], [1, 1, 1], 0, 0.9)]]
        assert eval_map(preds, gts)[0.5] == pytest.approx(0.5)

    def test_ap_envelope(self):
        assert average_precision(np.array([0.5, 1.0]), np.array([1.0, 0.5])) == pytest.approx(0.75)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 0.99))
    def test_score_scaling_invariance(self, seed, scale):
        rng = np.random.default_rng(seed)
        preds = [[Box3D(g.center + rng.normal(0, 0.2, 3), g.size, g.label, float(rng.random()))
                  for g in scene for _ in range(2)] for scene in self.gts]
        scaled = [[Box3D(b.center, b.size, b.label, b.score * scale) for b in s] for s in preds]
        assert eval_map(preds, self.gts) == eval_map(scaled, self.gts)

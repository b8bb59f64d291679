import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from inpaintseg.detector import (
    ConfigurationError,
    Detector,
    DetectorConfig,
    ProposalSet,
    decode,
    decode_cell,
    detect,
    sample_top_k,
    top_k_cells,
)
from inpaintseg.segmenter import Segmenter, segment


def small_detector(**kw):
    cfg = DetectorConfig(channels=(8, 8, 8, 8, 8), **kw)
    with torch.random.fork_rng():
        torch.manual_seed(0)
        return Detector(cfg, image_size=64)


class TestDecodeCell:
    def test_zero_raw_first_cell(self):
        box, logit = decode_cell([0, 0, 0, 0, 0], 0, DetectorConfig())
        np.testing.assert_allclose(box.to_array(), [0.0625, 0.0625, 0.5, 0.5])
        assert logit == 0.0

    def test_offset_saturation(self):
        box, _ = decode_cell([50.0, 0, 0, 0, 0], 0, DetectorConfig())
        assert box.cx == pytest.approx(0.25)

    def test_offset_clamped_to_image(self):
        box, _ = decode_cell([-50.0, -50.0, 0, 0, 0], 0, DetectorConfig())
        assert box.cx == 0.0 and box.cy == 0.0

    def test_size_lower_saturation(self):
        box, _ = decode_cell([0, 0, -50.0, -50.0, 0], 9, DetectorConfig())
        assert box.w == pytest.approx(0.2) and box.h == pytest.approx(0.2)

    def test_box_relative_offset_basis(self):
        cfg = DetectorConfig(offset_limit_basis="box")
        box, _ = decode_cell([50.0, 0, 0, 0, 0], 27, cfg)
        # cell (3, 3): center 0.4375, offset limit 1.5 * 0.5
        assert box.cx == 1.0
        box, _ = decode_cell([0.1, 0, 0, 0, 0], 27, cfg)
        assert box.cx == pytest.approx(0.4375 + math.tanh(0.1) * 0.75)

    def test_bad_cell(self):
        with pytest.raises(IndexError):
            decode_cell([0] * 5, 64, DetectorConfig())

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=5, max_size=5), st.integers(0, 63))
    def test_decoded_box_contract(self, raw, cell):
        box, _ = decode_cell(raw, cell, DetectorConfig())
        assert 0.2 - 1e-12 <= box.w <= 0.8 + 1e-12 and 0.2 - 1e-12 <= box.h <= 0.8 + 1e-12
        assert 0 <= box.cx <= 1 and 0 <= box.cy <= 1


class TestDecode:
    def test_zero_raw_centers(self):
        boxes, logits = decode(torch.zeros(1, 5, 8, 8, dtype=torch.float64), DetectorConfig())
        centers = (np.arange(8) + 0.5) / 8
        np.testing.assert_allclose(boxes[0, :, 0].numpy(), np.tile(centers, 8))
        np.testing.assert_allclose(boxes[0, :, 1].numpy(), np.repeat(centers, 8))
        np.testing.assert_allclose(boxes[0, :, 2:].numpy(), 0.5)

    def test_gradient_finite_differences(self):
        raw = (torch.randn(1, 5, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64) * 0.5)
        raw.requires_grad_(True)
        weights = torch.randn(1, 64, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        f = lambda r: (decode(r, DetectorConfig())[0] * weights).sum()
        (grad,) = torch.autograd.grad(f(raw), raw)
        h = 1e-6
        for idx in [(0, 0, 2, 3), (0, 1, 5, 1), (0, 2, 0, 0), (0, 3, 7, 7)]:
            d = torch.zeros_like(raw)
            d[idx] = h
            fd = float((f(raw.detach() + d) - f(raw.detach() - d)) / (2 * h))
            assert float(grad[idx]) == pytest.approx(fd, rel=1e-4, abs=1e-9)


class TestDetector:
    def test_structure(self):
        det = small_detector()
        props = det(torch.rand(2, 3, 64, 64))
        assert props.boxes.shape == (2, 64, 4)
        np.testing.assert_allclose(props.probs.sum(-1).detach().numpy(), 1.0, atol=1e-6)
        assert (props.probs >= 0).all()

    def test_batching_transparent(self):
        det = small_detector()
        frames = torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(3))
        both = det(frames)
        for i in range(2):
            single = det(frames[i:i + 1])
            np.testing.assert_allclose(both.probs[i].detach().numpy(), single.probs[0].detach().numpy(),
                                       atol=1e-6)
            np.testing.assert_allclose(both.boxes[i].detach().numpy(), single.boxes[0].detach().numpy(),
                                       atol=1e-6)

    def test_untrained_boxes_sit_at_cell_centers(self):
        props = small_detector()(torch.rand(1, 3, 64, 64))
        np.testing.assert_allclose(props.boxes[0, :, 2].detach().numpy(), 0.5, atol=1e-6)

    def test_detect_from_hwc_frame(self):
        props = detect(np.random.default_rng(0).random((64, 64, 3)), small_detector())
        assert props.boxes.shape == (1, 64, 4)

    def test_wrong_frame_size(self):
        with pytest.raises(ConfigurationError):
            small_detector()(torch.rand(1, 3, 48, 48))

    def test_non_divisible_image(self):
        with pytest.raises(ConfigurationError):
            Detector(DetectorConfig(), image_size=100)

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            Detector(DetectorConfig(scale_min=0.9, scale_max=0.5), image_size=64)

    def test_softmax_shift_invariance(self):
        logits = torch.randn(3, 64, dtype=torch.float64)
        np.testing.assert_allclose(torch.softmax(logits + 7.5, -1).numpy(), torch.softmax(logits, -1).numpy(),
                                   atol=1e-12)

    def test_head_parameters_disjoint(self):
        det = small_detector()
        box_ids = {id(p) for p in det.box_head.parameters()}
        prob_ids = {id(p) for p in det.prob_head.parameters()}
        assert not box_ids & prob_ids

    def test_direct_regression_mode(self):
        cfg = DetectorConfig(channels=(8, 8, 8, 8, 8))
        det = Detector(cfg, 64, head_mode="direct_regression")
        props = det(torch.rand(2, 3, 64, 64))
        assert props.boxes.shape == (2, 1, 4)
        np.testing.assert_allclose(props.probs.detach().numpy(), 1.0)


def proposal_set(probs):
    probs = torch.as_tensor(probs, dtype=torch.float64)[None]
    c = probs.shape[-1]
    boxes = torch.stack([torch.linspace(0.1, 0.9, c)] * 2 + [torch.full((c,), 0.3)] * 2, -1)[None]
    return ProposalSet(boxes=boxes.double(), logits=probs.log(), probs=probs)


class TestTopK:
    def test_one_hot(self):
        p = np.zeros(64)
        p[10] = 1
        props = proposal_set(p)
        assert sample_top_k(props, 1) == [props.box(10)]

    def test_uniform_tie_break(self):
        props = proposal_set(np.full(64, 1 / 64))
        assert sample_top_k(props, 2) == [props.box(0), props.box(1)]

    def test_sorted(self):
        p = np.zeros(64)
        p[:3] = [0.5, 0.3, 0.2]
        props = proposal_set(p)
        assert sample_top_k(props, 2) == [props.box(0), props.box(1)]

    def test_one_hot_second_is_tie_break(self):
        p = np.zeros(64)
        p[10] = 1
        assert top_k_cells(torch.tensor(p), 2) == [10, 0]

    def test_zero_k(self):
        assert sample_top_k(proposal_set(np.full(4, 0.25)), 0) == []


class TestSegmenter:
    def test_shapes_and_ranges(self):
        seg = Segmenter(32, channels=(8, 8, 8), bottleneck=8)
        out = segment(torch.rand(3, 3, 32, 32), seg)
        assert out.recon.shape == (3, 3, 32, 32) and out.mask.shape == (3, 1, 32, 32)
        for t in (out.recon, out.mask):
            assert (t >= 0).all() and (t <= 1).all()

    def test_identical_patches(self):
        seg = Segmenter(32, channels=(8, 8, 8), bottleneck=8)
        patch = torch.rand(1, 3, 32, 32)
        out = segment(patch.expand(2, -1, -1, -1).contiguous(), seg)
        np.testing.assert_array_equal(out.mask[0].numpy(), out.mask[1].numpy())

    def test_size_mismatch(self):
        with pytest.raises(ConfigurationError):
            Segmenter(64)(torch.rand(1, 3, 32, 32))
        with pytest.raises(ConfigurationError):
            Segmenter(60)

    def test_default_bottleneck_compresses(self):
        assert Segmenter().bottleneck_ratio() < 1 / 8

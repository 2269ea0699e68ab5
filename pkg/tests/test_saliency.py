"""Occlusion sensitivity maps on a small trained model."""

import numpy as np
import pytest

from stereoreg import occlusion_saliency
from stereoreg.saliency import occlude_once


class TestOcclusionSaliency:
    def test_shape_range_and_peak(self, trained_tiny):
        t = trained_tiny
        res = occlusion_saliency(t["params"], t["sample"].left, t["sample"].right,
                                 point=(16, 40), patch=8, stride=8)
        assert res.heat.shape == (32, 64)
        assert res.heat.min() >= 0.0
        assert res.heat.max() == pytest.approx(1.0)

    def test_deterministic(self, trained_tiny):
        t = trained_tiny
        kw = dict(point=(16, 32), patch=16, stride=16)
        a = occlusion_saliency(t["params"], t["sample"].left, t["sample"].right, **kw)
        b = occlusion_saliency(t["params"], t["sample"].left, t["sample"].right, **kw)
        np.testing.assert_array_equal(a.heat, b.heat)
        assert a.point_disparity == b.point_disparity

    def test_shift_is_rounded_baseline(self, trained_tiny):
        t = trained_tiny
        res = occlusion_saliency(t["params"], t["sample"].left, t["sample"].right,
                                 point=(16, 40), patch=16, stride=16)
        assert res.shift == int(round(res.point_disparity))
        # the fixture trains to sub-pixel error on disparity 3
        assert res.shift == 3

    def test_occluder_on_point_moves_prediction(self, trained_tiny):
        t = trained_tiny
        res = occlusion_saliency(t["params"], t["sample"].left, t["sample"].right,
                                 point=(16, 40), patch=8, stride=8)
        # hiding the probed pixel itself must matter most locally
        assert res.heat[16, 40] > 0.0

    def test_inputs_not_mutated(self, trained_tiny):
        t = trained_tiny
        left = t["sample"].left.copy()
        right = t["sample"].right.copy()
        occlusion_saliency(t["params"], left, right, point=(16, 40),
                           patch=16, stride=16)
        np.testing.assert_array_equal(left, t["sample"].left)
        np.testing.assert_array_equal(right, t["sample"].right)

    def test_point_validation(self, trained_tiny):
        t = trained_tiny
        with pytest.raises(ValueError):
            occlusion_saliency(t["params"], t["sample"].left, t["sample"].right,
                               point=(32, 0))
        with pytest.raises(ValueError):
            occlusion_saliency(t["params"], t["sample"].left, t["sample"].right,
                               point=(0, 0), patch=0)


class TestOccludeOnce:
    def test_miss_both_images_is_exact_zero(self, trained_tiny):
        t = trained_tiny
        # anchor far past the right edge: both spans clip to nothing
        delta = occlude_once(t["params"], t["sample"].left, t["sample"].right, (16, 40),
                             top=0, lead=1000, patch=8, shift=3, baseline=3.0)
        assert delta == 0.0

    def test_right_only_hit_still_probes(self, trained_tiny):
        t = trained_tiny
        # anchor just past the left image's right edge; the shifted right
        # patch still lands inside
        delta = occlude_once(t["params"], t["sample"].left, t["sample"].right, (16, 60),
                             top=8, lead=64, patch=8, shift=6, baseline=3.0)
        assert delta >= 0.0

    def test_identity_when_fill_matches_content(self, trained_tiny):
        t = trained_tiny
        left = t["sample"].left.copy()
        right = t["sample"].right.copy()
        left[0:4, 0:4] = 0.25
        right[0:4, 0:4] = 0.25
        base = float(np.asarray(
            occlusion_saliency(t["params"], left, right, point=(16, 40),
                               patch=1, stride=64).point_disparity))
        delta = occlude_once(t["params"], left, right, (16, 40), top=0,
                             lead=0, patch=4, shift=0, baseline=base,
                             fill=0.25)
        assert delta == 0.0

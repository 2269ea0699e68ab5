"""Synthetic pair generation, PFM/PNM I/O, masks, and manifests."""

import math
import os

import numpy as np
import pytest

from stereoreg import data as D

from references import sad_disparity


class TestSynthConstant:
    def test_integer_shift_is_exact_copy(self):
        spec = D.SynthSpec(height=16, width=40, texture="random-dot",
                           field="constant", d_range=(5.0,), seed=1,
                           dtype=np.float64)
        s = D.gen_synthetic_pair(spec)
        # right[y, x] must equal left[y, x + d] wherever the source column
        # stays inside the left image
        np.testing.assert_array_equal(s.right[:, :35 - 1], s.left[:, 5:39])

    def test_fractional_shift_matches_interp(self):
        d = 2.5
        spec = D.SynthSpec(height=8, width=32, field="constant", d_range=(d,),
                           seed=2, dtype=np.float64)
        s = D.gen_synthetic_pair(spec)
        xs = np.arange(32) + d
        inside = xs <= 31.0   # beyond this the source is canvas, not left
        for y in range(8):
            want = np.interp(xs[inside], np.arange(32), s.left[y, :, 0])
            np.testing.assert_allclose(s.right[y, inside, 0], want, atol=1e-12)

    def test_gt_and_mask(self):
        spec = D.SynthSpec(height=4, width=16, field="constant", d_range=(3.0,),
                           seed=3)
        s = D.gen_synthetic_pair(spec)
        np.testing.assert_array_equal(s.gt, np.full((4, 16), 3.0, np.float32))
        want_mask = np.tile(np.arange(16) >= 3, (4, 1))
        np.testing.assert_array_equal(s.mask, want_mask)

    def test_sad_matcher_recovers_disparity(self):
        spec = D.SynthSpec(height=24, width=40, texture="random-dot",
                           field="constant", d_range=(3.0,), seed=4,
                           dtype=np.float64)
        s = D.gen_synthetic_pair(spec)
        disp = sad_disparity(s.left, s.right, dmax=8)
        core = disp[4:-4, 8:36]
        assert np.mean(core == 3) > 0.99


class TestSynthRamp:
    def test_gt_is_linear(self):
        spec = D.SynthSpec(height=4, width=33, field="ramp", d_range=(1.0, 9.0),
                           seed=5)
        s = D.gen_synthetic_pair(spec)
        want = 1.0 + (9.0 - 1.0) / 32 * np.arange(33)
        np.testing.assert_allclose(s.gt[0], want, atol=1e-6)

    def test_right_view_consistent_with_left(self):
        # right pixel x shows the surface at x + d~(x) where the visible
        # disparity solves x = x_l - d(x_l) for the linear field d
        w = 48
        d0, d1 = 2.0, 6.0
        spec = D.SynthSpec(height=6, width=w, field="ramp", d_range=(d0, d1),
                           seed=6, dtype=np.float64)
        s = D.gen_synthetic_pair(spec)
        slope = (d1 - d0) / (w - 1)
        xs_r = np.arange(w, dtype=np.float64)
        src = xs_r + (d0 + slope * xs_r) / (1.0 - slope)
        ok = src <= w - 1   # beyond this the source is canvas padding
        for y in range(6):
            want = np.interp(src[ok], np.arange(w), s.left[y, :, 0])
            np.testing.assert_allclose(s.right[y, ok, 0], want, atol=1e-12)

    def test_fold_over_rejected(self):
        with pytest.raises(ValueError):
            D.SynthSpec(height=4, width=8, field="ramp",
                        d_range=(0.0, 8.0)).validate()


class TestSynthTwoPlane:
    def _spec(self, **kw):
        base = dict(height=12, width=64, texture="random-dot",
                    field="two-plane", d_range=(2.0, 6.0), seed=7,
                    dtype=np.float64)
        base.update(kw)
        return D.SynthSpec(**base)

    def test_gt_has_two_levels(self):
        s = D.gen_synthetic_pair(self._spec())
        fx0, fx1 = round(0.3 * 64), round(0.7 * 64)
        assert set(np.unique(s.gt)) == {2.0, 6.0}
        np.testing.assert_array_equal(s.gt[:, fx0:fx1], 6.0)
        np.testing.assert_array_equal(s.gt[:, :fx0], 2.0)

    def test_occluded_band_masked(self):
        s = D.gen_synthetic_pair(self._spec())
        fx0, fx1 = 19, 45
        dbg, dfg = 2.0, 6.0
        expected = np.ones(64, dtype=bool)
        for x in range(64):
            d = dfg if fx0 <= x < fx1 else dbg
            if x - d < 0:
                expected[x] = False
            if not (fx0 <= x < fx1):
                proj = x - dbg
                if fx0 - dfg <= proj < fx1 - dfg:
                    expected[x] = False
        np.testing.assert_array_equal(s.mask[0], expected)

    def test_occlusion_flag_keeps_band(self):
        s = D.gen_synthetic_pair(self._spec(occlusion_exclude=False))
        # only the left-edge out-of-view pixels drop
        assert int((~s.mask[0]).sum()) == 2

    def test_foreground_visible_in_right_view(self):
        # the right image's foreground span equals the left span shifted by
        # the foreground disparity; integer d makes the copy exact
        s = D.gen_synthetic_pair(self._spec())
        fx0, fx1 = 19, 45
        np.testing.assert_array_equal(s.right[:, fx0 - 6:fx1 - 6],
                                      s.left[:, fx0:fx1])

    def test_ordering_validated(self):
        with pytest.raises(ValueError):
            self._spec(d_range=(6.0, 2.0)).validate()


class TestSynthGeneral:
    def test_deterministic(self):
        spec = D.SynthSpec(height=8, width=16, seed=9)
        a = D.gen_synthetic_pair(spec)
        b = D.gen_synthetic_pair(spec)
        np.testing.assert_array_equal(a.left, b.left)
        np.testing.assert_array_equal(a.right, b.right)

    def test_seed_changes_texture(self):
        a = D.gen_synthetic_pair(D.SynthSpec(height=8, width=16, seed=1))
        b = D.gen_synthetic_pair(D.SynthSpec(height=8, width=16, seed=2))
        assert not np.array_equal(a.left, b.left)

    def test_default_dtype_float32(self):
        s = D.gen_synthetic_pair(D.SynthSpec(height=8, width=16, seed=0))
        assert s.left.dtype == np.float32
        assert s.gt.dtype == np.float32

    def test_smooth_noise_texture(self):
        s = D.gen_synthetic_pair(D.SynthSpec(height=16, width=32,
                                             texture="smooth-noise", seed=0))
        assert s.left.min() >= 0.0 and s.left.max() <= 1.0
        # smooth field: neighboring pixels differ by far less than the range
        diffs = np.abs(np.diff(s.left[:, :, 0], axis=1))
        assert diffs.max() < 0.5

    def test_values_in_unit_interval(self):
        for tex in D.TEXTURES:
            s = D.gen_synthetic_pair(D.SynthSpec(height=8, width=16,
                                                 texture=tex, seed=3))
            assert s.left.min() >= 0.0 and s.left.max() <= 1.0
            assert s.right.min() >= 0.0 and s.right.max() <= 1.0

    def test_three_channels(self):
        s = D.gen_synthetic_pair(D.SynthSpec(height=8, width=16, channels=3,
                                             seed=0))
        assert s.left.shape == (8, 16, 3)

    def test_validation_errors(self):
        with pytest.raises(ValueError):
            D.SynthSpec(texture="marble").validate()
        with pytest.raises(ValueError):
            D.SynthSpec(field="dome").validate()
        with pytest.raises(ValueError):
            D.SynthSpec(width=8, d_range=(9.0,)).validate()
        with pytest.raises(ValueError):
            D.SynthSpec(d_range=(4.0,), dmax=4).validate()
        with pytest.raises(ValueError):
            D.SynthSpec(d_range=(-1.0,)).validate()


class TestPfm:
    def test_round_trip_little_endian(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.normal(size=(5, 7)).astype(np.float32)
        path = str(tmp_path / "m.pfm")
        D.write_pfm(path, arr, scale=-1.0)
        back, scale = D.read_pfm(path)
        np.testing.assert_array_equal(back, arr)
        assert scale == -1.0

    def test_round_trip_big_endian(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.normal(size=(4, 3)).astype(np.float32)
        path = str(tmp_path / "m.pfm")
        D.write_pfm(path, arr, scale=2.5)
        back, scale = D.read_pfm(path)
        np.testing.assert_array_equal(back, arr)
        assert scale == 2.5

    def test_nan_payload_survives(self, tmp_path):
        arr = np.array([[np.nan, 1.0], [-np.inf, 3.5]], dtype=np.float32)
        path = str(tmp_path / "m.pfm")
        D.write_pfm(path, arr)
        back, _ = D.read_pfm(path)
        assert back.tobytes() == arr.tobytes()

    def test_color_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        arr = rng.normal(size=(3, 4, 3)).astype(np.float32)
        path = str(tmp_path / "c.pfm")
        D.write_pfm(path, arr)
        back, _ = D.read_pfm(path)
        assert back.shape == (3, 4, 3)
        np.testing.assert_array_equal(back, arr)

    def test_scanlines_stored_bottom_up(self, tmp_path):
        arr = np.zeros((2, 2), dtype=np.float32)
        arr[0] = 7.0   # top row in memory
        path = str(tmp_path / "m.pfm")
        D.write_pfm(path, arr, scale=-1.0)
        blob = open(path, "rb").read()
        payload = np.frombuffer(blob[-16:], dtype="<f4")
        np.testing.assert_array_equal(payload, [0.0, 0.0, 7.0, 7.0])

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "bad.pfm")
        open(path, "wb").write(b"P7\n2 2\n-1.0\n" + b"\x00" * 16)
        with pytest.raises(D.PfmError, match="magic"):
            D.read_pfm(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = str(tmp_path / "bad.pfm")
        open(path, "wb").write(b"Pf\n2 2\n-1.0\n" + b"\x00" * 7)
        with pytest.raises(D.PfmError, match="offset"):
            D.read_pfm(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = str(tmp_path / "bad.pfm")
        open(path, "wb").write(b"Pf\n2 2\n-1.0\n" + b"\x00" * 17)
        with pytest.raises(D.PfmError):
            D.read_pfm(path)

    def test_zero_scale_rejected(self, tmp_path):
        path = str(tmp_path / "bad.pfm")
        open(path, "wb").write(b"Pf\n2 2\n0.0\n" + b"\x00" * 16)
        with pytest.raises(D.PfmError):
            D.read_pfm(path)
        with pytest.raises(D.PfmError):
            D.write_pfm(str(tmp_path / "x.pfm"), np.zeros((2, 2)), scale=0.0)


class TestPnm:
    def test_pgm_8bit_round_trip(self, tmp_path):
        img = (np.arange(12).reshape(3, 4, 1) / 255.0)
        path = str(tmp_path / "g.pgm")
        D.write_image(path, img, maxval=255)
        back = D.read_image(path)
        np.testing.assert_allclose(back, img, atol=1e-7)

    def test_ppm_16bit_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(5, 4, 3))
        path = str(tmp_path / "c.ppm")
        D.write_image(path, img, maxval=65535)
        back = D.read_image(path)
        np.testing.assert_allclose(back, img, atol=0.5 / 65535 + 1e-9)

    def test_16bit_is_big_endian(self, tmp_path):
        path = str(tmp_path / "g.pgm")
        open(path, "wb").write(b"P5\n1 1\n65535\n\x80\x00")
        back = D.read_image(path)
        np.testing.assert_allclose(back[0, 0, 0], 32768 / 65535, atol=1e-9)

    def test_ascii_variants_with_comments(self, tmp_path):
        path = str(tmp_path / "a.pgm")
        open(path, "w").write("P2\n# comment line\n2 2\n255\n0 128\n255 64\n")
        back = D.read_image(path)
        np.testing.assert_allclose(back[:, :, 0] * 255,
                                   [[0, 128], [255, 64]], atol=1e-4)
        path3 = str(tmp_path / "a.ppm")
        open(path3, "w").write("P3\n1 1\n255\n10 20 30\n")
        back3 = D.read_image(path3)
        np.testing.assert_allclose(back3[0, 0] * 255, [10, 20, 30], atol=1e-4)

    def test_unsupported_magic(self, tmp_path):
        path = str(tmp_path / "b.pbm")
        open(path, "wb").write(b"P4\n8 1\n\xff")
        with pytest.raises(D.PnmError, match="P2, P3, P5 or P6"):
            D.read_image(path)

    def test_truncated_binary(self, tmp_path):
        path = str(tmp_path / "t.pgm")
        open(path, "wb").write(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(D.PnmError, match="truncated"):
            D.read_image(path)

    def test_colormap_output(self):
        v = np.linspace(0, 1, 16).reshape(4, 4)
        rgb = D.colormap_rgb(v)
        assert rgb.shape == (4, 4, 3)
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0
        assert not np.array_equal(rgb[0, 0], rgb[3, 3])


class TestMasks:
    def test_nonfinite_policy(self):
        gt = np.array([[1.0, np.nan], [np.inf, 4.0]])
        rep = D.sparse_mask_from_gt(gt, "nonfinite")
        np.testing.assert_array_equal(rep.mask, [[True, False], [False, True]])
        assert rep.valid_count == 2
        assert rep.usable

    def test_nonpositive_policy(self):
        gt = np.array([[1.0, 0.0], [-2.0, np.nan]])
        rep = D.sparse_mask_from_gt(gt, "nonpositive")
        np.testing.assert_array_equal(rep.mask, [[True, False], [False, False]])
        assert rep.valid_count == 1

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            D.sparse_mask_from_gt(np.ones((2, 2)), "sentinel")


class TestManifest:
    def test_round_trip_and_relative_resolution(self, tmp_path):
        sub = tmp_path / "ds"
        sub.mkdir()
        path = str(sub / "manifest.tsv")
        entries = [D.ManifestEntry("l0.pgm", "r0.pgm", "g0.pfm")]
        D.write_manifest(path, entries)
        back = D.read_manifest(path)
        assert len(back) == 1
        assert back[0].left == str(sub / "l0.pgm")
        assert back[0].gt == str(sub / "g0.pfm")

    def test_malformed_line(self, tmp_path):
        path = str(tmp_path / "m.tsv")
        open(path, "w").write("only\ttwo\n")
        with pytest.raises(ValueError, match="3 tab-separated"):
            D.read_manifest(path)

    def test_empty_manifest(self, tmp_path):
        path = str(tmp_path / "m.tsv")
        open(path, "w").write("# nothing\n")
        with pytest.raises(ValueError, match="empty"):
            D.read_manifest(path)

    def test_sample_files_round_trip(self, tmp_path):
        spec = D.SynthSpec(height=8, width=24, field="two-plane",
                           d_range=(1.5, 4.5), seed=11)
        sample = D.gen_synthetic_pair(spec)
        entry = D.save_sample_files(str(tmp_path), "p0", sample)
        back = D.load_sample(entry)
        np.testing.assert_array_equal(back.mask, sample.mask)
        np.testing.assert_allclose(back.gt[back.mask], sample.gt[sample.mask],
                                   atol=1e-6)
        np.testing.assert_allclose(back.left, sample.left,
                                   atol=0.5 / 65535 + 1e-6)
        np.testing.assert_allclose(back.right, sample.right,
                                   atol=0.5 / 65535 + 1e-6)

import numpy as np
import pytest

from l1bsr import geometry as geo
from l1bsr import simulation as sim
from l1bsr.imagery import BAND_NAMES


def zero_params(**kw):
    defaults = dict(scene_translation_range=0.0, scene_corner_range=0.0,
                    band_translation_range=0.0, band_jitter_range=0.0,
                    noise_std=0.0)
    defaults.update(kw)
    return sim.SimulationParams(**defaults)


@pytest.fixture(scope="module")
def scene():
    return sim.synthetic_scene(np.random.default_rng(11), 64, 64)


class TestGaussianBlur:
    def test_sigma_zero_is_identity(self):
        img = np.random.default_rng(0).random((8, 8))
        assert np.array_equal(sim.gaussian_blur(img, 0.0), img)

    def test_constant_preserved(self):
        img = np.full((4, 16, 16), 0.4)
        assert np.allclose(sim.gaussian_blur(img, 0.7), img, atol=1e-12)

    def test_impulse_matches_closed_form(self):
        img = np.zeros((33, 33))
        img[16, 16] = 1.0
        out = sim.gaussian_blur(img, 0.7)
        # separable sampled Gaussian, truncated at 4 sigma, normalized
        radius = int(4 * 0.7 + 0.5)
        xs = np.arange(-radius, radius + 1)
        kern = np.exp(-0.5 * (xs / 0.7) ** 2)
        kern /= kern.sum()
        expected = np.outer(kern, kern)
        window = out[16 - radius:16 + radius + 1, 16 - radius:16 + radius + 1]
        assert np.abs(window - expected).max() <= 1e-6
        assert abs(out.sum() - 1.0) <= 1e-9

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            sim.gaussian_blur(np.zeros((4, 4)), -0.1)


class TestHomographySampling:
    def test_zero_ranges_give_identity(self):
        rng = np.random.default_rng(1)
        h = sim.sample_scene_homography(rng, zero_params(), (64, 64))
        assert np.array_equal(h, np.eye(3))

    def test_seeded_determinism(self):
        p = sim.SimulationParams()
        a = sim.sample_scene_homography(np.random.default_rng(3), p, (64, 64))
        b = sim.sample_scene_homography(np.random.default_rng(3), p, (64, 64))
        assert np.array_equal(a, b)
        c = sim.sample_band_homography(np.random.default_rng(4), p, (64, 64))
        d = sim.sample_band_homography(np.random.default_rng(4), p, (64, 64))
        assert np.array_equal(c, d)

    def test_corner_motion_within_bound(self):
        p = sim.SimulationParams()
        rng = np.random.default_rng(5)
        corners = np.array([[0, 0], [63, 0], [0, 63], [63, 63]], dtype=np.float64)
        bound = p.scene_translation_range + p.scene_corner_range
        for _ in range(1000):
            h = sim.sample_scene_homography(rng, p, (64, 64))
            xs, ys = geo.apply_homography_to_points(h, corners[:, 0], corners[:, 1])
            disp = np.stack([xs, ys], axis=1) - corners
            assert np.abs(disp).max() <= bound + 1e-6

    def test_band_translation_dominates_jitter(self):
        p = sim.SimulationParams()
        rng = np.random.default_rng(6)
        center = np.array([31.5, 31.5])
        corners = np.array([[0, 0], [63, 0], [0, 63], [63, 63]], dtype=np.float64)
        trans_norms, resid_norms = [], []
        for _ in range(1000):
            h = sim.sample_band_homography(rng, p, (64, 64))
            cx, cy = geo.apply_homography_to_points(h, center[:1], center[1:])
            t = np.array([cx[0] - center[0], cy[0] - center[1]])
            xs, ys = geo.apply_homography_to_points(h, corners[:, 0], corners[:, 1])
            resid = np.stack([xs, ys], axis=1) - corners - t
            trans_norms.append(np.linalg.norm(t))
            resid_norms.append(np.abs(resid).max())
        assert np.mean(trans_norms) >= 10 * np.mean(resid_norms)

    def test_zero_jitter_gives_pure_translation(self):
        p = zero_params(band_translation_range=4.0)
        h = sim.sample_band_homography(np.random.default_rng(7), p, (64, 64))
        expected = geo.translation_homography(h[0, 2], h[1, 2])
        assert np.array_equal(h, expected)


class TestSimulationParams:
    def test_distortion_budget_enforced(self):
        with pytest.raises(ValueError):
            sim.SimulationParams(scene_corner_range=12.0)

    def test_default_budget_at_limit(self):
        assert sim.SimulationParams().max_lr_distortion() == pytest.approx(10.0)

    def test_negative_noise_rejected(self):
        with pytest.raises(ValueError):
            sim.SimulationParams(noise_std=-1e-3)


class TestSimulatePair:
    def test_degenerate_params(self, scene):
        pair = sim.simulate_pair(scene, zero_params(), np.random.default_rng(0))
        assert np.array_equal(pair.i0, pair.i1)
        for band in BAND_NAMES:
            assert np.array_equal(pair.flows[band], np.zeros_like(pair.flows[band]))
        blurred = np.clip(sim.gaussian_blur(scene, 0.7), 0, 1).astype(np.float32)
        assert np.abs(pair.i0 - blurred[:, ::2, ::2]).max() <= 1e-6

    def test_seeded_determinism(self, scene):
        p = sim.SimulationParams()
        a = sim.simulate_pair(scene, p, np.random.default_rng(9))
        b = sim.simulate_pair(scene, p, np.random.default_rng(9))
        assert np.array_equal(a.i0, b.i0) and np.array_equal(a.i1, b.i1)
        assert np.array_equal(a.gt_hr0, b.gt_hr0)
        assert all(np.array_equal(a.flows[k], b.flows[k]) for k in BAND_NAMES)

    def test_different_seeds_differ(self, scene):
        p = zero_params(noise_std=0.001)
        a = sim.simulate_pair(scene, p, np.random.default_rng(1))
        b = sim.simulate_pair(scene, p, np.random.default_rng(2))
        assert not np.array_equal(a.i0, b.i0)

    def test_green_has_no_band_homography(self, scene):
        p = sim.SimulationParams(noise_std=0.0)
        pair = sim.simulate_pair(scene, p, np.random.default_rng(3))
        for t, img, hr in ((0, pair.i0, pair.gt_hr0), (1, pair.i1, pair.gt_hr1)):
            assert np.array_equal(hr[1][::2, ::2], img[1])

    def test_stored_geometry_reproduces_lr_bands(self, scene):
        p = sim.SimulationParams(noise_std=0.0)
        pair = sim.simulate_pair(scene, p, np.random.default_rng(4))
        lr_shape = pair.i0.shape[-2:]
        for t, img, hr in ((0, pair.i0, pair.gt_hr0), (1, pair.i1, pair.gt_hr1)):
            for bi, band in enumerate(BAND_NAMES):
                if band == "g":
                    rebuilt = hr[bi][::2, ::2]
                else:
                    flow = sim.band_lr_flow(pair.homographies[f"h{t}_{band}"], lr_shape)
                    rebuilt = geo.warp_and_downsample(hr[bi], flow)
                assert np.abs(rebuilt - img[bi])[:, 4:-4][4:-4].max() <= 1e-3

    def test_integer_parity_translations_cross_image(self, scene):
        h = {"h0": geo.translation_homography(4, -2),
             "h1": geo.translation_homography(-2, 2),
             "h0_b": geo.translation_homography(2, -4),
             "h1_b": geo.translation_homography(-4, 2),
             "h0_r": geo.translation_homography(0, 2),
             "h1_r": geo.translation_homography(2, 0),
             "h0_n": geo.translation_homography(-2, 0),
             "h1_n": geo.translation_homography(0, -2)}
        pair = sim.simulate_pair(scene, zero_params(), np.random.default_rng(5),
                                 homographies=h)
        # warping the I0-frame ground truth by the stored flows must land
        # exactly on I1's bands (integer HR parity => no interpolation);
        # the interior margin excludes the border plus the largest motion
        # so no edge-clamped samples are compared
        margin = 4 + 6
        for bi, band in enumerate(BAND_NAMES):
            rebuilt = geo.warp_and_downsample(pair.gt_hr0[bi], pair.flows[band])
            assert np.abs(rebuilt - pair.i1[bi])[margin:-margin, margin:-margin].max() <= 1e-3

    def test_gt_flow_matches_composite_homographies(self, scene):
        p = sim.SimulationParams(noise_std=0.0)
        pair = sim.simulate_pair(scene, p, np.random.default_rng(6))
        h, w = pair.i0.shape[-2:]
        for band in BAND_NAMES:
            m_tgt = sim.band_matrix(pair.homographies, 1, band)
            m_ref = pair.homographies["h0"]
            ys, xs = np.meshgrid(np.arange(h, dtype=float),
                                 np.arange(w, dtype=float), indexing="ij")
            hx, hy = geo.apply_homography_to_points(m_tgt, 2 * xs, 2 * ys)
            rx, ry = geo.apply_homography_to_points(geo.invert_homography(m_ref), hx, hy)
            expected = np.stack([rx / 2 - xs, ry / 2 - ys])
            assert np.abs(pair.flows[band] - expected).max() <= 1e-5

    def test_input_validation(self, scene):
        with pytest.raises(ValueError):
            sim.simulate_pair(scene[:, :63, :], sim.SimulationParams(),
                              np.random.default_rng(0))
        with pytest.raises(ValueError):
            sim.simulate_pair(scene * 2.0, sim.SimulationParams(),
                              np.random.default_rng(0))


class TestSyntheticScene:
    def test_range_and_shape(self):
        scene = sim.synthetic_scene(np.random.default_rng(0), 96, 64)
        assert scene.shape == (4, 96, 64)
        assert scene.min() >= 0.0 and scene.max() <= 1.0

    def test_carries_alias_energy(self):
        scene = sim.synthetic_scene(np.random.default_rng(1), 128, 128)
        blurred = sim.gaussian_blur(scene, 0.7)[1]
        spec = np.abs(np.fft.fft2(blurred - blurred.mean())) ** 2
        freq = np.maximum(np.abs(np.fft.fftfreq(128))[:, None],
                          np.abs(np.fft.fftfreq(128))[None, :])
        frac = spec[freq > 0.25].sum() / spec.sum()
        assert frac > 1e-3  # content beyond the LR Nyquist rate survives the blur

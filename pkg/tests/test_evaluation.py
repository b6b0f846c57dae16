import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from l1bsr import evaluation as ev
from l1bsr import geometry as geo
from l1bsr import simulation as sim
from l1bsr.errors import DataError
from l1bsr.imagery import BAND_NAMES


@pytest.fixture(scope="module")
def textured_band():
    return sim.synthetic_scene(np.random.default_rng(0), 128, 128)[1]


@pytest.fixture(scope="module")
def sim_pair():
    scene = sim.synthetic_scene(np.random.default_rng(1), 128, 128)
    params = sim.SimulationParams(noise_std=0.0)
    pair = sim.simulate_pair(scene, params, np.random.default_rng(2))
    return {"id": "p0", "i0": pair.i0, "i1": pair.i1,
            "hr": [pair.gt_hr0, pair.gt_hr1], "flows": pair.flows,
            "homographies": pair.homographies}


class TestEndpointError:
    def test_zero_for_equal(self):
        f = np.random.default_rng(3).normal(0, 2, (2, 32, 32))
        assert ev.flow_endpoint_error(f, f) == 0.0

    def test_three_four_five(self):
        f = np.zeros((2, 32, 32))
        g = f.copy()
        g[0], g[1] = 3.0, 4.0
        assert ev.flow_endpoint_error(g, f) == pytest.approx(5.0)

    def test_random_equals_bruteforce(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(0, 1, (2, 2, 16, 16))
        manual = np.sqrt(((a - b)[:, 4:-4, 4:-4] ** 2).sum(axis=0)).mean()
        assert ev.flow_endpoint_error(a, b) == pytest.approx(manual, abs=1e-12)

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=15, deadline=None)
    def test_metric_properties(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(0, 1, (3, 2, 12, 12))
        dab = ev.flow_endpoint_error(a, b, border=0)
        assert dab == pytest.approx(ev.flow_endpoint_error(b, a, border=0))
        assert dab >= 0
        dac = ev.flow_endpoint_error(a, c, border=0)
        dcb = ev.flow_endpoint_error(c, b, border=0)
        assert dab <= dac + dcb + 1e-12

    def test_mae_variant(self):
        f = np.zeros((2, 16, 16))
        g = f.copy()
        g[0] = 1.0
        assert ev.flow_endpoint_error(g, f, metric="mae") == pytest.approx(0.5)


class TestRegistrationMatrix:
    def test_gt_oracle_gives_zero_matrix(self, sim_pair):
        h, w = sim_pair["i0"].shape[-2:]
        gt_lookup = []
        for ref_band in BAND_NAMES:
            for tgt_band in BAND_NAMES:
                gt_lookup.append(sim.gt_flow(sim_pair["homographies"], tgt_band,
                                             (h, w), ref_t=0, ref_band=ref_band,
                                             tgt_t=1))
        calls = iter(gt_lookup)

        def oracle(ref, tgt):
            return torch.from_numpy(next(calls).copy())

        matrix = ev.registration_error_matrix(oracle, [sim_pair])
        assert matrix.errors.shape == (4, 4)
        assert matrix.errors.max() <= 1e-6
        assert matrix.count == 1

    def test_missing_homographies_rejected(self, sim_pair):
        bare = {k: v for k, v in sim_pair.items() if k != "homographies"}
        stub = lambda ref, tgt: torch.zeros(2, *ref.shape[-2:])
        with pytest.raises(DataError):
            ev.registration_error_matrix(stub, [bare])

    def test_table_renders(self, sim_pair):
        stub = lambda ref, tgt: torch.zeros(2, *ref.shape[-2:])
        matrix = ev.registration_error_matrix(stub, [sim_pair])
        text = matrix.table()
        assert "B" in text and "N" in text


class TestTvl1:
    def test_identity_flow_near_zero(self, textured_band):
        flow = ev.tvl1_flow(textured_band, textured_band)
        assert np.abs(flow).mean() <= 0.05

    def test_subpixel_translation(self, textured_band):
        shift = np.zeros((2, 128, 128))
        shift[0] = -0.5
        moving = geo.pullback(textured_band, shift)
        flow = ev.tvl1_flow(textured_band, moving)
        inner = flow[:, 8:-8, 8:-8]
        assert abs(inner[0].mean() - 0.5) <= 0.1
        assert abs(inner[1].mean()) <= 0.1

    def test_integer_translation(self, textured_band):
        shift = np.zeros((2, 128, 128))
        shift[0], shift[1] = -2.0, -1.0
        moving = geo.pullback(textured_band, shift)
        flow = ev.tvl1_flow(textured_band, moving)
        inner = flow[:, 8:-8, 8:-8]
        assert abs(inner[0].mean() - 2.0) <= 0.1
        assert abs(inner[1].mean() - 1.0) <= 0.1

    def test_deterministic(self, textured_band):
        moving = np.roll(textured_band, 1, axis=1)
        a = ev.tvl1_flow(textured_band, moving)
        b = ev.tvl1_flow(textured_band, moving)
        assert np.array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ev.tvl1_flow(np.zeros((16, 16)), np.zeros((16, 18)))


class TestAlignedPsnr:
    def test_identity_is_high(self, sim_pair):
        gt = sim_pair["hr"][0]
        rep = ev.aligned_psnr(gt, gt)
        assert all(v >= 60.0 for v in rep.per_band.values())

    def test_alignment_beats_unaligned_on_shifted_gt(self, sim_pair):
        gt = sim_pair["hr"][0].astype(np.float64)
        shift = np.zeros((2,) + gt.shape[-2:])
        shift[0] = 0.3
        shifted = np.stack([geo.pullback(gt[c], shift) for c in range(4)])
        aligned = ev.aligned_psnr(gt, shifted)
        unaligned = ev.aligned_psnr(gt, shifted, align=False)
        for band in BAND_NAMES:
            assert aligned.per_band[band] > unaligned.per_band[band]

    def test_never_hurts_aligned_pairs_by_more_than_0p1db(self, sim_pair):
        rng = np.random.default_rng(5)
        gt = sim_pair["hr"][0].astype(np.float64)
        noisy = np.clip(gt + rng.normal(0, 0.01, gt.shape), 0, 1)
        aligned = ev.aligned_psnr(noisy, gt)
        unaligned = ev.aligned_psnr(noisy, gt, align=False)
        for band in BAND_NAMES:
            assert unaligned.per_band[band] - aligned.per_band[band] <= 0.1


class TestEvaluateSr:
    def test_oracle_rec_is_high(self, sim_pair):
        def oracle(x):
            return torch.from_numpy(sim_pair["hr"][0].copy())[None]

        rep = ev.evaluate_sr(oracle, [sim_pair])
        assert all(v >= 60.0 for v in rep.per_band.values())
        assert rep.count == 1

    def test_bicubic_baseline_below_oracle(self, sim_pair):
        def bicubic(x):
            return torch.from_numpy(
                ev.bicubic_upsample_x2(np.asarray(x)[0]).astype(np.float32))[None]

        rep = ev.evaluate_sr(bicubic, [sim_pair])
        assert all(np.isfinite(v) and v < 60.0 for v in rep.per_band.values())

    def test_band_subset(self, sim_pair):
        def oracle(x):
            return torch.from_numpy(sim_pair["hr"][0][1:2].copy())[None]

        rep = ev.evaluate_sr(oracle, [sim_pair], bands="g")
        assert list(rep.per_band) == ["g"]

    def test_missing_hr_rejected(self, sim_pair):
        bare = {k: v for k, v in sim_pair.items() if k != "hr"}
        with pytest.raises(DataError):
            ev.evaluate_sr(lambda x: x, [bare])


class TestBicubicBaseline:
    def test_decimation_inverts_upsample(self):
        img = np.random.default_rng(6).random((16, 16))
        up = ev.bicubic_upsample_x2(img)
        assert up.shape == (32, 32)
        assert np.abs(up[::2, ::2] - img).max() <= 1e-12

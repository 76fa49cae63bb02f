import math

import numpy as np
import pytest

from conftest import make_cloud
from lidarbiomass.errors import DataError
from lidarbiomass.las_io import GROUND_CLASS
from lidarbiomass.waveform import (FootprintConfig, NoGroundError, Waveform,
                                   als_cover, ancillary_metrics, cover_metrics,
                                   decompose, find_ground, footprint_metrics,
                                   footprint_weights, profile_metrics,
                                   rh_metrics, simulate_footprint,
                                   write_waveform)

CFG = FootprintConfig(center=(0.0, 0.0))


def hand_waveform(elev_lo, elev_hi, bin_size, energy_at, noise_threshold=None,
                  pulse_sigma=0.5, width=None, ground_energy_zero=False):
    """Build a Waveform with Gaussian energy blobs at (elevation, amount) pairs.

    Each blob gets the pulse width unless `width` overrides it; zero width
    plants a raw single-bin spike.
    """
    from scipy.special import ndtr

    nbins = int(round((elev_hi - elev_lo) / bin_size))
    edges = elev_lo + np.arange(nbins + 1) * bin_size
    centers = edges[:-1] + bin_size / 2.0
    amp = np.zeros(nbins)
    sigma = pulse_sigma if width is None else width
    for z, e in energy_at:
        if sigma <= 0:
            amp[int(np.clip((z - elev_lo) / bin_size, 0, nbins - 1))] += e
        else:
            amp += e * np.diff(ndtr((edges - z) / sigma))
    threshold = noise_threshold if noise_threshold is not None else 1e-9 * amp.max()
    return Waveform(
        wave_id="hand", elevation=centers[::-1].copy(), amplitude=amp[::-1].copy(),
        bin_size=bin_size, noise_threshold=threshold, pulse_sigma=pulse_sigma,
        ground_energy=np.zeros(nbins) if ground_energy_zero else None)


def two_layer_cloud(rng, ground_z=100.0, canopy_z=115.0, n_ground=600,
                    n_canopy=500, spread=12.0):
    gx = rng.uniform(-spread, spread, n_ground)
    gy = rng.uniform(-spread, spread, n_ground)
    cx = rng.uniform(-spread, spread, n_canopy)
    cy = rng.uniform(-spread, spread, n_canopy)
    return make_cloud(
        np.concatenate([gx, cx]), np.concatenate([gy, cy]),
        np.concatenate([np.full(n_ground, ground_z), np.full(n_canopy, canopy_z)]),
        classification=np.concatenate([np.full(n_ground, GROUND_CLASS),
                                       np.full(n_canopy, 5)]))


class TestSimulate:
    def test_single_point_energy_normalized(self):
        cloud = make_cloud([0.0], [0.0], [100.0])
        wf = simulate_footprint(cloud, CFG)
        # lone unclassified return at the center: weight = rho_v exactly
        assert wf.total_energy == pytest.approx(CFG.rho_v, rel=1e-6)
        idx = np.argmax(wf.amplitude)
        assert wf.elevation[idx] == pytest.approx(100.0, abs=CFG.bin_size)

    def test_two_points_two_modes(self):
        cloud = make_cloud([0.0, 0.0], [0.0, 0.0], [100.0, 115.0])
        wf = simulate_footprint(cloud, CFG)
        comps = decompose(wf)
        assert len(comps) == 2
        assert comps[0].center == pytest.approx(100.0, abs=0.3)
        assert comps[1].center == pytest.approx(115.0, abs=0.3)

    def test_flat_ground_centroid(self, rng):
        n = 400
        cloud = make_cloud(rng.uniform(-10, 10, n), rng.uniform(-10, 10, n),
                           np.full(n, 250.0),
                           classification=np.full(n, GROUND_CLASS))
        wf = simulate_footprint(cloud, CFG)
        centroid = float(np.average(wf.elevation, weights=wf.amplitude))
        assert centroid == pytest.approx(250.0, abs=CFG.bin_size / 2)

    def test_energy_conservation_random_scenes(self, rng):
        for _ in range(20):
            n = int(rng.integers(5, 300))
            cloud = make_cloud(
                rng.uniform(-20, 20, n), rng.uniform(-20, 20, n),
                rng.uniform(50, 90, n),
                classification=rng.choice([0, GROUND_CLASS], n))
            sel, w = footprint_weights(cloud, CFG)
            if not sel.any():
                continue
            wf = simulate_footprint(cloud, CFG)
            assert wf.total_energy == pytest.approx(float(w[sel].sum()), rel=1e-6)

    def test_empty_footprint(self):
        cloud = make_cloud([500.0], [500.0], [10.0])
        with pytest.raises(DataError):
            simulate_footprint(cloud, CFG)

    def test_ground_weight_uses_ground_reflectance(self):
        ground = make_cloud([0.0], [0.0], [10.0],
                            classification=[GROUND_CLASS])
        wf = simulate_footprint(ground, CFG)
        assert wf.total_energy == pytest.approx(CFG.rho_g, rel=1e-6)

    def test_noisy_waveform_denoised_nonnegative(self, rng):
        cloud = two_layer_cloud(rng)
        cfg = FootprintConfig(center=(0.0, 0.0), noise_std=0.05, noise_seed=42)
        wf = simulate_footprint(cloud, cfg)
        assert np.all(wf.amplitude >= 0.0)
        assert wf.noise_threshold > 0.0
        fit = find_ground(wf)
        assert fit.gheight == pytest.approx(100.0, abs=0.5)


class TestFindGround:
    def test_single_gaussian_ground(self, rng):
        n = 500
        cloud = make_cloud(rng.uniform(-12, 12, n), rng.uniform(-12, 12, n),
                           100.0 + rng.normal(0, 0.05, n),
                           classification=np.full(n, GROUND_CLASS))
        fit = find_ground(simulate_footprint(cloud, CFG))
        assert fit.gheight == pytest.approx(100.0, abs=0.2)
        assert fit.max_ground == pytest.approx(100.0, abs=0.2)
        assert fit.infl_ground == pytest.approx(100.0, abs=0.2)

    def test_two_component_scene(self, rng):
        cloud = two_layer_cloud(rng)
        fit = find_ground(simulate_footprint(cloud, CFG))
        assert fit.gheight == pytest.approx(100.0, abs=0.5)
        assert fit.max_ground == pytest.approx(100.0, abs=0.5)
        assert fit.infl_ground == pytest.approx(100.0, abs=0.5)

    def test_canopy_only_raises(self, rng):
        n = 300
        cloud = make_cloud(rng.uniform(-10, 10, n), rng.uniform(-10, 10, n),
                           rng.uniform(114, 116, n),
                           classification=np.full(n, 5))
        wf = simulate_footprint(cloud, CFG)
        with pytest.raises(NoGroundError):
            find_ground(wf)


class TestRhMetrics:
    def test_symmetric_gaussian_rh50_zero(self, rng):
        n = 800
        cloud = make_cloud(rng.uniform(-12, 12, n), rng.uniform(-12, 12, n),
                           np.full(n, 100.0), classification=np.full(n, GROUND_CLASS))
        wf = simulate_footprint(cloud, CFG)
        rh = rh_metrics(wf, 100.0)
        assert rh[50] == pytest.approx(0.0, abs=wf.bin_size / 2)

    def test_spike_far_above_ground(self):
        wf = hand_waveform(95.0, 125.0, 0.15, [(120.0, 10.0)], width=0.0)
        rh = rh_metrics(wf, 100.0)
        for p in range(1, 101):
            assert rh[p] == pytest.approx(20.0, abs=1.01 * wf.bin_size)

    def test_two_equal_spikes_cumulative_oracle(self):
        wf = hand_waveform(95.0, 125.0, 0.15, [(100.0, 5.0), (110.0, 5.0)],
                           width=0.0)
        rh = rh_metrics(wf, 100.0)
        # cumulative crosses 50% inside the lower spike's bin, 75% at the upper
        assert rh[40] == pytest.approx(0.0, abs=1.01 * wf.bin_size)
        assert rh[75] == pytest.approx(10.0, abs=1.01 * wf.bin_size)
        assert rh[100] == pytest.approx(10.0, abs=1.01 * wf.bin_size)

    def test_nondecreasing(self, rng):
        cloud = two_layer_cloud(rng)
        wf = simulate_footprint(cloud, CFG)
        fit = find_ground(wf)
        for ground in (fit.gheight, fit.max_ground, fit.infl_ground):
            rh = rh_metrics(wf, ground)
            assert np.all(np.diff(rh) >= -1e-9)

    def test_ground_above_signal_rejected(self):
        wf = hand_waveform(95.0, 105.0, 0.15, [(100.0, 5.0)], width=0.0)
        with pytest.raises(DataError):
            rh_metrics(wf, 200.0)


class TestCoverMetrics:
    def test_ground_only_cover_zero(self, rng):
        n = 500
        cloud = make_cloud(rng.uniform(-12, 12, n), rng.uniform(-12, 12, n),
                           np.full(n, 100.0), classification=np.full(n, GROUND_CLASS))
        wf = simulate_footprint(cloud, CFG)
        cov = cover_metrics(wf, find_ground(wf))
        assert cov["cover"] == pytest.approx(0.0, abs=0.02)

    def test_direct_formula_value(self):
        # Iv = Ig with the published reflectance ratio
        iv = ig = 3.0
        from lidarbiomass.waveform import _cover_from_ground_energy
        cover = _cover_from_ground_energy(iv, ig, 0.57, 0.4)
        assert cover == pytest.approx(1.0 / (1.0 + 0.57 / 0.4), rel=1e-12)
        assert cover == pytest.approx(0.412, abs=5e-4)

    def test_cover_increases_with_canopy_energy(self, rng):
        covers = []
        for n_canopy in (100, 300, 600):
            cloud = two_layer_cloud(rng, n_ground=400, n_canopy=n_canopy)
            wf = simulate_footprint(cloud, CFG)
            covers.append(cover_metrics(wf, find_ground(wf))["cover"])
        assert covers[0] < covers[1] < covers[2]

    def test_half_cover_variants_close_on_clean_scene(self, rng):
        cloud = two_layer_cloud(rng)
        wf = simulate_footprint(cloud, CFG)
        cov = cover_metrics(wf, find_ground(wf))
        assert cov["bayHalfCov"] == cov["gaussHalfCov"]
        for key in ("gaussHalfCov", "maxHalfCov", "infHalfCov"):
            assert cov[key] == pytest.approx(cov["cover"], abs=0.1)

    def test_als_cover_matches_geometric_cover(self, rng):
        # half the footprint area covered: first-return split recovers 0.5
        n = 4000
        x = rng.uniform(-12.5, 12.5, n)
        y = rng.uniform(-12.5, 12.5, n)
        canopy = x < 0
        cloud = make_cloud(x, y, np.where(canopy, 115.0, 100.0),
                           classification=np.where(canopy, 5, GROUND_CLASS))
        assert als_cover(cloud, CFG) == pytest.approx(0.5, abs=0.05)


class TestProfileMetrics:
    def _fit_for(self, wf):
        return find_ground(wf)

    def test_fhd_single_layer_zero(self):
        wf = hand_waveform(90.0, 120.0, 0.15,
                           [(100.0, 8.0), (110.5, 2.0), (110.6, 2.0)],
                           pulse_sigma=0.15)
        fit = find_ground(wf)
        rh = rh_metrics(wf, fit.gheight)
        out, _ = profile_metrics(wf, fit, rh)
        assert out["FHD"] == pytest.approx(0.0, abs=0.05)

    def test_fhd_two_equal_layers(self):
        wf = hand_waveform(90.0, 130.0, 0.15,
                           [(100.0, 8.0), (110.5, 2.0), (115.5, 2.0)],
                           pulse_sigma=0.15)
        fit = find_ground(wf)
        rh = rh_metrics(wf, fit.gheight)
        out, _ = profile_metrics(wf, fit, rh)
        assert out["FHD"] == pytest.approx(math.log(2.0), abs=0.05)

    def test_ni_metrics_direct_sum(self):
        rh = np.full(101, 7.0)
        wf = hand_waveform(90.0, 120.0, 0.15, [(100.0, 5.0), (110.0, 5.0)],
                           pulse_sigma=0.15)
        fit = find_ground(wf)
        out, _ = profile_metrics(wf, fit, rh)
        assert out["niM2"] == pytest.approx(101 * 49.0, rel=1e-12)
        assert out["niM2.1"] == pytest.approx(101 * 7.0 ** 2.1, rel=1e-12)

    def test_negative_rh_clamped(self):
        rh = np.concatenate([np.full(50, -3.0), np.full(51, 2.0)])
        wf = hand_waveform(90.0, 120.0, 0.15, [(100.0, 5.0), (110.0, 5.0)],
                           pulse_sigma=0.15)
        fit = find_ground(wf)
        out, _ = profile_metrics(wf, fit, rh)
        assert out["niM2"] == pytest.approx(51 * 4.0, rel=1e-12)

    def test_lai_bins_partition_profile(self, rng):
        cloud = two_layer_cloud(rng, canopy_z=115.0)
        wf = simulate_footprint(cloud, CFG)
        fit = find_ground(wf)
        rh = rh_metrics(wf, fit.gheight)
        out, _ = profile_metrics(wf, fit, rh)
        assert out["gLAI10t20"] > 0.0   # canopy sits 15 m up
        assert out["gLAI0t10"] >= 0.0
        # only the truncated pulse tail can reach past 20 m
        assert out["gLAI20t30"] == pytest.approx(0.0, abs=1e-4)


class TestAncillary:
    def test_single_spike_signal_extent(self):
        wf = hand_waveform(90.0, 120.0, 0.15, [(101.3, 4.0)], width=0.0)
        fit = find_ground(wf)
        out, _ = ancillary_metrics(
            wf, make_cloud([0.0], [0.0], [101.3]), CFG, fit)
        assert out["signalTop"] == pytest.approx(101.3, abs=wf.bin_size)
        assert out["signalBottom"] == pytest.approx(101.3, abs=wf.bin_size)

    def test_point_density_formula(self, rng):
        n = 100
        r = np.sqrt(rng.uniform(0, 1, n)) * 12.0
        theta = rng.uniform(0, 2 * np.pi, n)
        cloud = make_cloud(r * np.cos(theta), r * np.sin(theta),
                           np.full(n, 100.0),
                           classification=np.full(n, GROUND_CLASS))
        wf = simulate_footprint(cloud, CFG)
        out, _ = ancillary_metrics(wf, cloud, CFG, find_ground(wf))
        expected = 100.0 / (math.pi * 12.5 ** 2)
        assert out["pointDense"] == pytest.approx(expected, rel=1e-9)
        assert out["beamDense"] == pytest.approx(expected, rel=1e-9)

    def test_flat_ground_slope_near_zero(self, rng):
        n = 800
        cloud = make_cloud(rng.uniform(-12, 12, n), rng.uniform(-12, 12, n),
                           np.full(n, 100.0), classification=np.full(n, GROUND_CLASS))
        wf = simulate_footprint(cloud, CFG)
        out, _ = ancillary_metrics(wf, cloud, CFG, find_ground(wf))
        assert abs(out["groundSlope"]) <= 1.0

    def test_true_ground_weighted_cog(self, rng):
        cloud = two_layer_cloud(rng, ground_z=123.4, canopy_z=138.4)
        wf = simulate_footprint(cloud, CFG)
        out, _ = ancillary_metrics(wf, cloud, CFG, find_ground(wf))
        assert out["trueGround"] == pytest.approx(123.4, abs=0.1)
        assert out["trueTop"] == pytest.approx(138.4, abs=0.1)

    def test_single_mode_understory_flags(self, rng):
        n = 400
        cloud = make_cloud(rng.uniform(-12, 12, n), rng.uniform(-12, 12, n),
                           np.full(n, 100.0), classification=np.full(n, GROUND_CLASS))
        wf = simulate_footprint(cloud, CFG)
        out, undefined = ancillary_metrics(wf, cloud, CFG, find_ground(wf))
        assert {"groundOverlap", "groundMin", "groundInfl"} <= undefined

    def test_blair_sense_saturates_without_noise(self, rng):
        cloud = two_layer_cloud(rng)
        wf = simulate_footprint(cloud, CFG)
        out, _ = ancillary_metrics(wf, cloud, CFG, find_ground(wf))
        assert out["blairSense"] == 1.0

    def test_blair_sense_with_noise_in_unit_interval(self, rng):
        cloud = two_layer_cloud(rng)
        cfg = FootprintConfig(center=(0.0, 0.0), noise_std=0.02, noise_seed=7)
        wf = simulate_footprint(cloud, cfg)
        out, _ = ancillary_metrics(wf, cloud, cfg, find_ground(wf))
        assert 0.0 < out["blairSense"] < 1.0


class TestInvariants:
    def test_scale_invariance(self, rng):
        cloud = two_layer_cloud(rng)
        wf = simulate_footprint(cloud, CFG)
        doubled = wf.scaled(2.0)
        fit = find_ground(wf)
        fit2 = find_ground(doubled)
        rh1 = rh_metrics(wf, fit.gheight)
        rh2 = rh_metrics(doubled, fit2.gheight)
        assert np.allclose(rh1, rh2, atol=1e-6)
        cov1 = cover_metrics(wf, fit)["cover"]
        cov2 = cover_metrics(doubled, fit2)["cover"]
        assert cov1 == pytest.approx(cov2, abs=1e-6)
        assert doubled.total_energy == pytest.approx(2.0 * wf.total_energy, rel=1e-12)

    def test_footprint_metrics_assembly(self, rng):
        cloud = two_layer_cloud(rng)
        values, undefined, wf = footprint_metrics(cloud, CFG, wave_id="t")
        assert values["lat"] == 0.0
        for p in range(0, 101, 5):
            for prefix in ("rhGauss", "rhMax", "rhInfl", "rhReal"):
                assert f"{prefix}{p}" in values
        # the canopy layer sits at 15 m; the waveform's top extends past it
        # by the pulse tail (truncated at 6 pulse sigmas)
        tail = 6.0 * CFG.sigma_pulse + CFG.bin_size
        assert 15.0 - 0.5 <= values["rhGauss100"] <= 15.0 + tail + 0.5
        assert values["rhReal100"] == pytest.approx(15.0, abs=0.5)

    def test_waveform_dump_format(self, rng, tmp_path):
        cloud = two_layer_cloud(rng)
        wf = simulate_footprint(cloud, CFG, wave_id="dump_test")
        path = tmp_path / "wf.txt"
        write_waveform(wf, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "wave_id dump_test"
        assert lines[1].startswith("center_x ")
        assert lines[4].startswith("noise ")
        assert lines[5] == "elevation amplitude"
        assert len(lines) == 6 + wf.elevation.size

import numpy as np
import pytest

from lidarbiomass.errors import DataError
from lidarbiomass.las_io import GROUND_CLASS
from lidarbiomass.synth import SceneSpec, decimate, dbh_from_height, generate


class TestGenerate:
    def test_zero_stems_gives_ground_only(self):
        spec = SceneSpec(stem_density=0.0, point_density=5.0, seed=1)
        cloud, inventory = generate(spec)
        assert len(inventory.trees) == 0
        assert np.all(cloud.classification == GROUND_CLASS)

    def test_single_tree_truth_matches_allometry(self):
        from lidarbiomass.allometry import tree_agb
        spec = SceneSpec(stem_density=10.0, height_range=(8.0, 8.0),
                         point_density=5.0, seed=2)
        cloud, inventory = generate(spec)
        assert len(inventory.trees) == 1
        tree = inventory.trees[0]
        assert inventory.agb_total_kg == pytest.approx(
            tree_agb(tree.wood_density, tree.dbh, tree.height), rel=1e-12)

    def test_early_plot_band(self):
        # young stand: 890 stems/ha topping out near 8 m
        spec = SceneSpec(stem_density=890.0, height_range=(2.5, 8.0),
                         height_skew=2.0, point_density=10.0, seed=42)
        _, inventory = generate(spec)
        agbt = inventory.agb_total_kg / 1000.0 * 10_000.0 / inventory.area_m2
        assert 20.0 <= agbt <= 26.0

    def test_same_seed_bit_identical(self):
        spec = SceneSpec(stem_density=500.0, point_density=8.0, seed=7)
        a, inv_a = generate(spec)
        b, inv_b = generate(spec)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.z, b.z)
        assert np.array_equal(a.classification, b.classification)
        assert [t.dbh for t in inv_a.trees] == [t.dbh for t in inv_b.trees]

    def test_apex_sampled(self):
        spec = SceneSpec(stem_density=800.0, height_range=(3.0, 14.0),
                         point_density=10.0, seed=3)
        cloud, inventory = generate(spec)
        tallest = max(t.height for t in inventory.trees)
        assert cloud.z.max() >= spec.ground_elevation + tallest - 0.2

    def test_ground_classification_true(self):
        spec = SceneSpec(stem_density=600.0, point_density=10.0, seed=4)
        cloud, _ = generate(spec)
        ground = cloud.classification == GROUND_CLASS
        truth = np.asarray(spec.ground_z(cloud.x[ground], cloud.y[ground]))
        assert np.abs(cloud.z[ground] - truth).max() < 0.25

    def test_overlap_cap(self):
        spec = SceneSpec(stem_density=60_000.0, height_range=(15.0, 25.0),
                         point_density=1.0, seed=5)
        with pytest.raises(DataError):
            generate(spec)

    def test_dbh_rule_monotone_and_clamped(self):
        heights = np.array([1.0, 3.0, 10.0, 20.0])
        dbh = dbh_from_height(heights)
        assert np.all(np.diff(dbh) >= 0)
        assert dbh[0] == 5.0  # census floor
        assert dbh[2] == pytest.approx(2.2 * 10 ** 1.1)

    def test_sloped_scene_points_follow_plane(self):
        spec = SceneSpec(stem_density=0.0, ground_slope=(0.1, 0.05),
                         point_density=5.0, seed=6)
        cloud, _ = generate(spec)
        expected = np.asarray(spec.ground_z(cloud.x, cloud.y))
        assert np.abs(cloud.z - expected).max() < 0.25


class TestDecimate:
    def test_fraction_kept(self, rng):
        spec = SceneSpec(stem_density=300.0, point_density=10.0, seed=8)
        cloud, _ = generate(spec)
        thinned = decimate(cloud, 0.25, seed=1)
        assert len(thinned) == round(0.25 * len(cloud))

    def test_full_fraction_identity(self):
        spec = SceneSpec(stem_density=100.0, point_density=5.0, seed=9)
        cloud, _ = generate(spec)
        assert decimate(cloud, 1.0, seed=1) is cloud

    def test_deterministic(self):
        spec = SceneSpec(stem_density=100.0, point_density=5.0, seed=10)
        cloud, _ = generate(spec)
        a = decimate(cloud, 0.5, seed=3)
        b = decimate(cloud, 0.5, seed=3)
        assert np.array_equal(a.x, b.x)

    def test_bad_fraction(self):
        spec = SceneSpec(stem_density=10.0, point_density=5.0, seed=11)
        cloud, _ = generate(spec)
        with pytest.raises(ValueError):
            decimate(cloud, 0.0)

"""Dataset generation, splitting, and CSV round trips."""

import math

import numpy as np
import pytest

from flowprune import data


def test_gaussians_geometry():
    ds = data.make_dataset("gaussians", 6000, seed=3)
    assert ds.points.shape == (6000, 2)
    assert ds.mode_centers.shape == (6, 2)
    # centers on radius-4 circle starting at angle 0
    assert np.allclose(np.linalg.norm(ds.mode_centers, axis=1), 4.0)
    assert np.allclose(ds.mode_centers[0], [4.0, 0.0])
    assert ds.mode_sigma == 0.5


def test_gaussians_mode_statistics():
    ds = data.make_dataset("gaussians", 12000, seed=7)
    d = np.linalg.norm(ds.points[:, None, :] - ds.mode_centers[None], axis=2)
    nearest = np.argmin(d, axis=1)
    counts = np.bincount(nearest, minlength=6)
    # equal weights: each mode near n/6 up to sampling noise
    assert counts.min() > 12000 / 6 * 0.85
    assert counts.max() < 12000 / 6 * 1.15
    # ~86.5% of isotropic 2D Gaussian mass lies within 2 sigma
    frac = np.mean(np.min(d, axis=1) <= 2 * ds.mode_sigma)
    assert abs(frac - (1 - math.exp(-2.0))) < 0.02


def test_gaussian_spiral_centers():
    ds = data.make_dataset("gaussian_spiral", 100, seed=0)
    assert ds.mode_centers.shape == (8, 2)
    phis = np.linspace(0, 3 * math.pi, 8)
    r = 0.5 + 0.35 * phis
    assert np.allclose(np.linalg.norm(ds.mode_centers, axis=1), r)
    assert ds.mode_sigma == 0.25


def test_spirals_arms_follow_radius_law():
    ds = data.make_dataset("spirals", 4000, seed=1, noise=0.0)
    r = np.linalg.norm(ds.points, axis=1)
    # noiseless points sit exactly on r = 0.5 + 0.35 * phi for some phi in range
    assert r.min() >= 0.5 - 1e-9
    assert r.max() <= 0.5 + 0.35 * 3 * math.pi + 1e-9


def test_moons_shapes_and_labels():
    ds = data.make_dataset("moons", 4000, seed=2, noise=0.0)
    assert ds.labels is not None
    a = ds.points[ds.labels == 0]
    b = ds.points[ds.labels == 1]
    assert np.allclose(np.linalg.norm(a, axis=1), 1.0)
    assert np.allclose(np.linalg.norm(b - np.array([1.0, 0.5]), axis=1), 1.0)
    # upper arm spans y in [0, 1], lower arm dips to y = -0.5
    assert a[:, 1].min() >= -1e-9
    assert b[:, 1].min() < -0.4


def test_determinism_and_seed_sensitivity():
    d1 = data.make_dataset("gaussians", 500, seed=11)
    d2 = data.make_dataset("gaussians", 500, seed=11)
    d3 = data.make_dataset("gaussians", 500, seed=12)
    assert np.array_equal(d1.points, d2.points)
    assert not np.array_equal(d1.points, d3.points)


def test_geometry_overrides_and_validation():
    ds = data.make_dataset("gaussians", 50, seed=0, k_modes=3, radius=2.0, sigma=0.1)
    assert ds.mode_centers.shape == (3, 2)
    assert np.allclose(np.linalg.norm(ds.mode_centers, axis=1), 2.0)
    with pytest.raises(ValueError):
        data.make_dataset("gaussians", 50, seed=0, bogus=1)
    with pytest.raises(ValueError):
        data.make_dataset("nope", 50, seed=0)
    with pytest.raises(ValueError):
        data.make_dataset("gaussians", 0, seed=0)


def test_split_sizes_floor():
    ds = data.make_dataset("moons", 10, seed=0)
    tr, va, te = data.split(ds, (0.8, 0.1, 0.1), seed=5)
    assert (tr.n, va.n, te.n) == (8, 1, 1)
    ds2 = data.make_dataset("moons", 2560, seed=0)
    tr, va, te = data.split(ds2, (0.8, 0.1, 0.1), seed=5)
    assert (tr.n, va.n, te.n) == (2048, 256, 256)


def test_split_partitions_points():
    ds = data.make_dataset("moons", 101, seed=4)
    tr, va, te = data.split(ds, seed=9)
    assert tr.n + va.n + te.n == 101
    merged = np.concatenate([tr.points, va.points, te.points])
    assert np.array_equal(np.sort(merged, axis=0), np.sort(ds.points, axis=0))
    labs = np.concatenate([tr.labels, va.labels, te.labels])
    assert labs.sum() == ds.labels.sum()
    # deterministic in the split seed, different for another seed
    tr2, _, _ = data.split(ds, seed=9)
    tr3, _, _ = data.split(ds, seed=10)
    assert np.array_equal(tr.points, tr2.points)
    assert not np.array_equal(tr.points, tr3.points)


def test_split_validation():
    ds = data.make_dataset("moons", 10, seed=0)
    with pytest.raises(ValueError):
        data.split(ds, (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        data.split(ds, (0.9, 0.09, 0.01))  # no test points at n=10
    with pytest.raises(ValueError):
        data.split(data.make_dataset("moons", 2, seed=0))


def test_csv_round_trip(tmp_path):
    for kind in ("gaussians", "moons"):
        ds = data.make_dataset(kind, 64, seed=6)
        p = str(tmp_path / f"{kind}.csv")
        data.to_csv(ds, p)
        back = data.from_csv(p)
        assert back.kind == kind
        assert np.array_equal(back.points, ds.points)
        if ds.labels is None:
            assert back.labels is None
        else:
            assert np.array_equal(back.labels, ds.labels)
        if ds.mode_centers is None:
            assert back.mode_centers is None
        else:
            assert np.array_equal(back.mode_centers, ds.mode_centers)
            assert back.mode_sigma == ds.mode_sigma
        assert back.geometry == ds.geometry
        assert back.seed == ds.seed


def test_subset_keeps_metadata():
    ds = data.make_dataset("gaussians", 40, seed=1)
    sub = ds.subset(np.arange(5))
    assert sub.n == 5
    assert np.array_equal(sub.mode_centers, ds.mode_centers)
    assert sub.mode_sigma == ds.mode_sigma
    assert sub.kind == ds.kind

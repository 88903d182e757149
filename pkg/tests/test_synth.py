import numpy as np
import pytest

from stackfit.conic_geometry import GeometricEllipse, algebraic_distance, geometric_to_conic
from stackfit.synth import (
    BenchRecord,
    SplitMix64,
    SynthSpec,
    bench_csv,
    crossover_count,
    derive_seed,
    render_ellipsoid,
    run_robustness_bench,
    sample_ellipse_points,
    sample_uniform_noise,
    synth_stack,
    synth_volume,
)

TRUTH = GeometricEllipse((0.0, 0.0), (1.5, 0.8), 0.0)


def test_splitmix_reference_values():
    # reference outputs of the public-domain splitmix64 for state 0
    out = SplitMix64(0).next_u64(3)
    assert [int(v) for v in out] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_splitmix_streams():
    a, b = SplitMix64(5), SplitMix64(5)
    np.testing.assert_array_equal(np.concatenate([a.uniform(3), a.uniform(4)]), b.uniform(7))
    u = SplitMix64(9).uniform(10000)
    assert u.min() >= 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.01
    g = SplitMix64(9).normal(20001)
    assert abs(g.mean()) < 0.03 and abs(g.std() - 1) < 0.03
    assert derive_seed(1, 2) != derive_seed(1, 3) != derive_seed(2, 2)
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)


def test_ellipse_points_exact_without_jitter():
    e = GeometricEllipse((1, -2), (3, 1), 0.7)
    pts = sample_ellipse_points(e, 200, 0.0, 3)
    theta = geometric_to_conic(e)
    assert np.max(np.abs(algebraic_distance(theta, pts))) < 1e-12


def test_ellipse_points_small_n_distinct():
    pts = sample_ellipse_points(TRUTH, 4, 0.0, 1)
    assert len({tuple(p) for p in pts.tolist()}) == 4
    with pytest.raises(ValueError):
        sample_ellipse_points(TRUTH, 0, 0.0, 1)


def test_ellipse_points_jitter():
    theta = geometric_to_conic(GeometricEllipse((0, 0), (1, 1), 0))
    pts = sample_ellipse_points(GeometricEllipse((0, 0), (1, 1), 0), 1000, 0.01, 4)
    assert np.mean(np.abs(algebraic_distance(theta, pts))) < 0.05
    assert np.mean(np.abs(algebraic_distance(theta, pts))) > 0


def test_uniform_noise():
    assert sample_uniform_noise(0, (-3, 3), 1).shape == (0, 2)
    pts = sample_uniform_noise(10000, (-3, 3), 2)
    assert pts.min() >= -3 and pts.max() <= 3
    assert np.all(np.abs(pts.mean(axis=0)) < 0.1)
    with pytest.raises(ValueError):
        sample_uniform_noise(-1, (-3, 3), 1)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(noise_interval=(1, 1))
    with pytest.raises(ValueError):
        SynthSpec(noise_counts=(10, 0))
    with pytest.raises(ValueError):
        SynthSpec(n_inliers=0)


def test_bench_clean_row():
    (rec,) = run_robustness_bench(SynthSpec(noise_counts=(0,)))
    assert rec.noise_count == 0
    assert rec.err_squared < 1e-6 and rec.err_robust < 0.05


def test_bench_rows_independent_of_order():
    a = run_robustness_bench(SynthSpec(noise_counts=(0, 20, 40)))
    b = run_robustness_bench(SynthSpec(noise_counts=(40,)))
    assert a[2].err_robust == b[0].err_robust and a[2].err_squared == b[0].err_squared


def test_bench_heavy_noise_hurts_both():
    spec = SynthSpec(noise_counts=(500,))
    (rec,) = run_robustness_bench(spec)
    assert rec.err_squared > 0.2 and rec.err_robust > 0.2


@pytest.mark.slow
def test_bench_robust_beats_squared_across_seeds():
    wins = 0
    for seed in range(20):
        recs = run_robustness_bench(SynthSpec(noise_counts=(25, 50, 75), seed=seed))
        wins += all(r.err_robust < r.err_squared for r in recs[1:])
    assert wins >= 18


def test_crossover_and_ties():
    recs = [BenchRecord(0, 1e-16, 2e-16), BenchRecord(10, 1.0, 0.5), BenchRecord(20, 1.0, 0.6)]
    assert crossover_count(recs) == 10
    assert crossover_count([BenchRecord(0, 0, 0), BenchRecord(10, 0.5, 0.9)]) is None
    assert crossover_count([BenchRecord(0, 1.0, 0.0), BenchRecord(10, 1.0, 0.5)]) == 0


def test_bench_csv_format():
    txt = bench_csv([BenchRecord(0, 0.0, -0.0), BenchRecord(10, float("nan"), 0.125)])
    assert txt == "noise_count,err_squared,err_robust\n0,0,0\n10,ERROR,0.125\n"


def test_volume_peak_and_determinism():
    blobs = [((10, 12, 8), (2, 3, 1.5), 2.0)]
    v = synth_volume(blobs, (24, 20, 16))
    z, y, x = np.unravel_index(np.argmax(v.data), v.data.shape)
    assert (x, y, z) == (10, 12, 8) and v.data[z, y, x] == pytest.approx(2.0)
    a = synth_volume(blobs, (24, 20, 16), 0.3, 11)
    b = synth_volume(blobs, (24, 20, 16), 0.3, 11)
    np.testing.assert_array_equal(a.data, b.data)
    assert a.data.min() >= 0
    with pytest.raises(ValueError):
        synth_volume([((30, 0, 0), (1, 1, 1), 1)], (24, 20, 16))


def test_volume_blobs_superpose():
    b1, b2 = ((5, 5, 5), (1, 2, 1), 1.0), ((9, 3, 7), (2, 1, 1), 0.5)
    dims = (14, 10, 12)
    np.testing.assert_allclose(synth_volume([b1, b2], dims).data,
                               synth_volume([b1], dims).data + synth_volume([b2], dims).data, atol=1e-15)


def test_render_ellipsoid():
    v = render_ellipsoid((20, 20, 20), (10, 10, 10), (6, 4, 3))
    assert v.data[10, 10, 16] == 1 and v.data[10, 10, 17] == 0
    assert v.data[13, 10, 10] == 1 and v.data[14, 10, 10] == 0
    s = render_ellipsoid((20, 20, 20), (10, 10, 10), (6, 4, 3), 2.0, 1.0)
    assert s.data[10, 10, 16] == pytest.approx(2.0) and s.data[10, 10, 10] == pytest.approx(2 * np.exp(-4.5))


def test_synth_stack_cross_sections():
    layers = synth_stack((0, 0, 0), (4, 2, 3), np.arange(-4, 5), 40)
    assert [l.layer_index for l in layers] == [-2, -1, 0, 1, 2]
    for l in layers:
        f = np.sqrt(1 - l.layer_index**2 / 9)
        e = GeometricEllipse((0, 0), (4 * f, 2 * f), 0)
        assert np.max(np.abs(algebraic_distance(geometric_to_conic(e), l.points))) < 1e-12
    assert len(layers[2].points) == 40
    assert len(synth_stack((0, 0, 0), (4, 2, 3), [2.999], 10)[0].points) == 3

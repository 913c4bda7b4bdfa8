import numpy as np
import pytest

from dkm.domains import (
    DomainSpec,
    DomainStats,
    SampleTable,
    TargetShift,
    domain_stats,
    emd,
    emd_brute_force,
    make_benchmark,
    make_pseudo_unseen,
    plane_rotation,
    sample_emd,
    sample_episode,
    synth_dataset,
)


def simple_spec(n=4, d=3, sigma=1.0, seed=0, rotation=None):
    protos = np.random.default_rng(seed).standard_normal((n, d))
    return DomainSpec(
        prototypes=protos,
        sigma_class=sigma,
        rotation=np.eye(d) if rotation is None else rotation,
        scale=np.ones(d),
        shift=np.zeros(d),
    )


def test_zero_noise_samples_equal_prototypes():
    spec = simple_spec(sigma=0.0)
    table = synth_dataset(spec, 5, seed=1)
    np.testing.assert_array_equal(table.x, np.repeat(spec.prototypes, 5, axis=0))
    np.testing.assert_array_equal(table.y, np.repeat(np.arange(4), 5))


def test_class_means_within_clt_bound():
    spec = simple_spec(n=3, d=4, sigma=1.0, seed=2)
    table = synth_dataset(spec, 1000, seed=3)
    for k in range(3):
        mean = table.x[table.y == k].mean(axis=0)
        assert np.all(np.abs(mean - spec.prototypes[k]) < 4 / np.sqrt(1000))


def test_synth_is_deterministic():
    spec = simple_spec()
    a, b = synth_dataset(spec, 7, seed=9), synth_dataset(spec, 7, seed=9)
    assert a.x.tobytes() == b.x.tobytes()
    assert synth_dataset(spec, 7, seed=10).x.tobytes() != a.x.tobytes()


def test_spec_rejects_non_orthogonal_rotation():
    with pytest.raises(ValueError):
        simple_spec(rotation=np.diag([1.0, 2.0, 1.0]))


def test_domain_stats_two_points():
    st = domain_stats(np.array([[0.0, 1.0], [2.0, 1.0]]))
    np.testing.assert_array_equal(st.mu, [1.0, 1.0])
    np.testing.assert_array_equal(st.sigma, [1.0, 0.0])


def test_domain_stats_matches_streaming_oracle():
    x = np.random.default_rng(4).normal(3.0, 2.0, (500, 3))
    # Welford's running update, written out independently
    n, mean, m2 = 0, np.zeros(3), np.zeros(3)
    for row in x:
        n += 1
        delta = row - mean
        mean = mean + delta / n
        m2 = m2 + delta * (row - mean)
    st = domain_stats(x)
    np.testing.assert_allclose(st.mu, mean, rtol=1e-12)
    np.testing.assert_allclose(st.sigma, np.sqrt(m2 / n), rtol=1e-12)


def test_domain_stats_needs_two_rows():
    with pytest.raises(ValueError):
        domain_stats(np.ones((1, 3)))


def test_mixing_lambda_one_is_identity():
    x = np.random.default_rng(5).standard_normal((4, 3))
    st = DomainStats(np.zeros(3), np.ones(3))
    assert make_pseudo_unseen(x, 1.0, st, seed=0).tobytes() == x.tobytes()


def test_mixing_with_injected_noise():
    st = DomainStats(np.zeros(2), np.ones(2))
    out = make_pseudo_unseen(np.ones((1, 2)), 0.5, st, seed=0, noise=np.zeros((1, 2)))
    np.testing.assert_array_equal(out, [[0.5, 0.5]])


@pytest.mark.parametrize("lam", [-0.1, 1.5])
def test_mixing_rejects_lambda_out_of_range(lam):
    with pytest.raises(ValueError):
        make_pseudo_unseen(np.ones((1, 2)), lam, DomainStats(np.zeros(2), np.ones(2)), seed=0)


def test_mixing_monte_carlo_moments():
    lam, n = 0.3, 10_000
    st = DomainStats(np.array([1.0, -2.0]), np.array([0.5, 2.0]))
    x_v = np.tile([4.0, 4.0], (n, 1))
    out = make_pseudo_unseen(x_v, lam, st, seed=7)
    mean_want = lam * 4.0 + (1 - lam) * st.mu
    std_want = (1 - lam) * st.sigma
    np.testing.assert_array_less(np.abs(out.mean(axis=0) - mean_want), 3 * std_want / np.sqrt(n) + 1e-12)
    np.testing.assert_allclose(out.std(axis=0), std_want, rtol=0.05)


def test_mixing_lambda_zero_forgets_input():
    rng = np.random.default_rng(8)
    x_v = rng.standard_normal((2000, 1))
    out = make_pseudo_unseen(x_v, 0.0, DomainStats(np.zeros(1), np.ones(1)), seed=3)
    assert abs(np.corrcoef(x_v[:, 0], out[:, 0])[0, 1]) < 0.05


def episode_table(n_classes=8, per_class=20, d=3):
    rng = np.random.default_rng(0)
    return SampleTable(rng.standard_normal((n_classes * per_class, d)), np.repeat(np.arange(n_classes) * 10, per_class))


@pytest.mark.parametrize("way,shot,query", [(5, 1, 15), (2, 5, 3)])
def test_episode_shapes_and_labels(way, shot, query):
    ep = sample_episode(episode_table(), way, shot, query, seed=1)
    assert ep.support_x.shape == (way * shot, 3)
    assert ep.query_x.shape == (way * query, 3)
    assert sorted(set(ep.support_y)) == list(range(way)) and sorted(set(ep.query_y)) == list(range(way))
    assert len(set(ep.classes)) == way


def test_episode_support_query_disjoint_and_relabelled():
    table = episode_table()
    for seed in range(20):
        ep = sample_episode(table, 5, 2, 4, seed=seed)
        assert not set(ep.support_idx) & set(ep.query_idx)
        # local label k always refers to the same original class
        for idx, local in zip(np.concatenate([ep.support_idx, ep.query_idx]), np.concatenate([ep.support_y, ep.query_y])):
            assert table.y[idx] == ep.classes[local]


def test_episode_errors():
    table = episode_table(n_classes=3, per_class=5)
    with pytest.raises(ValueError):
        sample_episode(table, 4, 1, 1, seed=0)
    with pytest.raises(ValueError):
        sample_episode(table, 2, 3, 3, seed=0)


def test_episode_deterministic():
    table = episode_table()
    a, b = sample_episode(table, 5, 1, 3, seed=11), sample_episode(table, 5, 1, 3, seed=11)
    assert a.query_x.tobytes() == b.query_x.tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_emd_matches_permutation_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    a, b = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
    assert abs(emd(a, b) - emd_brute_force(a, b)) < 1e-9


def test_emd_identity_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((20, 4)), rng.standard_normal((20, 4))
    assert emd(a, a) == 0.0
    assert abs(emd(a, b) - emd(b, a)) < 1e-12
    assert emd(a, b[::-1]) == pytest.approx(emd(a, b), abs=1e-12)


def test_emd_one_dimensional_sorted_matching():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((30, 1)), rng.standard_normal((30, 1))
    want = np.mean(np.abs(np.sort(a[:, 0]) - np.sort(b[:, 0])))
    assert abs(emd(a, b) - want) < 1e-12


def test_emd_guards():
    with pytest.raises(ValueError):
        emd(np.ones((3, 2)), np.ones((4, 2)))
    with pytest.raises(ValueError):
        emd(np.ones((70, 2)), np.ones((70, 2)))


def test_emd_grows_with_rotation_angle():
    angles = (10.0, 45.0, 90.0)
    inversions = 0
    for seed in range(5):
        base = simple_spec(n=6, d=4, sigma=0.3, seed=seed)
        src = synth_dataset(base, 10, seed=100 + seed).x
        dists = []
        for ang in angles:
            rot = DomainSpec(base.prototypes, 0.3, plane_rotation(4, ang), np.ones(4), np.zeros(4))
            dists.append(sample_emd(src, synth_dataset(rot, 10, seed=200 + seed).x, 60, seed=seed))
        inversions += sum(b < a for a, b in zip(dists, dists[1:]))
    assert inversions <= 1


def test_plane_rotation_orthogonal_and_angle():
    r = plane_rotation(6, 30.0)
    np.testing.assert_allclose(r @ r.T, np.eye(6), atol=1e-14)
    v = np.zeros(6)
    v[0] = 1.0
    assert np.degrees(np.arccos((r @ v) @ v)) == pytest.approx(30.0)


def test_table_csv_roundtrip(tmp_path):
    table = synth_dataset(simple_spec(), 3, seed=4)
    table.to_csv(tmp_path / "t.csv")
    back = SampleTable.from_csv(tmp_path / "t.csv")
    assert back.x.tobytes() == table.x.tobytes() and np.array_equal(back.y, table.y)


def test_benchmark_layout():
    shifts = [TargetShift("a", 20.0, 0.1), TargetShift("b", 75.0, 0.3)]
    bm = make_benchmark(0, n_train=6, n_heldout=2, n_target=4, targets=shifts)
    assert list(bm.targets) == ["a", "b"]
    assert np.all(bm.source.prototypes[:, 8:] == 0)
    assert bm.targets["a"].label_offset != bm.targets["b"].label_offset
    assert not set(bm.source_train_classes) & set(bm.source_heldout_classes)
    again = make_benchmark(0, n_train=6, n_heldout=2, n_target=4, targets=shifts)
    assert again.targets["b"].scale.tobytes() == bm.targets["b"].scale.tobytes()

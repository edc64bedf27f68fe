import math

import numpy as np
import pytest

from mcover import perceptron as pc
from mcover import routing as rt


def make_mcover_setup(n, alpha, m, s_chan, s_perm=5, seed=0, family="ring"):
    rng = np.random.default_rng(seed)
    inst = pc.generate_instance(n, alpha, rng)
    if family == "identity":
        kernel = rt.identity_kernel(m)
    else:
        kernel = rt.gaussian_ring_kernel(m, 1.0, 1.5) if m > 1 else rt.uniform_kernel(1)
    bank = rt.sample_bank(kernel, s_perm, rng)
    dbank = pc.build_destination_bank(n, bank, s_chan, rng)
    ens = pc.random_ensemble(m, n, rng)
    cache = pc.RoutedMarginCache(inst, ens, dbank)
    return inst, dbank, ens, cache


class TestInstance:
    def test_gauge_always_positive(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            inst = pc.generate_instance(21, 0.7, rng)
            t = inst.gauged.astype(np.int64) @ inst.w_star.astype(np.int64)
            assert (t > 0).all()

    def test_pattern_count(self):
        rng = np.random.default_rng(1)
        inst = pc.generate_instance(1000, 1.58, rng)
        assert inst.p == 1580

    def test_gauge_matches_raw_draws(self):
        rng = np.random.default_rng(2)
        inst = pc.generate_instance(4, 1.0, rng)
        # recompute the gauge by hand from the logged raw patterns
        margins = inst.raw_patterns.astype(np.int64) @ inst.w_star.astype(np.int64)
        y = np.sign(margins)
        assert np.array_equal(y, inst.labels)
        assert np.array_equal(inst.gauged, y[:, None] * inst.raw_patterns)

    def test_entries_are_pm_one(self):
        rng = np.random.default_rng(3)
        inst = pc.generate_instance(30, 1.2, rng)
        assert set(np.unique(inst.gauged)) <= {-1, 1}
        assert set(np.unique(inst.w_star)) <= {-1, 1}

    def test_invalid_parameters(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            pc.generate_instance(0, 1.0, rng)
        with pytest.raises(ValueError):
            pc.generate_instance(10, -1.0, rng)


class TestEnergy:
    def test_all_positive_margins(self):
        assert pc.pattern_errors(np.array([0.1, 2.0, 5.0])) == 0

    def test_all_negative_margins(self):
        assert pc.pattern_errors(np.array([-0.1, -2.0, -5.0, -1.0])) == 4

    def test_tie_counts_as_error(self):
        assert pc.pattern_errors(np.array([0.0, 1.0])) == 1

    def test_teacher_has_zero_energy(self):
        rng = np.random.default_rng(5)
        inst = pc.generate_instance(40, 1.5, rng)
        margins = inst.gauged.astype(np.int64) @ inst.w_star.astype(np.int64)
        assert pc.pattern_errors(margins) == 0


class TestGlauber:
    def test_symmetry_point(self):
        assert pc.glauber_flip_probability(0.0, 1.0) == 0.5

    def test_underflow_safe(self):
        assert pc.glauber_flip_probability(1e6, 0.01) == 0.0
        assert pc.glauber_flip_probability(-1e6, 0.01) == 1.0

    def test_reference_value(self):
        assert pc.glauber_flip_probability(2.0, 1.0) == pytest.approx(
            0.11920292202211755, abs=1e-12)

    def test_zero_temperature_limit(self):
        for de in (1.0, 2.0, 5.0):
            assert pc.glauber_flip_probability(de, 1e-6) == 0.0

    def test_invalid_temperature(self):
        with pytest.raises(ValueError):
            pc.glauber_flip_probability(1.0, 0.0)


class TestSchedule:
    def test_reference_sweep_count(self):
        assert pc.AnnealSchedule(0.4, 0.01, 1e-4).num_sweeps == 3900

    def test_monotone_and_hits_t_min(self):
        sched = pc.AnnealSchedule(0.4, 0.01, 1e-4)
        temps = sched.temperatures()
        assert temps.shape[0] == 3900
        assert (np.diff(temps) < 0).all()
        assert temps[0] == 0.4
        assert temps[-1] == 0.01

    def test_invalid(self):
        with pytest.raises(ValueError):
            pc.AnnealSchedule(0.01, 0.4, 1e-4)
        with pytest.raises(ValueError):
            pc.AnnealSchedule(0.4, 0.01, 0.0)


class TestMcoverAnneal:
    def test_m1_bit_identical_to_vanilla(self):
        rng = np.random.default_rng(10)
        inst = pc.generate_instance(80, 1.4, rng)
        kernel = rt.uniform_kernel(1)
        bank = rt.sample_bank(kernel, 10, np.random.default_rng(11))
        dbank = pc.build_destination_bank(80, bank, 10, np.random.default_rng(12))
        w0 = pc.random_ensemble(1, 80, np.random.default_rng(13))
        cache = pc.RoutedMarginCache(inst, w0, dbank)
        sched = pc.AnnealSchedule(0.4, 0.01, 2e-3)
        lifted, tr_l = pc.mcover_anneal(inst, w0, dbank, cache, sched,
                                        np.random.default_rng(99))
        vanilla, tr_v = pc.vanilla_anneal(inst, w0[0], sched,
                                          np.random.default_rng(99))
        assert np.array_equal(lifted[0], vanilla)
        assert tr_l == tr_v

    def test_cache_exact_after_run(self):
        inst, dbank, ens, cache = make_mcover_setup(20, 0.5, 2, 3, seed=20)
        sched = pc.AnnealSchedule(0.4, 0.05, 5e-3)
        final, _ = pc.mcover_anneal(inst, ens, dbank, cache, sched,
                                    np.random.default_rng(21), check_every=10)
        cache.verify(final)

    def test_m1_lifted_energy_equals_base_exhaustive(self):
        # every state of an N = 8 instance: lifted objective == base energy
        rng = np.random.default_rng(22)
        inst = pc.generate_instance(8, 0.75, rng)
        kernel = rt.uniform_kernel(1)
        bank = rt.sample_bank(kernel, 4, rng)
        dbank = pc.build_destination_bank(8, bank, 3, rng)
        for state in range(1 << 8):
            w = np.array([1 if state >> q & 1 else -1 for q in range(8)],
                         dtype=np.int8)[None, :]
            cache = pc.RoutedMarginCache(inst, w, dbank)
            base = pc.pattern_errors(inst.gauged.astype(np.int64) @
                                     w[0].astype(np.int64))
            assert cache.lifted_energy() == base

    def test_identity_routing_reduces_to_base_margins(self):
        inst, dbank, _, _ = make_mcover_setup(30, 1.0, 3, 5, seed=23,
                                              family="identity")
        w = pc.random_ensemble(1, 30, np.random.default_rng(24))
        ens = np.tile(w, (3, 1))
        cache = pc.RoutedMarginCache(inst, ens, dbank)
        base = inst.gauged.astype(np.int64) @ w[0].astype(np.int64)
        for s in range(dbank.n_channels):
            for a in range(3):
                assert np.array_equal(cache.scaled[s, a], base)

    def test_energy_never_increases_at_tiny_temperature(self):
        inst, dbank, ens, cache = make_mcover_setup(40, 1.2, 2, 4, seed=25)
        sched = pc.AnnealSchedule(2e-6, 1e-6, 1e-7)
        start = cache.lifted_energy()
        _, trace = pc.mcover_anneal(inst, ens, dbank, cache, sched,
                                    np.random.default_rng(26))
        energies = [start] + trace
        assert all(b <= a for a, b in zip(energies, energies[1:]))


class TestIncrementalCache:
    def test_random_flip_sequence_stays_exact(self):
        inst, dbank, ens, cache = make_mcover_setup(20, 0.5, 2, 3, seed=30)
        rng = np.random.default_rng(31)
        chan = np.arange(dbank.n_channels)
        for _ in range(500):
            gamma = int(rng.integers(2))
            q = int(rng.integers(20))
            alphas = dbank.inv_perms_ext[dbank.route_idx[q], gamma]
            delta = (-2 * int(ens[gamma, q])) * cache._g_cols[q]
            new = cache.scaled[chan, alphas] + delta
            ens[gamma, q] = -ens[gamma, q]
            cache.scaled[chan, alphas] = new
            cache.slice_errors[chan, alphas] = (new <= 0).sum(axis=1)
        cache.verify(ens)
        assert np.abs(cache.margins -
                      pc.RoutedMarginCache(inst, ens, dbank).margins).max() < 1e-10


class TestRsa:
    def test_gamma_zero_matches_independent_runs(self):
        rng = np.random.default_rng(40)
        inst = pc.generate_instance(50, 1.2, rng)
        ens = pc.random_ensemble(3, 50, rng)
        sched = pc.AnnealSchedule(0.4, 0.05, 5e-3)
        seeds = [101, 102, 103]
        rngs = [np.random.default_rng(s) for s in seeds]
        coupled, _ = pc.rsa_anneal(inst, ens, 0.0, sched, rngs)
        for a, seed in enumerate(seeds):
            solo, _ = pc.vanilla_anneal(inst, ens[a], sched,
                                        np.random.default_rng(seed))
            assert np.array_equal(coupled[a], solo)

    def test_equal_replicas_coupling_energy(self):
        w = pc.random_ensemble(1, 64, np.random.default_rng(41))
        for m in (2, 3, 4):
            replicas = np.tile(w, (m, 1))
            expected = -1.0 * m * (m - 1) / 2
            assert pc.coupling_energy(replicas, 1.0) == pytest.approx(expected)

    def test_flip_changes_coupling_by_formula(self):
        rng = np.random.default_rng(42)
        replicas = pc.random_ensemble(4, 32, rng)
        gamma, n = 1.3, 32
        a, q = 2, 17
        before = pc.coupling_energy(replicas, gamma)
        w_old = int(replicas[a, q])
        rest = int(replicas[:, q].astype(np.int64).sum()) - w_old
        flipped = replicas.copy()
        flipped[a, q] = -w_old
        after = pc.coupling_energy(flipped, gamma)
        assert after - before == pytest.approx((2 * gamma / n) * w_old * rest)

    def test_needs_two_replicas(self):
        rng = np.random.default_rng(43)
        inst = pc.generate_instance(10, 1.0, rng)
        with pytest.raises(ValueError):
            pc.rsa_anneal(inst, pc.random_ensemble(1, 10, rng), 1.0,
                          pc.AnnealSchedule(), [rng])


class TestCollapse:
    def test_teacher_covers_score_perfectly(self):
        rng = np.random.default_rng(50)
        w_star = (rng.integers(0, 2, 16, dtype=np.int8) * 2 - 1).astype(np.int8)
        ens = np.tile(w_star, (3, 1))
        r, eps = pc.collapse_and_score(ens, w_star)
        assert r == 1.0 and eps == 0.0

    def test_orthogonal_collapse(self):
        w_star = np.array([1, -1, 1, -1], dtype=np.int8)
        w = np.array([[1, 1, -1, -1]], dtype=np.int8)
        r, eps = pc.collapse_and_score(w, w_star)
        assert r == 0.0 and eps == 0.5

    def test_benchmark_formula_inversion(self):
        # vanilla benchmark entry 0.1936 corresponds to overlap cos(0.1936 pi)
        r = math.cos(0.1936 * math.pi)
        assert r == pytest.approx(0.8207, abs=5e-5)
        assert pc.overlap_to_error(r) == pytest.approx(0.1936, abs=1e-12)

    def test_degenerate_collapse(self):
        w = np.array([[1, 1], [-1, -1]], dtype=np.int8)
        with pytest.raises(pc.DegenerateCollapseError):
            pc.collapse_and_score(w, np.array([1, 1], dtype=np.int8))

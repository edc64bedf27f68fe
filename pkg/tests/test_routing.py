import itertools
import math

import numpy as np
import pytest
from scipy import stats as sps

from mcover import routing as rt


def enumerated_weights(entries):
    """Independent oracle: brute-force matching weights of a square matrix."""
    m = entries.shape[0]
    weights = {}
    for perm in itertools.permutations(range(m)):
        weights[perm] = math.prod(entries[a, perm[a]] for a in range(m))
    return weights


class TestGaussianRingKernel:
    def test_infinite_width_is_uniform(self):
        k = rt.gaussian_ring_kernel(4, 0.0, math.inf)
        assert np.allclose(k.entries, 0.25)
        assert k.entries.std() == 0.0

    def test_vanishing_width_is_near_identity(self):
        k = rt.gaussian_ring_kernel(4, 0.0, 1e-3)
        assert list(k.entries.argmax(axis=1)) == [0, 1, 2, 3]
        off = k.entries[~np.eye(4, dtype=bool)]
        assert off.max() < 1e-12 * k.entries.diagonal().min()

    def test_unit_shift_peaks_one_over(self):
        # oracle: evaluate exp(-d(b, a+mu)^2 / 2 sigma^2) entrywise, row argmax
        m, mu, sigma = 4, 1.0, 0.5
        raw = np.empty((m, m))
        for a in range(m):
            for b in range(m):
                d = (b - (a + mu)) % m
                if d > m / 2:
                    d -= m
                raw[a, b] = math.exp(-d * d / (2 * sigma * sigma))
        expected = raw.argmax(axis=1)
        k = rt.gaussian_ring_kernel(m, mu, sigma)
        assert np.array_equal(k.entries.argmax(axis=1), expected)
        assert list(expected) == [(a + 1) % m for a in range(m)]

    def test_balanced_after_construction(self):
        k = rt.gaussian_ring_kernel(5, 2.0, 3.0)
        assert np.abs(k.entries.sum(axis=0) - 1).max() < 1e-8
        assert np.abs(k.entries.sum(axis=1) - 1).max() < 1e-8

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            rt.gaussian_ring_kernel(0, 0.0, 1.0)
        with pytest.raises(ValueError):
            rt.gaussian_ring_kernel(4, 0.0, -1.0)
        with pytest.raises(ValueError):
            rt.gaussian_ring_kernel(4, 0.0, 0.0)


class TestSinkhorn:
    def test_uniform_fixed_point(self):
        k = rt.uniform_kernel(5)
        out = rt.sinkhorn_balance(k)
        assert np.array_equal(out.entries, k.entries)

    def test_permutation_matrix_fixed_point(self):
        p = np.zeros((4, 4))
        p[[0, 1, 2, 3], [2, 0, 3, 1]] = 1.0
        out = rt.sinkhorn_balance(rt.MixKernel(p))
        assert np.array_equal(out.entries, p)

    def test_two_by_two(self):
        out = rt.sinkhorn_balance(rt.MixKernel([[2.0, 1.0], [1.0, 2.0]]))
        assert np.abs(out.entries.sum(axis=0) - 1).max() <= 1e-8
        assert np.abs(out.entries.sum(axis=1) - 1).max() <= 1e-8

    def test_random_positive_matrices_balance(self):
        rng = np.random.default_rng(42)
        for m in range(2, 11):
            for _ in range(5):
                raw = rng.uniform(0.1, 3.0, size=(m, m))
                out = rt.sinkhorn_balance(rt.MixKernel(raw))
                assert np.abs(out.entries.sum(axis=0) - 1).max() < 1e-8
                assert np.abs(out.entries.sum(axis=1) - 1).max() < 1e-8

    def test_zero_row_rejected(self):
        with pytest.raises(ValueError):
            rt.MixKernel([[0.0, 0.0], [1.0, 1.0]])

    def test_nonconvergence_reports_deviation(self):
        # support without total support: alternation stalls at O(1/k) deviation
        k = rt.MixKernel([[1.0, 1.0], [0.0, 1.0]])
        with pytest.raises(rt.SinkhornConvergenceError) as err:
            rt.sinkhorn_balance(k, max_iters=200, tol=1e-8)
        assert err.value.deviation > 0


class TestPermanent:
    def test_identity(self):
        assert rt.permanent(rt.identity_kernel(3)) == 1.0

    def test_all_ones(self):
        assert rt.permanent(rt.MixKernel(np.ones((3, 3)))) == 6.0

    def test_two_by_two(self):
        assert rt.permanent(rt.MixKernel([[1.0, 2.0], [3.0, 4.0]])) == 10.0

    def test_matches_enumeration(self):
        rng = np.random.default_rng(7)
        for m in range(2, 9):
            entries = rng.uniform(0.2, 2.0, size=(m, m))
            k = rt.MixKernel(entries)
            brute = sum(enumerated_weights(entries).values())
            assert rt.permanent(k) == pytest.approx(brute, rel=1e-10)

    def test_size_guard(self):
        with pytest.raises(rt.UnsupportedSizeError):
            rt.permanent(rt.uniform_kernel(15))


class TestSampling:
    def test_identity_kernel_always_identity(self):
        rng = np.random.default_rng(0)
        bank = rt.sample_bank(rt.identity_kernel(4), 10_000, rng)
        frac = np.mean([np.array_equal(p, np.arange(4)) for p in bank.perms])
        assert frac >= 0.999

    def test_uniform_kernel_chi_square(self):
        rng = np.random.default_rng(1)
        k = rt.uniform_kernel(3)
        bank = rt.sample_bank(k, 100_000, rng)
        perms, probs = rt.enumerate_permutation_law(k)
        counts = np.array([(bank.perms == p).all(axis=1).sum() for p in perms])
        res = sps.chisquare(counts, probs * bank.size)
        assert res.pvalue > 0.01

    def test_two_by_two_law(self):
        rng = np.random.default_rng(2)
        bank = rt.sample_bank(rt.MixKernel([[2.0, 1.0], [1.0, 2.0]]), 100_000, rng)
        frac_id = float((bank.perms[:, 0] == 0).mean())
        # oracle: weights 2*2 = 4 (identity) and 1*1 = 1 (swap)
        assert abs(frac_id - 4.0 / 5.0) <= 0.01
        assert abs((1.0 - frac_id) - 1.0 / 5.0) <= 0.01

    def test_random_kernels_chi_square(self):
        rng = np.random.default_rng(3)
        for m in (2, 3, 4):
            entries = rng.uniform(0.5, 2.0, size=(m, m))
            k = rt.MixKernel(entries)
            perms, probs = rt.enumerate_permutation_law(k)
            bank = rt.sample_bank(k, 100_000, rng)
            counts = np.array([(bank.perms == p).all(axis=1).sum() for p in perms])
            res = sps.chisquare(counts, probs * bank.size)
            assert res.pvalue > 0.01, f"M={m}"

    def test_law_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        entries = rng.uniform(0.2, 2.0, size=(4, 4))
        perms, probs = rt.enumerate_permutation_law(rt.MixKernel(entries))
        oracle = enumerated_weights(entries)
        z = sum(oracle.values())
        for perm, prob in zip(perms, probs):
            assert prob == pytest.approx(oracle[tuple(perm)] / z, rel=1e-12)

    def test_mcmc_agrees_with_exact_in_tv(self):
        rng = np.random.default_rng(5)
        k = rt.gaussian_ring_kernel(6, 1.0, 1.0)
        n = 100_000
        exact = rt.sample_bank(k, n, rng, method="exact").perms
        mcmc = rt.sample_bank(k, n, rng, method="mcmc").perms
        keys = {}
        for p in np.vstack([exact, mcmc]):
            keys.setdefault(tuple(p), len(keys))
        def hist(samples):
            h = np.zeros(len(keys))
            for p in samples:
                h[keys[tuple(p)]] += 1
            return h / len(samples)
        tv = 0.5 * np.abs(hist(exact) - hist(mcmc)).sum()
        assert tv < 0.03

    def test_degenerate_kernel_raises(self):
        # rows 0 and 1 can only take column 0: no perfect matching exists
        k = rt.MixKernel([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        rng = np.random.default_rng(6)
        with pytest.raises(rt.DegenerateKernelError):
            rt.sample_permutation(k, rng)
        with pytest.raises(rt.DegenerateKernelError):
            rt.sample_bank(k, 3, rng, method="mcmc")

    def test_enumeration_size_guard(self):
        with pytest.raises(rt.UnsupportedSizeError):
            rt.enumerate_permutation_law(rt.uniform_kernel(9))


class TestBank:
    def test_identity_bank(self):
        rng = np.random.default_rng(0)
        bank = rt.sample_bank(rt.identity_kernel(3), 5, rng)
        assert bank.size == 5
        assert all(np.array_equal(p, np.arange(3)) for p in bank.perms)

    def test_all_bijections(self):
        rng = np.random.default_rng(1)
        bank = rt.sample_bank(rt.gaussian_ring_kernel(5, 1.0, 2.0), 10, rng)
        assert bank.size == 10
        for p in bank.perms:
            assert np.array_equal(np.sort(p), np.arange(5))

    def test_uniform_two_covers_split(self):
        rng = np.random.default_rng(2)
        bank = rt.sample_bank(rt.uniform_kernel(2), 10_000, rng)
        frac_id = float((bank.perms[:, 0] == 0).mean())
        assert abs(frac_id - 0.5) <= 0.05

    def test_bank_is_frozen(self):
        rng = np.random.default_rng(3)
        bank = rt.sample_bank(rt.uniform_kernel(3), 4, rng)
        with pytest.raises(ValueError):
            bank.perms[0, 0] = 2

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        k = rt.gaussian_ring_kernel(4, 1.0, 1.5)
        bank = rt.sample_bank(k, 7, rng)
        path = tmp_path / "bank.txt"
        rt.save_bank(bank, path)
        first_line = path.read_text().splitlines()[0].split()
        assert min(int(v) for v in first_line) >= 1  # 1-based on disk
        loaded = rt.load_bank(path, k)
        assert np.array_equal(loaded.perms, bank.perms)


class TestEmpiricalMixer:
    def test_identity_bank_gives_identity(self):
        rng = np.random.default_rng(0)
        bank = rt.sample_bank(rt.identity_kernel(4), 6, rng)
        mix = rt.empirical_mixer(bank)
        assert np.array_equal(mix.entries, np.eye(4))

    def test_id_and_swap(self):
        bank = rt.PermutationBank(np.array([[0, 1], [1, 0]]),
                                  source_kernel=rt.uniform_kernel(2))
        mix = rt.empirical_mixer(bank)
        assert np.array_equal(mix.entries, np.full((2, 2), 0.5))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        bank = rt.sample_bank(rt.gaussian_ring_kernel(5, 2.0, 1.0), 9, rng)
        mix = rt.empirical_mixer(bank)
        assert np.abs(mix.entries.sum(axis=1) - 1.0).max() < 1e-12
        steps = mix.entries * bank.size
        assert np.allclose(steps, np.round(steps))  # multiples of 1/S
        assert np.array_equal(np.round(steps).sum(axis=1), np.full(5, bank.size))

    def test_converges_to_enumeration_marginal(self):
        rng = np.random.default_rng(2)
        k = rt.gaussian_ring_kernel(3, 1.0, 1.5)
        bank = rt.sample_bank(k, 100_000, rng)
        mix = rt.empirical_mixer(bank)
        perms, probs = rt.enumerate_permutation_law(k)
        marginal = np.zeros((3, 3))
        for p, prob in zip(perms, probs):
            for b in range(3):
                marginal[b, p[b]] += prob
        assert np.abs(mix.entries - marginal).max() < 0.01

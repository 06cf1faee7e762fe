"""Memory bank invariants: row norms, momentum updates, uniform sampling."""

import math

import numpy as np
import pytest

from cpd.errors import ContractViolationError, InvalidConfigError
from cpd.memory_bank import MemoryBank, init_bank


class TestInitBank:
    def test_rows_unit_norm(self):
        bank = init_bank(50, 16, seed=0)
        for store in (bank.visual, bank.text):
            np.testing.assert_allclose(np.linalg.norm(store, axis=1), 1.0, atol=1e-9)

    def test_deterministic(self):
        a = init_bank(20, 8, seed=3)
        b = init_bank(20, 8, seed=3)
        assert np.array_equal(a.visual, b.visual)
        assert np.array_equal(a.text, b.text)

    def test_random_rows_near_orthogonal(self):
        bank = init_bank(10000, 64, seed=1)
        rng = np.random.default_rng(2)
        pairs = rng.integers(0, 10000, size=(100, 2))
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        dots = np.einsum("ij,ij->i", bank.visual[pairs[:, 0]], bank.visual[pairs[:, 1]])
        assert abs(dots.mean()) < 0.05

    def test_zero_sizes_rejected(self):
        with pytest.raises(InvalidConfigError):
            init_bank(0, 8, seed=0)
        with pytest.raises(InvalidConfigError):
            init_bank(8, 0, seed=0)


class TestUpdate:
    def test_momentum_zero_copies_exactly(self):
        bank = init_bank(4, 3, seed=0)
        v = np.array([0.6, 0.8, 0.0])
        bank.update("visual", 2, v, momentum=0.0)
        assert np.array_equal(bank.visual[2], v)

    def test_momentum_one_is_noop(self):
        bank = init_bank(4, 3, seed=0)
        before = bank.text[1].copy()
        bank.update("text", 1, np.array([1.0, 0.0, 0.0]), momentum=1.0)
        assert np.array_equal(bank.text[1], before)

    def test_halfway_blend_normalized(self):
        bank = init_bank(2, 2, seed=0)
        bank.update("visual", 0, np.array([1.0, 0.0]), momentum=0.0)
        bank.update("visual", 0, np.array([0.0, 1.0]), momentum=0.5)
        expected = np.array([1.0, 1.0]) / math.sqrt(2.0)
        np.testing.assert_allclose(bank.visual[0], expected, atol=1e-12)

    def test_out_of_range_index(self):
        bank = init_bank(3, 2, seed=0)
        with pytest.raises(ContractViolationError):
            bank.update("visual", 3, np.array([1.0, 0.0]))

    def test_default_momentum_comes_from_bank(self):
        bank = init_bank(2, 2, seed=0, momentum=0.0)
        v = np.array([0.0, 1.0])
        bank.update("text", 0, v)
        assert np.array_equal(bank.text[0], v)

    def test_norm_invariant_under_random_updates(self):
        bank = init_bank(10, 6, seed=4)
        rng = np.random.default_rng(5)
        for _ in range(500):
            i = int(rng.integers(10))
            modality = "visual" if rng.uniform() < 0.5 else "text"
            v = rng.normal(size=6)
            v /= np.linalg.norm(v)
            bank.update(modality, i, v, momentum=float(rng.uniform(0, 1)))
        for store in (bank.visual, bank.text):
            np.testing.assert_allclose(np.linalg.norm(store, axis=1), 1.0, atol=1e-6)

    def test_convergence_to_constant_target(self):
        rng = np.random.default_rng(6)
        target = rng.normal(size=8)
        target /= np.linalg.norm(target)
        for mu in (0.2, 0.5, 0.9):
            bank = init_bank(1, 8, seed=7)
            bound = math.ceil(math.log(1e-3) / math.log(mu)) + 5
            dist = np.linalg.norm(bank.visual[0] - target)
            steps = 0
            while dist >= 1e-3 and steps <= bound:
                bank.update("visual", 0, target, momentum=mu)
                new_dist = np.linalg.norm(bank.visual[0] - target)
                assert new_dist <= dist + 1e-12
                dist = new_dist
                steps += 1
            assert dist < 1e-3
            assert steps <= bound


class TestSampleNoise:
    def test_single_instance_without_exclusion(self):
        bank = init_bank(1, 4, seed=0)
        rng = np.random.default_rng(0)
        idx = bank.sample_noise(1, positive=0, exclude_positive=False, rng=rng)
        assert idx.tolist() == [0]

    def test_exclusion_never_returns_positive(self):
        bank = init_bank(5, 4, seed=0)
        rng = np.random.default_rng(1)
        for _ in range(2000):
            idx = bank.sample_noise(4, positive=2, exclude_positive=True, rng=rng)
            assert 2 not in idx

    def test_uniform_frequencies(self):
        n = 4
        bank = init_bank(n, 4, seed=0)
        rng = np.random.default_rng(2)
        counts = np.zeros(n)
        draws = 0
        while draws < 10**5:
            idx = bank.sample_noise(n, positive=0, exclude_positive=False, rng=rng)
            counts += np.bincount(idx, minlength=n)
            draws += idx.size
        freqs = counts / draws
        np.testing.assert_allclose(freqs, 1.0 / n, atol=0.02)

    def test_m_too_large_rejected(self):
        bank = init_bank(4, 4, seed=0)
        rng = np.random.default_rng(3)
        with pytest.raises(InvalidConfigError):
            bank.sample_noise(5, positive=0, exclude_positive=False, rng=rng)
        with pytest.raises(InvalidConfigError):
            bank.sample_noise(4, positive=0, exclude_positive=True, rng=rng)

    def test_deterministic_in_rng_state(self):
        bank = init_bank(9, 4, seed=0)
        a = bank.sample_noise(6, 1, True, np.random.default_rng(42))
        b = bank.sample_noise(6, 1, True, np.random.default_rng(42))
        assert np.array_equal(a, b)


class TestLookup:
    def test_read_your_write(self):
        bank = init_bank(3, 2, seed=0)
        v = np.array([0.0, 1.0])
        bank.update("visual", 1, v, momentum=0.0)
        out = bank.lookup("visual", [1])
        assert np.array_equal(out[0], v)

    def test_value_semantics(self):
        bank = init_bank(3, 2, seed=0)
        first = bank.lookup("text", [0])
        snapshot = first.copy()
        bank.update("text", 0, np.array([1.0, 0.0]), momentum=0.0)
        assert np.array_equal(first, snapshot)

    def test_all_rows_unit(self):
        bank = init_bank(12, 5, seed=8)
        rows = bank.lookup("visual", np.arange(12))
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-9)

    def test_out_of_range(self):
        bank = init_bank(3, 2, seed=0)
        with pytest.raises(ContractViolationError):
            bank.lookup("visual", [3])

    def test_bad_modality(self):
        bank = init_bank(3, 2, seed=0)
        with pytest.raises(InvalidConfigError):
            bank.lookup("audio", [0])

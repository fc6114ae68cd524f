import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_simplex
from ncmi.autodiff import DimensionError
from ncmi.metrics import EmptyClassError, class_centroids, cmi, gamma, ncmi

# (1/4) * 2 * D([0.8, 0.2] || [0.2, 0.8]), 40-digit mpmath.
GAMMA_TWO_POINT = 0.41588830833596718565


def naive_kl(p, q):
    total = 0.0
    for a, b in zip(p, q):
        total += a * math.log(max(a, 1e-12) / max(b, 1e-12)) if a > 0 else 0.0
    return total


def naive_centroids(probs, labels, c):
    out = []
    for y in range(c):
        rows = [probs[i] for i in range(len(labels)) if labels[i] == y]
        out.append([sum(r[j] for r in rows) / len(rows) for j in range(probs.shape[1])])
    return np.array(out)


def naive_cmi(probs, labels, cents):
    return sum(naive_kl(probs[i], cents[labels[i]]) for i in range(len(labels))) / len(labels)


def naive_gamma(probs, labels, cents):
    n = len(labels)
    total = 0.0
    for z in range(n):
        for x in range(n):
            if labels[x] != labels[z]:
                total += naive_kl(cents[labels[x]], probs[z])
    return total / n ** 2


def dataset(rng, c, per_class, m):
    labels = np.repeat(np.arange(c), per_class)
    return random_simplex(rng, len(labels), m), labels


class TestCentroids:
    def test_two_rows(self):
        np.testing.assert_array_equal(class_centroids([[1, 0], [0, 1]], [0, 0]).centroids, [[0.5, 0.5]])

    def test_identical_rows(self):
        row = [0.1, 0.3, 0.6]
        np.testing.assert_array_equal(class_centroids([row] * 5, [0] * 5).centroids, [row])

    def test_matches_brute_force(self, rng):
        p, y = dataset(rng, 3, 4, 5)
        cs = class_centroids(p, y)
        np.testing.assert_allclose(cs.centroids, naive_centroids(p, y, 3), atol=1e-12, rtol=0)
        np.testing.assert_array_equal(cs.counts, [4, 4, 4])

    def test_empty_class_listed(self):
        with pytest.raises(EmptyClassError, match=r"\[1\]"):
            class_centroids([[0.5, 0.5], [0.5, 0.5]], [0, 2], n_classes=3)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            class_centroids([[0.5, 0.5]], [3], n_classes=2)

    def test_bad_shapes(self):
        with pytest.raises(DimensionError):
            class_centroids(np.ones((3, 2)) / 2, [0, 1])


class TestCMI:
    def test_constant_within_class(self):
        p = np.array([[0.8, 0.2], [0.8, 0.2], [0.3, 0.7]])
        y = [0, 0, 1]
        assert cmi(p, y, class_centroids(p, y)) == 0.0

    def test_single_class_point_masses(self):
        p, y = np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 0]
        assert cmi(p, y, class_centroids(p, y)) == pytest.approx(math.log(2), abs=1e-6)

    def test_matches_naive(self, rng):
        p, y = dataset(rng, 2, 8, 6)
        cs = class_centroids(p, y)
        assert cmi(p, y, cs) == pytest.approx(naive_cmi(p, y, cs.centroids), abs=1e-12)

    def test_dimension_mismatch(self, rng):
        p, y = dataset(rng, 2, 3, 4)
        cs = class_centroids(p, y)
        with pytest.raises(DimensionError):
            cmi(p[:, :3] / p[:, :3].sum(1, keepdims=True), y, cs)


class TestGamma:
    def test_single_class(self, rng):
        p = random_simplex(rng, 6, 3)
        assert gamma(p, np.zeros(6, int), class_centroids(p, np.zeros(6, int))) == 0.0

    def test_two_point(self):
        p, y = np.array([[0.8, 0.2], [0.2, 0.8]]), [0, 1]
        assert gamma(p, y, class_centroids(p, y)) == pytest.approx(GAMMA_TWO_POINT, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_grouped_matches_pairwise(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.permutation(np.arange(17) % 3)
        p = random_simplex(rng, 17, 4)
        cs = class_centroids(p, y)
        assert gamma(p, y, cs) == pytest.approx(naive_gamma(p, y, cs.centroids), abs=1e-12)

    def test_replacing_rows_by_centroids(self, rng):
        # KL is convex in its second argument; averaging the p_z can only shrink
        # Gamma, while the concentration term vanishes.
        p, y = dataset(rng, 3, 10, 5)
        before = ncmi(p, y)
        after = ncmi(before.centroids.centroids[y], y)
        assert after.cmi == 0.0
        assert after.gamma <= before.gamma
        np.testing.assert_allclose(after.centroids.centroids, before.centroids.centroids, atol=1e-15)


class TestNcmiReport:
    def test_matches_composed_oracles(self, rng):
        p, y = dataset(rng, 4, 16, 8)
        r = ncmi(p, y)
        cents = naive_centroids(p, y, 4)
        expected = naive_cmi(p, y, cents) / naive_gamma(p, y, cents)
        assert r.defined
        assert r.ncmi == pytest.approx(expected, abs=1e-12)

    def test_separated_clusters(self):
        eps = 1e-6
        rows = np.array([[1 - 2 * eps, eps, eps], [eps, 1 - 2 * eps, eps], [eps, eps, 1 - 2 * eps]])
        y = np.repeat(np.arange(3), 4)
        r = ncmi(rows[y], y)
        assert r.cmi == pytest.approx(0.0, abs=1e-12)
        assert r.ncmi == pytest.approx(0.0, abs=1e-12)

    def test_two_point_ncmi_zero(self):
        r = ncmi([[0.8, 0.2], [0.2, 0.8]], [0, 1])
        assert r.cmi == 0.0 and r.gamma > 0 and r.ncmi == 0.0

    def test_undefined_when_identical_outputs(self):
        r = ncmi(np.full((6, 3), 1 / 3), [0, 1, 2, 0, 1, 2])
        assert not r.defined
        assert math.isnan(r.ncmi)
        assert r.to_record()["ncmi"] is None

    def test_cmi_is_weighted_mean_of_per_class(self, rng):
        y = np.array([0] * 3 + [1] * 7 + [2] * 5)
        p = random_simplex(rng, len(y), 4)
        r = ncmi(p, y)
        weighted = sum(r.per_class_cmi[k] * n for k, n in zip(range(3), [3, 7, 5])) / len(y)
        assert r.cmi == pytest.approx(weighted, abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_permutation_invariance_bit_exact(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.permutation(np.arange(24) % 4)
        p = random_simplex(rng, 24, 6)
        perm = rng.permutation(24)
        a, b = ncmi(p, y), ncmi(p[perm], y[perm])
        assert (a.cmi, a.gamma, a.ncmi) == (b.cmi, b.gamma, b.ncmi)
        assert a.per_class_cmi == b.per_class_cmi
        np.testing.assert_array_equal(a.centroids.centroids, b.centroids.centroids)

    def test_record_keys(self, rng):
        p, y = dataset(rng, 2, 3, 3)
        rec = ncmi(p, y).to_record(step=7)
        assert {"step", "cmi", "gamma", "ncmi"} <= rec.keys()
        assert rec["step"] == 7

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssfl_sim import nn_core as nn
from ssfl_sim import ssfl_core as S


def lp_from_logits(z, temperature=1.0):
    z = np.asarray(z, dtype=float)
    return S.LabelingPass(nn.softmax(z), S.energy_score(z, temperature))


def random_lp(rng, n=200, k=5, scale=3.0):
    return lp_from_logits(rng.normal(scale=scale, size=(n, k)))


def brute_difficulty(lp, tau, k):
    sigma = [0] * k
    rest = 0
    for row in lp.probs:
        best = max(range(k), key=lambda j: (row[j], -j))
        if row[best] > tau:
            sigma[best] += 1
        else:
            rest += 1
    return sigma, rest


def brute_select(lp, tau_c, energy_threshold):
    p, up = [], []
    for i, (row, e) in enumerate(zip(lp.probs, lp.energy)):
        q = int(np.argmax(row))
        ok = row[q] > tau_c[q] and (energy_threshold is None or e < energy_threshold)
        (p if ok else up).append(i)
    return p, up


class TestEnergy:
    def test_single_logit(self):
        assert S.energy_score(np.array([2.5])) == pytest.approx(-2.5, abs=1e-15)

    def test_zero_logits(self):
        assert S.energy_score(np.zeros(10)) == pytest.approx(-math.log(10), abs=1e-12)

    def test_large_logits(self):
        assert S.energy_score(np.array([1000.0, 1000.0])) == pytest.approx(-1000 - math.log(2), abs=1e-9)

    def test_mpmath_oracle(self):
        mpmath.mp.dps = 40
        z = np.array([0.3, -1.2, 4.0, 2.2])
        for t in (0.5, 1.0, 3.0):
            ref = -t * mpmath.log(sum(mpmath.exp(mpmath.mpf(v) / t) for v in z))
            assert S.energy_score(z, t) == pytest.approx(float(ref), rel=1e-13)

    def test_batched(self):
        z = np.random.default_rng(0).normal(size=(7, 4))
        batch = S.energy_score(z)
        assert np.allclose(batch, [S.energy_score(r) for r in z], rtol=0, atol=1e-14)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            S.EnergyConfig(temperature=0.0)

    @given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-100, 100)), st.floats(-500, 500))
    def test_shift_covariance(self, z, c):
        assert abs(S.energy_score(z + c) - (S.energy_score(z) - c)) < 1e-9


class TestDifficulty:
    def test_uniform_model(self):
        lp = lp_from_logits(np.zeros((40, 6)))
        d = S.class_difficulty(lp, 0.95)
        assert (d.sigma == 0).all() and d.sigma_rest == 40

    def test_one_hot_oracle(self):
        labels = np.array([0, 2, 2, 1, 0, 2])
        lp = S.LabelingPass(nn.one_hot(labels, 3), np.zeros(6))
        d = S.class_difficulty(lp, 0.95)
        assert list(d.sigma) == [2, 1, 3] and d.sigma_rest == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_recount(self, seed):
        lp = random_lp(np.random.default_rng(seed))
        for tau in (0.3, 0.7, 0.95):
            d = S.class_difficulty(lp, tau)
            sigma, rest = brute_difficulty(lp, tau, 5)
            assert list(d.sigma) == sigma and d.sigma_rest == rest and d.total == 200

    def test_empty_client(self):
        lp = S.LabelingPass(np.zeros((0, 4)), np.zeros(0))
        d = S.class_difficulty(lp, 0.95, 4)
        assert (d.sigma == 0).all() and d.sigma_rest == 0 and d.total == 0

    def test_inconsistent_counts_rejected(self):
        with pytest.raises(ValueError):
            S.ClassDifficulty(np.array([1, 2]), 3, 7)


class TestThresholds:
    def test_all_zero_counts(self):
        th = S.adaptive_thresholds(S.ClassDifficulty(np.zeros(4, dtype=int), 50, 50), 0.95)
        assert th.warmup_active and (th.beta == 0).all() and (th.tau_c == 0).all()

    def test_balanced_saturated(self):
        th = S.adaptive_thresholds(S.ClassDifficulty(np.full(3, 7), 0, 21), 0.95)
        assert not th.warmup_active
        np.testing.assert_allclose(th.tau_c, 0.95, rtol=0, atol=1e-15)

    def test_hand_example(self):
        th = S.adaptive_thresholds(S.ClassDifficulty(np.array([30, 10]), 20, 60), 0.95)
        assert not th.warmup_active
        np.testing.assert_allclose(th.beta, [1.0, 1 / 3], rtol=1e-15)
        np.testing.assert_allclose(th.tau_c, [0.95, 0.19], rtol=1e-12)

    def test_warmup_branch_value(self):
        th = S.adaptive_thresholds(S.ClassDifficulty(np.array([5, 10]), 40, 55), 0.9)
        assert th.warmup_active
        beta = np.array([5 / 40, 10 / 40])
        np.testing.assert_allclose(th.tau_c, beta / (2 - beta) * 0.9, rtol=1e-14)

    def test_boundary_is_not_warmup(self):
        th = S.adaptive_thresholds(S.ClassDifficulty(np.array([10, 10]), 20, 40), 0.95)
        assert not th.warmup_active

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            S.adaptive_thresholds(S.ClassDifficulty(np.zeros(3, dtype=int), 0, 0), 0.95)

    def test_tau_range(self):
        with pytest.raises(ValueError):
            S.adaptive_thresholds(S.ClassDifficulty(np.ones(2, dtype=int), 0, 2), 1.0)

    def test_convex_map(self):
        assert S.convex_map(0.0) == 0.0 and S.convex_map(1.0) == 1.0
        xs = np.linspace(0, 1, 101)
        ys = S.convex_map(xs)
        assert (np.diff(ys) > 0).all()
        assert (ys[1:-1] < xs[1:-1]).all()

    @given(st.lists(st.integers(0, 500), min_size=1, max_size=10), st.integers(0, 500),
           st.floats(0.01, 0.99))
    def test_bounds_and_flag(self, sigma, rest, tau):
        sigma = np.array(sigma)
        if sigma.sum() + rest == 0:
            return
        th = S.adaptive_thresholds(S.ClassDifficulty(sigma, rest, int(sigma.sum()) + rest), tau)
        assert th.warmup_active == (sigma.sum() < rest)
        assert ((th.beta >= 0) & (th.beta <= 1)).all()
        assert (th.tau_c <= tau + 1e-15).all()
        assert np.array_equal(np.isclose(th.tau_c, tau, rtol=0, atol=1e-15), th.beta == 1)

    def test_fresh_model_starts_in_warmup(self):
        rng = np.random.default_rng(0)
        params = nn.init_mlp([16, 64, 64, 6], rng)
        lp = S.labeling_pass(params, rng.normal(size=(300, 16)))
        th = S.adaptive_thresholds(S.class_difficulty(lp, 0.95), 0.95)
        assert th.warmup_active


class TestSelection:
    def test_infinite_energy_matches_confidence_rule(self):
        lp = random_lp(np.random.default_rng(1))
        th = S.fixed_thresholds(5, 0.8)
        p, up = S.select_pseudo_hybrid(lp, th, math.inf)
        assert np.array_equal(p.idx, S.select_pseudo_warmup(lp, th).idx)

    def test_minus_infinite_energy_rejects_all(self):
        lp = random_lp(np.random.default_rng(2))
        p, up = S.select_pseudo_hybrid(lp, S.fixed_thresholds(5, 0.5), -math.inf)
        assert len(p) == 0 and np.array_equal(up.idx, np.arange(200))
        np.testing.assert_array_equal(up.targets, lp.probs)

    @pytest.mark.parametrize("seed", range(4))
    def test_brute_force_hybrid(self, seed):
        rng = np.random.default_rng(seed)
        lp = random_lp(rng)
        tau_c = rng.uniform(0, 0.95, 5)
        th = S.AdaptiveThresholds(np.zeros(5), tau_c, 0.95, False)
        e_thr = float(np.median(lp.energy))
        p, up = S.select_pseudo_hybrid(lp, th, e_thr)
        bp, bup = brute_select(lp, tau_c, e_thr)
        assert list(p.idx) == bp and list(up.idx) == bup
        np.testing.assert_array_equal(p.labels, lp.pred[bp])

    def test_zero_thresholds_take_everything(self):
        lp = random_lp(np.random.default_rng(3))
        th = S.adaptive_thresholds(S.ClassDifficulty(np.zeros(5, dtype=int), 200, 200), 0.95)
        assert len(S.select_pseudo_warmup(lp, th)) == 200

    @pytest.mark.parametrize("seed", range(3))
    def test_brute_force_warmup(self, seed):
        rng = np.random.default_rng(10 + seed)
        lp = random_lp(rng)
        tau_c = rng.uniform(0, 0.95, 5)
        got = S.select_pseudo_warmup(lp, S.AdaptiveThresholds(np.zeros(5), tau_c, 0.95, True))
        assert list(got.idx) == brute_select(lp, tau_c, None)[0]

    def test_deterministic_given_snapshot(self):
        rng = np.random.default_rng(4)
        params = nn.init_mlp([8, 16, 4], rng)
        x = rng.normal(size=(50, 8))
        a = S.select_pseudo_hybrid(S.labeling_pass(params, x), S.fixed_thresholds(4, 0.3), -1.0)
        b = S.select_pseudo_hybrid(S.labeling_pass(params, x), S.fixed_thresholds(4, 0.3), -1.0)
        assert np.array_equal(a[0].idx, b[0].idx) and np.array_equal(a[1].targets, b[1].targets)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-8, 2), st.floats(-8, 2))
    def test_partition_and_monotone(self, seed, e1, e2):
        rng = np.random.default_rng(seed)
        lp = random_lp(rng, n=60, k=4)
        th = S.AdaptiveThresholds(np.zeros(4), rng.uniform(0, 0.95, 4), 0.95, False)
        lo, hi = sorted((e1, e2))
        p_lo, up_lo = S.select_pseudo_hybrid(lp, th, lo)
        p_hi, _ = S.select_pseudo_hybrid(lp, th, hi)
        assert set(p_lo.idx).isdisjoint(up_lo.idx)
        assert sorted(np.concatenate([p_lo.idx, up_lo.idx])) == list(range(60))
        assert set(p_lo.idx) <= set(p_hi.idx)


class TestMixup:
    def test_lambda_one(self):
        x, y = np.arange(4.0), -np.arange(4.0)
        xm, lam, _, _ = S.mixup_pair(x, 1, y, 2, S.MixupConfig(), lam=1.0)
        np.testing.assert_array_equal(xm, x)

    def test_lambda_half_cancels(self):
        x = np.array([1.0, -2.0, 3.0])
        xm, _, a, b = S.mixup_pair(x, 0, -x, 1, S.MixupConfig(), lam=0.5)
        np.testing.assert_array_equal(xm, 0.0)
        assert (a, b) == (0, 1)

    def test_beta_mean_monte_carlo(self):
        rng = np.random.default_rng(7)
        cfg = S.MixupConfig(0.75)
        lams = [S.mixup_pair(0.0, 0, 0.0, 0, cfg, rng)[1] for _ in range(100_000)]
        assert abs(np.mean(lams) - 0.5) < 0.01

    def test_partner_set(self):
        pseudo = S.PseudoSet(np.array([4, 9, 11]), np.array([0, 1, 2]))
        partner = S.sample_with_replacement(pseudo, np.random.default_rng(0))
        assert len(partner) == 3
        lookup = dict(zip(pseudo.idx, pseudo.labels))
        assert all(lookup[i] == l for i, l in zip(partner.idx, partner.labels))

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            S.MixupConfig(0.0)


def confident_model(k=6, d=3, scale=60.0):
    """Linear model whose prediction is class ``argmax(x)`` with near-certain confidence."""
    w = np.zeros((k, d))
    w[:d, :d] = np.eye(d) * scale
    return nn.ModelParams([w], [np.zeros(k)])


def zero_model(k=6, d=3):
    return nn.ModelParams([np.zeros((k, d))], [np.zeros(k)])


class TestLosses:
    def test_pseudo_loss_perfect(self):
        x = np.eye(3)
        assert S.pseudo_loss(confident_model(), x, np.array([0, 1, 2])) < 1e-20

    def test_pseudo_loss_uniform(self):
        x = np.random.default_rng(0).normal(size=(5, 3))
        assert S.pseudo_loss(zero_model(), x, np.array([0, 1, 2, 3, 4])) == pytest.approx(math.log(6), abs=1e-12)

    def test_pseudo_loss_composition(self):
        rng = np.random.default_rng(1)
        p = nn.init_mlp([3, 8, 6], rng)
        x, y = rng.normal(size=(9, 3)), rng.integers(0, 6, 9)
        probs = nn.softmax(nn.forward_logits(p, x))
        ref = np.mean([nn.cross_entropy(probs[i], y[i]) for i in range(9)])
        assert S.pseudo_loss(p, x, y) == pytest.approx(ref, rel=1e-12)

    def test_unpseudo_matching_target(self):
        rng = np.random.default_rng(2)
        p = nn.init_mlp([3, 8, 6], rng)
        x = rng.normal(size=(4, 3))
        assert S.unpseudo_loss(p, x, nn.softmax(nn.forward_logits(p, x))) == pytest.approx(0.0, abs=1e-14)

    def test_unpseudo_one_hot_vs_uniform(self):
        x = np.ones((2, 3))
        assert S.unpseudo_loss(zero_model(), x, nn.one_hot([1, 4], 6)) == pytest.approx(math.log(6), abs=1e-12)

    def test_unpseudo_composition(self):
        rng = np.random.default_rng(3)
        p = nn.init_mlp([3, 8, 6], rng)
        x, t = rng.normal(size=(7, 3)), rng.dirichlet(np.ones(6), 7)
        probs = nn.softmax(nn.forward_logits(p, x))
        ref = np.mean([nn.kl_divergence(t[i], probs[i]) for i in range(7)])
        assert S.unpseudo_loss(p, x, t) == pytest.approx(ref, rel=1e-12)

    def test_mixup_lambda_one_is_ce(self):
        rng = np.random.default_rng(4)
        p = nn.init_mlp([3, 8, 6], rng)
        x, a, b = rng.normal(size=(5, 3)), rng.integers(0, 6, 5), rng.integers(0, 6, 5)
        assert S.mixup_loss(p, x, a, b, 1.0) == pytest.approx(S.pseudo_loss(p, x, a), rel=1e-14)

    def test_mixup_same_labels(self):
        rng = np.random.default_rng(5)
        p = nn.init_mlp([3, 8, 6], rng)
        x, a = rng.normal(size=(5, 3)), rng.integers(0, 6, 5)
        assert S.mixup_loss(p, x, a, a, 0.37) == pytest.approx(S.pseudo_loss(p, x, a), rel=1e-13)

    def test_mixup_two_term_oracle(self):
        rng = np.random.default_rng(6)
        p = nn.init_mlp([3, 8, 6], rng)
        x, a, b = rng.normal(size=(6, 3)), rng.integers(0, 6, 6), rng.integers(0, 6, 6)
        lam = 0.3
        probs = nn.softmax(nn.forward_logits(p, x))
        ref = np.mean([lam * nn.cross_entropy(probs[i], a[i]) + (1 - lam) * nn.cross_entropy(probs[i], b[i])
                       for i in range(6)])
        assert S.mixup_loss(p, x, a, b, lam) == pytest.approx(ref, rel=1e-12)

    def test_empty_batches_are_zero(self):
        p = zero_model()
        empty = np.zeros((0, 3))
        assert S.pseudo_loss(p, empty, np.zeros(0, dtype=int)) == 0.0
        assert S.unpseudo_loss(p, empty, np.zeros((0, 6))) == 0.0
        assert S.mixup_loss(p, empty, np.zeros(0, dtype=int), np.zeros(0, dtype=int), 0.5) == 0.0

    def test_total(self):
        assert S.total_unlabeled_loss(0, 0, 0) == 0
        assert S.total_unlabeled_loss(1, 2, 3) == 6

    def test_unpseudo_batch_size(self):
        assert S.unpseudo_batch_size(10, 1.0) == 10
        assert S.unpseudo_batch_size(10, 0.25) == 3
        assert S.unpseudo_batch_size(10, 0.0) == 0

"""Loss families: frozen example values, penalty properties, aggregation
rules, reduction/equivalence identities, and finite-difference checks."""
import dataclasses
import math

import numpy as np
import pytest

from contrastlab import losses as L
from contrastlab import tensor as T
from contrastlab.errors import ContractViolation, DomainError
from contrastlab.losses import LossConfig
from contrastlab.nets import Mlp, MlpSpec, TempBounds
from contrastlab.rng import SplitMix64, derive
from contrastlab.tensor import Tensor, backward, finite_diff_check, grad_of, zero_grads

BOUNDS = TempBounds(1e-5, 2.0)


def rand_tensor(stream, shape):
    n = int(np.prod(shape))
    return Tensor(((2.0 * stream.floats(n) - 1.0) * 2.0).reshape(shape))


class TestCosine:
    def test_identical_unit_vectors(self):
        u = Tensor([0.6, 0.8])
        np.testing.assert_allclose(L.cosine_sim(u, Tensor([0.6, 0.8])).item(), 1.0, atol=1e-12)

    def test_orthogonal(self):
        assert L.cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_hand_value(self):
        v = Tensor([1.0, 1.0])
        got = L.cosine_sim(Tensor([1.0, 0.0]), v).item()
        assert abs(got - 0.70711) < 1e-5

    def test_unit_distance_identity(self):
        rng = np.random.default_rng(0)
        u = rng.normal(size=5)
        v = rng.normal(size=5)
        sim = L.cosine_sim(Tensor(u), Tensor(v)).item()
        un, vn = u / np.linalg.norm(u), v / np.linalg.norm(v)
        np.testing.assert_allclose(np.sum((un - vn) ** 2), 2 - 2 * sim, atol=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(DomainError):
            L.cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


class TestTempPenalty:
    def test_log_one_case(self):
        assert L.temp_penalty(Tensor(1.0), 2).item() == 1.0

    def test_minimizer_and_value_d4(self):
        # d/dtau [ (d'/2) log tau + 1/tau ] = d'/(2 tau) - 1/tau^2 = 0 at tau = 2/d'
        val = L.temp_penalty(Tensor(0.5), 4).item()
        np.testing.assert_allclose(val, 2.0 - 2.0 * math.log(2.0), atol=1e-12)

    @pytest.mark.parametrize("d_prime", [2, 64, 128])
    def test_stationary_at_two_over_d(self, d_prime):
        tau = Tensor(2.0 / d_prime)
        backward(L.temp_penalty(tau, d_prime))
        assert abs(float(tau.grad)) < 1e-12

    def test_decreasing_then_increasing(self):
        for d_prime in (2, 8, 64):
            grid = np.linspace(1e-3, 4.0, 2000)
            vals = L.temp_penalty(Tensor(grid), d_prime).data
            star = 2.0 / d_prime
            left = grid < star - 1e-3
            right = grid > star + 1e-3
            assert np.all(np.diff(vals[left]) < 0)
            assert np.all(np.diff(vals[right]) > 0)

    def test_domain(self):
        with pytest.raises(DomainError):
            L.temp_penalty(Tensor(0.0), 4)


class TestBaselineLosses:
    def test_ntxent_single_negative(self):
        # sim+ = 1, one negative sim- = 0, tau = 1: -log(e^1/e^0) = -1
        loss = L.ntxent_loss(Tensor([1.0, 0.0]), Tensor([1.0, 0.0]),
                             Tensor([[0.0, 1.0]]), tau=1.0)
        np.testing.assert_allclose(loss.item(), -1.0, atol=1e-12)

    def test_infonce_single_negative(self):
        loss = L.infonce_loss(Tensor([1.0, 0.0]), Tensor([1.0, 0.0]),
                              Tensor([[0.0, 1.0]]), tau=1.0)
        np.testing.assert_allclose(loss.item(), math.log(1.0 + math.exp(-1.0)), atol=1e-12)

    def test_negcos_perfect_alignment(self):
        u = Tensor([0.0, 1.0])
        loss = L.negcos_loss(u, Tensor(u.data.copy()), Tensor(u.data.copy()),
                             Tensor(u.data.copy()))
        np.testing.assert_allclose(loss.item(), -1.0, atol=1e-12)

    def test_cross_corr_identity_is_zero(self):
        # exactly uncorrelated standardized channels: C = I
        z = Tensor(np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]))
        loss = L.cross_corr_loss(z, Tensor(z.data.copy()), lambd=0.7)
        np.testing.assert_allclose(loss.item(), 0.0, atol=1e-12)

    def test_cross_corr_requires_standardized(self):
        z = Tensor(np.random.default_rng(0).normal(size=(4, 2)))
        with pytest.raises(ContractViolation):
            L.cross_corr_loss(z, z, lambd=1.0)

    def test_ntxent_requires_negatives(self):
        with pytest.raises(ContractViolation):
            L.ntxent_loss(Tensor([1.0, 0.0]), Tensor([1.0, 0.0]),
                          Tensor(np.zeros((0, 2))), tau=1.0)

    def test_standardize_then_check_passes(self):
        rng = np.random.default_rng(1)
        z = L.batch_standardize(Tensor(rng.normal(size=(6, 3)) * 3 + 1))
        L.check_standardized(z.data)


def one_head_cfg(**kw):
    base = dict(variant="ntxent", heads=1, beta=0.0, kappa=1, temp_mode="constant",
                tau0=1.0, neg_agg="topk", bounds=BOUNDS)
    base.update(kw)
    return LossConfig(**base)


class TestMultiheadNtxent:
    def test_single_negative_identity_case(self):
        cfg = one_head_cfg()
        terms = L.multihead_ntxent(cfg, [(Tensor([1.0, 0.0]), Tensor([1.0, 0.0]))],
                                   [Tensor([[0.0, 1.0]])])
        np.testing.assert_allclose(terms.total().item(), -1.0, atol=1e-12)

    def test_equal_sims_cancel_per_head(self):
        for heads in (1, 3):
            cfg = one_head_cfg(heads=heads)
            pairs, negatives = [], []
            stream = SplitMix64(derive(3, heads))
            for _ in range(heads):
                a = rand_tensor(stream, (4,))
                pairs.append((a, Tensor(a.data.copy())))
                negatives.append(Tensor(a.data.copy()[None, :]))
            terms = L.multihead_ntxent(cfg, pairs, negatives)
            np.testing.assert_allclose(terms.total().item(), 0.0, atol=1e-12)

    def test_unit_penalties_cancel(self):
        # beta = 1, d' = 2, tau+ = tau- = 1: Omega = 1 on both sides
        pair = (Tensor([1.0, 0.0]), Tensor([0.0, 1.0]))
        negs = Tensor([[0.5, 0.5]])
        base = L.multihead_ntxent(one_head_cfg(), [pair], [negs]).total().item()
        with_pen = L.multihead_ntxent(one_head_cfg(beta=1.0), [pair], [negs]).total().item()
        np.testing.assert_allclose(with_pen, base, atol=1e-12)

    def test_per_head_additivity(self):
        stream = SplitMix64(8)
        pairs = [(rand_tensor(stream, (4,)), rand_tensor(stream, (4,))) for _ in range(3)]
        negatives = [rand_tensor(stream, (5, 4)) for _ in range(3)]
        cfg3 = one_head_cfg(heads=3, beta=0.3, kappa=2)
        total = L.multihead_ntxent(cfg3, pairs, negatives).total().item()
        cfg1 = one_head_cfg(heads=1, beta=0.3, kappa=2)
        parts = sum(L.multihead_ntxent(cfg1, [p], [n]).total().item()
                    for p, n in zip(pairs, negatives))
        np.testing.assert_allclose(total, parts, rtol=1e-12)

    def test_identical_heads_scale_loss(self):
        stream = SplitMix64(9)
        pair = (rand_tensor(stream, (4,)), rand_tensor(stream, (4,)))
        negs = rand_tensor(stream, (5, 4))
        one = L.multihead_ntxent(one_head_cfg(beta=0.2), [pair], [negs]).total().item()
        two = L.multihead_ntxent(one_head_cfg(heads=2, beta=0.2),
                                 [pair, pair], [negs, negs]).total().item()
        np.testing.assert_allclose(two, 2.0 * one, rtol=1e-12)

    def test_kappa_exceeding_negatives_rejected(self):
        cfg = one_head_cfg(kappa=3)
        with pytest.raises(ContractViolation):
            L.multihead_ntxent(cfg, [(Tensor([1.0, 0.0]), Tensor([1.0, 0.0]))],
                               [Tensor([[0.0, 1.0], [1.0, 1.0]])])

    def test_beta_zero_removes_penalty_dependence(self):
        """With beta = 0 and constant temperatures, changing tau moves only
        the similarity-weighted terms; penalty stays exactly zero."""
        stream = SplitMix64(10)
        pair = (rand_tensor(stream, (4,)), rand_tensor(stream, (4,)))
        negs = rand_tensor(stream, (5, 4))
        terms = L.multihead_ntxent(one_head_cfg(beta=0.0, tau0=0.37), [pair], [negs])
        assert terms.omega.item() == 0.0


class TestTopK:
    def test_selected_dominate_unselected(self):
        stream = SplitMix64(12)
        values = stream.floats(30).reshape(3, 10)
        idx = L.topk_indices(values, 4)
        for row, sel in zip(values, idx):
            chosen = row[sel]
            rest = np.delete(row, sel)
            assert chosen.min() >= rest.max()

    def test_tie_break_lowest_index(self):
        values = np.array([0.5, 0.9, 0.9, 0.1, 0.9])
        idx = L.topk_indices(values, 2)
        np.testing.assert_array_equal(idx, [1, 2])

    def test_full_set_average(self):
        # kappa = N+1 with constant temperature averages all candidates
        stream = SplitMix64(13)
        pair = (rand_tensor(stream, (4,)), rand_tensor(stream, (4,)))
        negs = rand_tensor(stream, (5, 4))
        tau = 0.7
        cfg = one_head_cfg(variant="infonce", kappa=6, tau0=tau)
        loss = L.multihead_infonce(cfg, [pair], [negs]).total().item()
        s_pos = L.cosine_sim(*pair).item()
        s_negs = (T.matmul(T.l2_normalize(negs), T.l2_normalize(pair[0]))).data
        cands = np.append(s_negs, s_pos)
        np.testing.assert_allclose(loss, -s_pos / tau + cands.mean() / tau, rtol=1e-12)

    def test_set_penalty_dim_factor_flag(self):
        stream = SplitMix64(14)
        pair = (rand_tensor(stream, (4,)), rand_tensor(stream, (4,)))
        negs = rand_tensor(stream, (5, 4))
        temp_net = Mlp.init(MlpSpec((4, 4)), seed=2)
        cfg = one_head_cfg(beta=1.0, kappa=2, temp_mode="adaptive")
        with_factor = L.multihead_ntxent(cfg, [pair], [negs], temp_net=temp_net)
        cfg_flat = dataclasses.replace(cfg, dim_factor_in_set_penalty=False)
        without = L.multihead_ntxent(cfg_flat, [pair], [negs], temp_net=temp_net)
        _, tau_neg = L.pair_temperatures(pair[0], pair[1], negs, temp_net, BOUNDS)
        s_negs = T.matmul(T.l2_normalize(negs), T.l2_normalize(pair[0])).data
        sel = L.topk_indices(s_negs, 2)
        taus = tau_neg.data[sel]
        expected_gap = (4 / 2 - 1) * np.log(taus).sum()  # (d'/2 - 1) sum log tau
        np.testing.assert_allclose(with_factor.total().item() - without.total().item(),
                                   -expected_gap, rtol=1e-10)


class TestMultiheadInfonce:
    def test_positive_selected_gives_zero(self):
        # sim+ = 1 beats every negative; max picks the positive: -1 + 1 = 0
        cfg = one_head_cfg(variant="infonce")
        pair = (Tensor([1.0, 0.0]), Tensor([1.0, 0.0]))
        negs = Tensor([[0.0, 1.0], [-1.0, 0.0]])
        loss = L.multihead_infonce(cfg, [pair], [negs]).total().item()
        np.testing.assert_allclose(loss, 0.0, atol=1e-12)

    def test_reduces_to_ntxent_when_negatives_dominate(self):
        cfg = one_head_cfg(variant="infonce")
        cfg_nt = one_head_cfg(variant="ntxent")
        pair = (Tensor([1.0, 0.0]), Tensor([0.0, 1.0]))      # sim+ = 0
        negs = Tensor([[1.0, 0.1], [0.9, 0.1]])              # both ~1
        a = L.multihead_infonce(cfg, [pair], [negs]).total().item()
        b = L.multihead_ntxent(cfg_nt, [pair], [negs]).total().item()
        np.testing.assert_allclose(a, b, rtol=1e-12)


class TestMultiheadNegcos:
    def test_perfect_alignment(self):
        u = Tensor([0.0, 1.0, 0.0])
        branches = [(u, Tensor(u.data.copy()), Tensor(u.data.copy()), Tensor(u.data.copy()))]
        cfg = one_head_cfg(variant="simsiam")
        np.testing.assert_allclose(
            L.multihead_negcos(cfg, branches).total().item(), -1.0, atol=1e-12)

    def test_stop_gradient_branches_get_zero_gradient(self):
        stream = SplitMix64(15)
        live_a, live_b = rand_tensor(stream, (4,)), rand_tensor(stream, (4,))
        tgt_a, tgt_b = rand_tensor(stream, (4,)), rand_tensor(stream, (4,))
        temp_net = Mlp.init(MlpSpec((4, 4)), seed=3)
        cfg = one_head_cfg(variant="simsiam", beta=0.5, temp_mode="adaptive")
        leaves = [live_a, live_b, tgt_a, tgt_b]
        zero_grads(leaves)
        backward(L.multihead_negcos(cfg, [(live_a, live_b, tgt_a, tgt_b)],
                                    temp_net=temp_net).total())
        assert tgt_a.grad is None and tgt_b.grad is None
        assert np.abs(grad_of(live_a)).max() > 0

    def test_value_sensitive_to_stopped_branch(self):
        """Finite differences see the stop-gradient branch even though the
        analytic gradient is exactly zero."""
        stream = SplitMix64(16)
        live_a, live_b = rand_tensor(stream, (4,)), rand_tensor(stream, (4,))
        tgt_a, tgt_b = rand_tensor(stream, (4,)), rand_tensor(stream, (4,))
        cfg = one_head_cfg(variant="simsiam")

        def value():
            return L.multihead_negcos(cfg, [(live_a, live_b, tgt_a, tgt_b)],
                                      tau=1.0).total().item()

        base = value()
        tgt_a.data[0] += 1e-3
        assert abs(value() - base) > 1e-7

    def test_two_identical_heads_double_loss(self):
        stream = SplitMix64(17)
        branch = tuple(rand_tensor(stream, (4,)) for _ in range(4))
        one = L.multihead_negcos(one_head_cfg(variant="simsiam", beta=0.4),
                                 [branch], tau=0.7).total().item()
        two = L.multihead_negcos(one_head_cfg(variant="simsiam", beta=0.4, heads=2),
                                 [branch, branch], tau=0.7).total().item()
        np.testing.assert_allclose(two, 2 * one, rtol=1e-12)


def standardized_pair(seed, n=6, d=4):
    stream = SplitMix64(seed)
    za = L.batch_standardize(rand_tensor(stream, (n, d)))
    zb = L.batch_standardize(rand_tensor(stream, (n, d)))
    return Tensor(za.data.copy()), Tensor(zb.data.copy())


class TestMultiheadCrossCorr:
    def test_identity_correlation_zero_loss(self):
        z = Tensor(np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]))
        cfg = one_head_cfg(variant="barlow", lambd=0.6)
        terms = L.multihead_cross_corr(cfg, [(z, Tensor(z.data.copy()))])
        np.testing.assert_allclose(terms.total().item(), 0.0, atol=1e-12)

    def test_lambda_gates_off_diagonals(self):
        za, zb = standardized_pair(18)
        cfg0 = one_head_cfg(variant="barlow", lambd=0.0)
        base = L.multihead_cross_corr(cfg0, [(za, zb)]).total().item()
        # permuting one side's channels changes off-diagonal structure only
        # through the diagonal; with lambda=0 the loss ignores off-diagonals
        terms = L.multihead_cross_corr(cfg0, [(za, zb)])
        assert terms.neg.item() == 0.0
        assert base == terms.total().item()

    def test_anticorrelated_pair_adds_two(self):
        # one perfectly anticorrelated channel pair contributes 1 to each of
        # the two symmetric off-diagonal entries
        base_cols = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
        za = Tensor(np.column_stack([base_cols[:, 0], base_cols[:, 1]]))
        zb = Tensor(np.column_stack([base_cols[:, 1] * -1.0, base_cols[:, 0] * -1.0]))
        cfg = one_head_cfg(variant="barlow", lambd=1.0)
        with_pair = L.multihead_cross_corr(cfg, [(za, zb)]).total().item()
        # diagonals are 0 here: loss = sum (1-0)^2 * 2 + lambda * (1 + 1)
        np.testing.assert_allclose(with_pair, 2.0 + 2.0, atol=1e-12)

    def test_small_batch_rejected(self):
        z = Tensor(np.ones((1, 2)))
        with pytest.raises(ContractViolation):
            L.multihead_cross_corr(one_head_cfg(variant="barlow"), [(z, z)])


class TestSoftmaxAggregate:
    def test_degenerate_width(self):
        out = L.softmax_negatives(Tensor([1.0]), Tensor([1.0]), d_prime=0)
        np.testing.assert_allclose(out.item(), 0.0, atol=1e-12)

    def test_equal_terms_closed_form(self):
        n, tau, s, d_prime = 7, 0.6, 0.3, 8
        out = L.softmax_negatives(Tensor(np.full(n, s)), Tensor(np.full(n, tau)), d_prime)
        expected = math.log(n) - (d_prime / 2) * math.log(2 * math.pi * tau) + (s - 1) / tau
        np.testing.assert_allclose(out.item(), expected, rtol=1e-12)

    def test_dominant_term(self):
        tau = 0.05
        sims = np.array([0.9, 0.9 - 10 * tau, 0.9 - 12 * tau])
        out = L.softmax_negatives(Tensor(sims), Tensor(np.full(3, tau)), 8).item()
        single = L.softmax_negatives(Tensor(sims[:1]), Tensor([tau]), 8).item()
        assert abs(out - single) < 1e-3

    def test_non_positive_tau_rejected(self):
        with pytest.raises(DomainError):
            L.softmax_negatives(Tensor([0.5]), Tensor([0.0]), 8)


class TestMleOracle:
    def _instance(self, seed, heads):
        stream = SplitMix64(seed)
        pairs = [(rand_tensor(stream, (8,)), rand_tensor(stream, (8,))) for _ in range(heads)]
        negatives = [rand_tensor(stream, (6, 8)) for _ in range(heads)]
        temp_net = Mlp.init(MlpSpec((8, 8)), derive(seed, "phi"))
        return pairs, negatives, temp_net

    @pytest.mark.parametrize("variant", ["ntxent", "infonce"])
    def test_value_offset_over_random_instances(self, variant):
        loss_op = L.multihead_ntxent if variant == "ntxent" else L.multihead_infonce
        for i in range(100):
            heads = 1 + 2 * (i % 2)
            pairs, negatives, temp_net = self._instance(derive(100, variant, i), heads)
            cfg = LossConfig(variant=variant, heads=heads, beta=1.0, temp_mode="adaptive",
                             neg_agg="softmax", bounds=BOUNDS)
            loss = loss_op(cfg, pairs, negatives, temp_net=temp_net).total().item()
            temps = [L.pair_temperatures(a, p, n, temp_net, BOUNDS)
                     for (a, p), n in zip(pairs, negatives)]
            oracle = L.gaussian_ratio_loss(variant, pairs, negatives, temps, 8).item()
            expected = loss + heads * 4.0 * math.log(2 * math.pi)
            assert abs(oracle - expected) / max(1.0, abs(oracle)) < 1e-8

    def test_gradients_agree(self):
        pairs, negatives, temp_net = self._instance(42, 2)
        cfg = LossConfig(variant="ntxent", heads=2, beta=1.0, temp_mode="adaptive",
                         neg_agg="softmax", bounds=BOUNDS)
        leaves = [t for pair in pairs for t in pair] + negatives + temp_net.params
        zero_grads(leaves)
        backward(L.multihead_ntxent(cfg, pairs, negatives, temp_net=temp_net).total())
        g_loss = [grad_of(p).copy() for p in leaves]
        zero_grads(leaves)
        temps = [L.pair_temperatures(a, p, n, temp_net, BOUNDS)
                 for (a, p), n in zip(pairs, negatives)]
        backward(L.gaussian_ratio_loss("ntxent", pairs, negatives, temps, 8))
        g_oracle = [grad_of(p).copy() for p in leaves]
        for a, b in zip(g_loss, g_oracle):
            assert np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))) < 1e-8

    def test_symmetric_ratio_is_zero(self):
        u = Tensor([1.0, 0.0])
        pairs = [(u, Tensor([0.0, 1.0]))]
        negatives = [Tensor([[0.0, 1.0]])]
        temps = [(Tensor(0.4), Tensor([0.4]))]
        oracle = L.gaussian_ratio_loss("ntxent", pairs, negatives, temps, 2)
        np.testing.assert_allclose(oracle.item(), 0.0, atol=1e-12)


class TestReductionProperty:
    def test_gradient_matches_baseline(self):
        stream = SplitMix64(77)
        anchor, positive = rand_tensor(stream, (8,)), rand_tensor(stream, (8,))
        negs = rand_tensor(stream, (6, 8))
        leaves = [anchor, positive, negs]
        for beta in (0.0, 0.5, 2.0):
            cfg = LossConfig(variant="ntxent", heads=1, beta=beta, temp_mode="constant",
                             tau0=0.2, neg_agg="softmax")
            zero_grads(leaves)
            backward(L.multihead_ntxent(cfg, [(anchor, positive)], [negs]).total())
            g_multi = [grad_of(p).copy() for p in leaves]
            zero_grads(leaves)
            backward(L.ntxent_loss(anchor, positive, negs, tau=0.2))
            g_base = [grad_of(p).copy() for p in leaves]
            for a, b in zip(g_multi, g_base):
                assert np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))) < 1e-8


class TestLossGradcheck:
    @pytest.mark.parametrize("variant", ["ntxent", "infonce"])
    @pytest.mark.parametrize("temp_mode", ["constant", "adaptive"])
    @pytest.mark.parametrize("agg,kappa", [("topk", 1), ("topk", 3), ("softmax", 1)])
    def test_nce_variants(self, variant, temp_mode, agg, kappa):
        stream = SplitMix64(derive(55, variant, temp_mode, agg, kappa))
        pairs = [(rand_tensor(stream, (8,)), rand_tensor(stream, (8,))) for _ in range(2)]
        negatives = [rand_tensor(stream, (6, 8)) for _ in range(2)]
        temp_net = Mlp.init(MlpSpec((8, 8)), seed=4)
        cfg = LossConfig(variant=variant, heads=2, beta=0.7, kappa=kappa,
                         temp_mode=temp_mode, tau0=0.5, neg_agg=agg, bounds=BOUNDS)
        op = L.multihead_ntxent if variant == "ntxent" else L.multihead_infonce
        params = [t for pair in pairs for t in pair] + negatives
        if temp_mode == "adaptive":
            params += temp_net.params

        def loss_fn():
            net = temp_net if temp_mode == "adaptive" else None
            return op(cfg, pairs, negatives, temp_net=net).total()

        assert finite_diff_check(loss_fn, params) < 1e-4

    def test_config_validation(self):
        with pytest.raises(ContractViolation):
            LossConfig(variant="unknown")
        with pytest.raises(ContractViolation):
            LossConfig(kappa=0)
        with pytest.raises(ContractViolation):
            LossConfig(family="baseline", heads=2)
        with pytest.raises(ContractViolation):
            LossConfig(family="baseline", temp_mode="adaptive", heads=1)

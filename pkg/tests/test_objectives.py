import math

import pytest
import torch

import oracles
from dismae.config import ConfigError, LossConfig, ModelConfig
from dismae.masking import MaskPlan, random_masking
from dismae.nets import build_model
from dismae.objectives import (
    adaptive_contrastive_loss,
    adaptive_weights,
    build_swap_pairing,
    compute_pretrain_losses,
    contrastive_term,
    contrastive_terms,
    dg_objective,
    domain_propensity,
    gamma_recon_loss,
    per_sample_recon_error,
    similarity,
    swap_reconstructions,
    udg_objective,
)
from dismae.patches import patchify

GAMMA = 0.008
TAU = 0.4


def one_patch_plan(batch=1, num_patches=2):
    """Patch 0 visible, patch 1 masked."""
    vis = torch.zeros(batch, 1, dtype=torch.long)
    masked = torch.ones(batch, 1, dtype=torch.long)
    restore = torch.arange(2).unsqueeze(0).expand(batch, -1)
    return MaskPlan(num_patches=2, len_keep=1, visible_idx=vis, masked_idx=masked, restore_perm=restore)


def _tokens(diffs):
    """(1, 2, len(diffs)) target zeros and pred with the given masked-patch diffs."""
    target = torch.zeros(1, 2, len(diffs), dtype=torch.float64)
    pred = target.clone()
    pred[0, 1] = torch.tensor(diffs, dtype=torch.float64)
    return pred, target


class TestReconError:
    def test_zero_when_equal(self):
        pred, target = _tokens([0.0, 0.0])
        err = per_sample_recon_error(pred, pred, one_patch_plan())
        assert float(err) == 0.0

    def test_rmse_06_08(self):
        pred, target = _tokens([0.6, 0.8])
        err = per_sample_recon_error(pred, target, one_patch_plan())
        assert abs(float(err) - math.sqrt(0.5)) < 1e-12
        assert abs(float(err) - 0.70711) < 1e-5

    def test_rmse_tiny_diffs(self):
        pred, target = _tokens([0.003, 0.004])
        err = per_sample_recon_error(pred, target, one_patch_plan())
        assert abs(float(err) - 0.003536) < 1e-6

    def test_empty_mask_rejected(self):
        plan = MaskPlan(
            num_patches=2,
            len_keep=2,
            visible_idx=torch.arange(2).unsqueeze(0),
            masked_idx=torch.zeros(1, 0, dtype=torch.long),
            restore_perm=torch.arange(2).unsqueeze(0),
        )
        pred, target = _tokens([0.1, 0.1])
        with pytest.raises(ConfigError, match="r > 0"):
            per_sample_recon_error(pred, target, plan)


class TestGammaLoss:
    def test_worked_example(self):
        loss = gamma_recon_loss(torch.tensor([math.sqrt(0.5)], dtype=torch.float64), GAMMA)
        assert abs(float(loss) - 0.69911) < 1e-5
        assert abs(float(loss) - (math.sqrt(0.5) - GAMMA)) < 1e-12

    def test_inside_margin_is_zero(self):
        assert float(gamma_recon_loss(torch.tensor([0.003536]), GAMMA)) == 0.0

    def test_batch_mean(self):
        loss = gamma_recon_loss(torch.tensor([0.108, 0.008], dtype=torch.float64), GAMMA)
        assert abs(float(loss) - 0.05) < 1e-12

    def test_monotone_nonincreasing_in_gamma(self):
        dists = torch.tensor([0.3, 0.01, 0.7], dtype=torch.float64)
        values = [float(gamma_recon_loss(dists, g)) for g in (0.001, 0.01, 0.1, 0.5, 1.0)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_rejects_nonpositive_gamma(self):
        with pytest.raises(ConfigError):
            gamma_recon_loss(torch.tensor([0.1]), 0.0)


class TestSimilarity:
    def test_perfect_reconstruction(self):
        pred, _ = _tokens([0.0, 0.0])
        assert float(similarity(pred, pred, one_patch_plan(), GAMMA)) == 0.0

    def test_values(self):
        for rmse, expected in ((0.108, -0.1), (0.5, -0.492)):
            pred, target = _tokens([rmse, rmse])
            s = similarity(target, pred, one_patch_plan(), GAMMA)
            assert abs(float(s) - expected) < 1e-9

    def test_zero_iff_within_margin(self):
        pred, target = _tokens([0.005, 0.005])
        assert float(similarity(target, pred, one_patch_plan(), GAMMA)) == 0.0
        pred, target = _tokens([0.02, 0.02])
        assert float(similarity(target, pred, one_patch_plan(), GAMMA)) < 0.0


class TestContrastive:
    def test_one_negative_worked_example(self):
        s_pos = torch.tensor([-0.1], dtype=torch.float64)
        s_neg = torch.tensor([-0.5], dtype=torch.float64)
        terms, empty = contrastive_terms(s_pos, s_neg, torch.tensor([0]), TAU)
        assert empty == 0
        assert abs(float(terms[0]) - math.log(1 + math.exp(-1.0))) < 1e-12
        assert abs(float(terms[0]) - 0.31326) < 1e-5

    def test_equal_similarities_log2(self):
        s = torch.tensor([-0.3], dtype=torch.float64)
        terms, _ = contrastive_terms(s, s.clone(), torch.tensor([0]), TAU)
        assert abs(float(terms[0]) - math.log(2.0)) < 1e-12

    def test_no_negatives_zero_with_counter(self):
        s_pos = torch.tensor([-0.1, -0.2], dtype=torch.float64)
        s_neg = torch.tensor([-0.5], dtype=torch.float64)
        terms, empty = contrastive_terms(s_pos, s_neg, torch.tensor([1]), TAU)
        assert float(terms[0]) == 0.0
        assert empty == 1

    def test_nonnegative_and_negative_set_permutation_invariant(self):
        gen = torch.Generator().manual_seed(0)
        s_pos = -torch.rand(3, generator=gen, dtype=torch.float64)
        s_neg = -torch.rand(7, generator=gen, dtype=torch.float64)
        anchors = torch.tensor([0, 0, 0, 1, 1, 2, 2])
        terms, _ = contrastive_terms(s_pos, s_neg, anchors, TAU)
        assert torch.all(terms >= 0)
        perm = torch.tensor([2, 0, 1, 4, 3, 6, 5])
        terms_p, _ = contrastive_terms(s_pos, s_neg[perm], anchors[perm], TAU)
        assert torch.allclose(terms, terms_p, atol=1e-12)

    def test_strictly_increasing_in_any_negative(self):
        s_pos = torch.tensor([-0.2], dtype=torch.float64)
        base = torch.tensor([-0.5, -0.4], dtype=torch.float64)
        anchors = torch.tensor([0, 0])
        t0, _ = contrastive_terms(s_pos, base, anchors, TAU)
        bumped = base.clone()
        bumped[1] += 0.05
        t1, _ = contrastive_terms(s_pos, bumped, anchors, TAU)
        assert float(t1[0]) > float(t0[0])

    def test_single_anchor_wrapper_matches(self):
        gen = torch.Generator().manual_seed(3)
        target = torch.rand(1, 2, 4, generator=gen, dtype=torch.float64)
        recon_ii = torch.rand(1, 2, 4, generator=gen, dtype=torch.float64)
        recons_ij = torch.rand(3, 2, 4, generator=gen, dtype=torch.float64)
        plan = one_patch_plan()
        term = contrastive_term(target, recon_ii, recons_ij, plan, GAMMA, TAU)
        s_pos = oracles.sim_from_rmse(
            oracles.recon_rmse(recon_ii.tolist(), target.tolist(), [[1]])[0], GAMMA
        )
        s_negs = [
            oracles.sim_from_rmse(
                oracles.recon_rmse(recons_ij[k : k + 1].tolist(), target.tolist(), [[1]])[0], GAMMA
            )
            for k in range(3)
        ]
        assert abs(float(term) - oracles.contrastive(s_pos, s_negs, TAU)) < 1e-12


class TestPropensityAndWeights:
    def test_uniform_probs(self):
        probs = torch.full((4, 3), 1.0 / 3.0)
        p = domain_propensity(probs, torch.tensor([0, 1, 2, 0]), 0.05)
        assert torch.allclose(p, torch.full((4,), 1.0 / 3.0))

    def test_lookup(self):
        probs = torch.tensor([[0.5, 0.25, 0.25]])
        assert float(domain_propensity(probs, torch.tensor([0]), 0.05)) == 0.5

    def test_clamp(self):
        probs = torch.tensor([[0.001, 0.999]], dtype=torch.float64)
        p = domain_propensity(probs, torch.tensor([0]), 0.05)
        assert float(p) == 0.05

    def test_invalid_domain_index(self):
        with pytest.raises(ValueError):
            domain_propensity(torch.full((1, 2), 0.5), torch.tensor([2]), 0.05)

    def test_ipw_values(self):
        p = torch.tensor([0.5, 1.0 / 3.0, 0.05], dtype=torch.float64)
        w = adaptive_weights(p, "ipw", 3)
        assert abs(float(w[0]) - 2.0) < 1e-12
        assert abs(float(w[1]) - 3.0) < 1e-12
        assert abs(float(w[2]) - 20.0) < 1e-12

    def test_none_random_reverse(self):
        p = torch.tensor([0.25, 0.5])
        assert torch.all(adaptive_weights(p, "none", 3) == 1.0)
        assert float(adaptive_weights(p, "reverse", 3)[0]) == 0.25
        rng = torch.Generator().manual_seed(0)
        w = adaptive_weights(p, "random", 3, rng)
        assert torch.all(w >= 1.0) and torch.all(w <= 3.0)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            adaptive_weights(torch.tensor([0.5]), "bogus", 2)

    def test_weights_carry_no_gradient(self):
        p = torch.tensor([0.5, 0.25], requires_grad=True)
        w = adaptive_weights(p, "ipw", 2)
        assert not w.requires_grad

    def test_ipw_range_bound(self):
        gen = torch.Generator().manual_seed(1)
        probs = torch.rand(64, 4, generator=gen).softmax(dim=1)
        p = domain_propensity(probs, torch.zeros(64, dtype=torch.long), 0.05)
        w = adaptive_weights(p, "ipw", 4)
        assert torch.all(w >= 1.0) and torch.all(w <= 20.0)


class TestWeightedLossAndObjectives:
    def test_unit_weights_plain_mean(self):
        terms = torch.tensor([0.1, 0.3, 0.5], dtype=torch.float64)
        loss = adaptive_contrastive_loss(terms, torch.ones(3, dtype=torch.float64))
        assert abs(float(loss) - 0.3) < 1e-12

    def test_worked_example(self):
        terms = torch.tensor([0.31326, 0.0], dtype=torch.float64)
        weights = torch.tensor([2.0, 3.0], dtype=torch.float64)
        assert abs(float(adaptive_contrastive_loss(terms, weights)) - 0.31326) < 1e-12

    def test_empty_batch_error(self):
        with pytest.raises(ValueError):
            adaptive_contrastive_loss(torch.zeros(0), torch.zeros(0))

    def test_udg_arithmetic(self):
        rec = torch.tensor(0.5, dtype=torch.float64)
        con = torch.tensor(0.2, dtype=torch.float64)
        assert abs(float(udg_objective(rec, con, 1e-3)) - 0.5002) < 1e-12
        assert float(udg_objective(rec, con, 0.0)) == 0.5
        assert float(udg_objective(rec, torch.tensor(0.0), 1e-3)) == 0.5

    def test_dg_reduces_to_udg_at_lambda2_zero(self):
        rec = torch.tensor(0.4, dtype=torch.float64)
        con = torch.tensor(0.1, dtype=torch.float64)
        logits = torch.randn(3, 5, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2])
        dg = dg_objective(rec, con, labels, logits, 1e-3, 0.0)
        assert abs(float(dg) - float(udg_objective(rec, con, 1e-3))) < 1e-12

    def test_dg_uniform_logits_ln5(self):
        logits = torch.zeros(4, 5, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 3])
        dg = dg_objective(torch.tensor(0.0), torch.tensor(0.0), labels, logits, 0.0, 1.0)
        assert abs(float(dg) - math.log(5.0)) < 1e-12

    def test_dg_requires_labels(self):
        with pytest.raises(ConfigError, match="UDG"):
            dg_objective(torch.tensor(0.0), torch.tensor(0.0), None, torch.zeros(1, 2), 0.0, 1.0)


class TestPairing:
    def test_intra_domain_candidates(self):
        domains = torch.tensor([0, 0, 1, 1, 1])
        pairing = build_swap_pairing(domains, "intra_domain", 0)
        pairing.validate(5, domains, intra=True)
        assert pairing.partners_of(0) == [1]
        assert sorted(pairing.partners_of(2)) == [3, 4]

    def test_inter_domain_replaces(self):
        domains = torch.tensor([0, 0, 1, 1])
        pairing = build_swap_pairing(domains, "inter_domain", 0)
        pairing.validate(4, domains, intra=False)
        assert sorted(pairing.partners_of(0)) == [2, 3]

    def test_cap_by_subsampling(self):
        domains = torch.zeros(10, dtype=torch.long)
        rng = torch.Generator().manual_seed(0)
        pairing = build_swap_pairing(domains, "intra_domain", 3, rng)
        for i in range(10):
            partners = pairing.partners_of(i)
            assert len(partners) == 3
            assert i not in partners

    def test_cap_zero_keeps_all(self):
        domains = torch.zeros(6, dtype=torch.long)
        pairing = build_swap_pairing(domains, "intra_domain", 0)
        assert pairing.num_pairs == 6 * 5

    def test_swap_count_contract(self, tiny_model_config):
        model = build_model(tiny_model_config, 0)
        gen = torch.Generator().manual_seed(4)
        images = torch.rand(4, 3, 4, 4, generator=gen)
        grid = patchify(images, model.cfg)
        visible, plan = random_masking(grid.tokens, 0.5, gen)
        tokens, _ = model.encode_semantic(visible, plan)
        v = model.encode_variation(visible, plan)
        domains = torch.tensor([0, 0, 0, 0])
        pairing = build_swap_pairing(domains, "intra_domain", 0)
        preds = swap_reconstructions(model, tokens, v, pairing, plan)
        assert preds.shape == (12, plan.num_patches, model.cfg.patch_values)

    def test_degenerate_self_pair_identity(self, tiny_model_config):
        from dismae.objectives import SwapPairing

        model = build_model(tiny_model_config, 0)
        gen = torch.Generator().manual_seed(4)
        images = torch.rand(2, 3, 4, 4, generator=gen)
        grid = patchify(images, model.cfg)
        visible, plan = random_masking(grid.tokens, 0.5, gen)
        tokens, _ = model.encode_semantic(visible, plan)
        v = model.encode_variation(visible, plan)
        pairing = SwapPairing(torch.tensor([0, 1]), torch.tensor([0, 1]))
        preds = swap_reconstructions(model, tokens, v, pairing, plan)
        direct = model.decode(tokens, v, plan)
        assert torch.equal(preds, direct)

    def test_out_of_range_partner_rejected(self, tiny_model_config):
        from dismae.objectives import SwapPairing

        model = build_model(tiny_model_config, 0)
        gen = torch.Generator().manual_seed(4)
        images = torch.rand(2, 3, 4, 4, generator=gen)
        grid = patchify(images, model.cfg)
        visible, plan = random_masking(grid.tokens, 0.5, gen)
        tokens, _ = model.encode_semantic(visible, plan)
        v = model.encode_variation(visible, plan)
        with pytest.raises(ValueError):
            swap_reconstructions(model, tokens, v, SwapPairing(torch.tensor([0]), torch.tensor([5])), plan)


class TestProductionVsOracle:
    """Loop-based reimplementation of the loss stack agrees within 1e-9."""

    def _setup(self, tiny_model_config, seed=0, weight_mode="ipw"):
        model = build_model(tiny_model_config, seed).double()
        gen = torch.Generator().manual_seed(seed + 100)
        images = torch.rand(4, 3, 4, 4, generator=gen, dtype=torch.float64)
        domains = torch.tensor([0, 0, 1, 1])
        # non-trivial classifier so propensities differ from 1/K
        with torch.no_grad():
            model.domain_classifier.fc2.weight.uniform_(-0.7, 0.7, generator=gen)
            model.domain_classifier.fc2.bias.uniform_(-0.2, 0.2, generator=gen)
        grid = patchify(images, model.cfg)
        visible, plan = random_masking(grid.tokens, 0.5, gen)
        cfg = LossConfig(weight_mode=weight_mode, max_negatives=0, lambda1=1e-3)
        out = compute_pretrain_losses(model, images, domains, plan, visible, grid.tokens, cfg, rng=gen)
        return model, images, domains, grid, visible, plan, cfg, out

    def test_full_stack_equivalence(self, tiny_model_config):
        model, images, domains, grid, visible, plan, cfg, out = self._setup(tiny_model_config)
        tokens, s0 = model.encode_semantic(visible, plan)
        v0 = model.encode_variation(visible, plan)
        pred = model.decode(tokens, v0, plan).detach()
        target = grid.tokens
        masked = plan.masked_idx.tolist()

        dist = oracles.recon_rmse(pred.tolist(), target.tolist(), masked)
        l_rec = oracles.gamma_loss(dist, cfg.gamma)
        assert abs(l_rec - float(out.recon.detach())) < 1e-9

        probs = model.classify_domain(s0.detach()).detach()
        terms = []
        weights = []
        for i in range(4):
            s_pos = oracles.sim_from_rmse(dist[i], cfg.gamma)
            s_negs = []
            for j in range(4):
                if j != i and int(domains[j]) == int(domains[i]):
                    swap = model.decode(tokens[i : i + 1], v0[j : j + 1], plan.rows(torch.tensor([i]))).detach()
                    rm = oracles.recon_rmse(swap.tolist(), target[i : i + 1].tolist(), [masked[i]])[0]
                    s_negs.append(oracles.sim_from_rmse(rm, cfg.gamma))
            terms.append(oracles.contrastive(s_pos, s_negs, cfg.tau))
            p = oracles.clamp_propensity(float(probs[i, int(domains[i])]), cfg.p_clamp_min)
            weights.append(oracles.weight(p, "ipw"))
        l_con = oracles.weighted_mean(terms, weights)
        assert abs(l_con - float(out.contrastive.detach())) < 1e-9
        assert abs(oracles.udg(l_rec, l_con, cfg.lambda1) - float(out.total.detach())) < 1e-9

    def test_unweighted_mode_equivalence(self, tiny_model_config):
        model, images, domains, grid, visible, plan, cfg, out = self._setup(tiny_model_config, weight_mode="none")
        tokens, _ = model.encode_semantic(visible, plan)
        v0 = model.encode_variation(visible, plan)
        pred = model.decode(tokens, v0, plan).detach()
        masked = plan.masked_idx.tolist()
        dist = oracles.recon_rmse(pred.tolist(), grid.tokens.tolist(), masked)
        terms = []
        for i in range(4):
            s_pos = oracles.sim_from_rmse(dist[i], cfg.gamma)
            s_negs = []
            for j in range(4):
                if j != i and int(domains[j]) == int(domains[i]):
                    swap = model.decode(tokens[i : i + 1], v0[j : j + 1], plan.rows(torch.tensor([i]))).detach()
                    rm = oracles.recon_rmse(swap.tolist(), grid.tokens[i : i + 1].tolist(), [masked[i]])[0]
                    s_negs.append(oracles.sim_from_rmse(rm, cfg.gamma))
            terms.append(oracles.contrastive(s_pos, s_negs, cfg.tau))
        assert abs(oracles.weighted_mean(terms, [1.0] * 4) - float(out.contrastive.detach())) < 1e-9


class TestCompositeProperties:
    def test_no_gradient_into_classifier(self, tiny_model_config):
        model = build_model(tiny_model_config, 1).double()
        gen = torch.Generator().manual_seed(5)
        with torch.no_grad():
            model.domain_classifier.fc2.weight.uniform_(-0.5, 0.5, generator=gen)
        images = torch.rand(4, 3, 4, 4, generator=gen, dtype=torch.float64)
        domains = torch.tensor([0, 0, 1, 1])
        grid = patchify(images, model.cfg)
        visible, plan = random_masking(grid.tokens, 0.5, gen)
        cfg = LossConfig(max_negatives=0)
        out = compute_pretrain_losses(model, images, domains, plan, visible, grid.tokens, cfg, rng=gen)
        grads = torch.autograd.grad(
            out.total, list(model.domain_classifier.parameters()), allow_unused=True
        )
        assert all(g is None or torch.all(g == 0) for g in grads)

    def test_classifier_perturbation_leaves_backbone_grads_unchanged(self, tiny_model_config):
        """With the propensity-derived weights frozen, nudging classifier
        parameters must not move the backbone gradient at all."""
        model = build_model(tiny_model_config, 3).double()
        gen = torch.Generator().manual_seed(8)
        images = torch.rand(4, 3, 4, 4, generator=gen, dtype=torch.float64)
        domains = torch.tensor([0, 0, 1, 1])
        grid = patchify(images, model.cfg)
        visible, plan = random_masking(grid.tokens, 0.5, gen)
        cfg = LossConfig(max_negatives=0)
        pairing = build_swap_pairing(domains, "intra_domain", 0, gen)
        with torch.no_grad():
            model.domain_classifier.fc2.weight.uniform_(-0.5, 0.5, generator=gen)
            _, s0 = model.encode_semantic(visible, plan)
            frozen_p = domain_propensity(model.classify_domain(s0), domains, cfg.p_clamp_min)
        weights = adaptive_weights(frozen_p, "ipw", 2)

        def backbone_grads():
            out = compute_pretrain_losses(
                model, images, domains, plan, visible, grid.tokens, cfg,
                pairing=pairing, weights=weights,
            )
            grads = torch.autograd.grad(out.total, model.backbone_parameters())
            return torch.cat([g.reshape(-1) for g in grads])

        before = backbone_grads()
        with torch.no_grad():
            model.domain_classifier.fc1.weight[0, 0] += 1e-5
        after = backbone_grads()
        assert torch.equal(before, after)

    def test_batch_reorder_invariance(self, tiny_model_config):
        model = build_model(tiny_model_config, 2).double()
        gen = torch.Generator().manual_seed(6)
        images = torch.rand(4, 3, 4, 4, generator=gen, dtype=torch.float64)
        domains = torch.tensor([0, 1, 0, 1])
        grid = patchify(images, model.cfg)
        visible, plan = random_masking(grid.tokens, 0.5, gen)
        cfg = LossConfig(max_negatives=0)
        out = compute_pretrain_losses(model, images, domains, plan, visible, grid.tokens, cfg, rng=gen)
        perm = torch.tensor([2, 0, 3, 1])
        out_p = compute_pretrain_losses(
            model, images[perm], domains[perm], plan.rows(perm),
            visible[perm], grid.tokens[perm], cfg, rng=gen,
        )
        assert abs(float(out.recon.detach()) - float(out_p.recon.detach())) < 1e-12
        assert abs(float(out.contrastive.detach()) - float(out_p.contrastive.detach())) < 1e-12

    def test_lambda1_zero_skips_contrastive(self, tiny_model_config):
        import dataclasses

        cfg_model = dataclasses.replace(tiny_model_config, variation_enabled=False)
        model = build_model(cfg_model, 0)
        gen = torch.Generator().manual_seed(7)
        images = torch.rand(4, 3, 4, 4, generator=gen)
        domains = torch.tensor([0, 0, 1, 1])
        grid = patchify(images, model.cfg)
        visible, plan = random_masking(grid.tokens, 0.5, gen)
        out = compute_pretrain_losses(
            model, images, domains, plan, visible, grid.tokens, LossConfig(lambda1=0.0), rng=gen
        )
        assert float(out.contrastive.detach()) == 0.0
        assert float(out.total.detach()) == float(out.recon.detach())

"""Loss terms: margin-constrained reconstruction, variation swapping, the
reweighted intra-domain contrastive term, and the combined objectives.

All functions are pure in (inputs, params, explicit rng) and keep gradients
flowing only where the optimization step wants them: propensities and the
weights derived from them are always detached constants.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .config import ConfigError, LossConfig
from .masking import MaskPlan
from .nets import DisMAE

log = logging.getLogger(__name__)


def per_sample_recon_error(pred_tokens: Tensor, target_tokens: Tensor, plan: MaskPlan) -> Tensor:
    """Root-mean-square error over all masked-patch pixel values, per sample."""
    if pred_tokens.shape != target_tokens.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred_tokens.shape)} vs target {tuple(target_tokens.shape)}")
    if plan.num_masked == 0:
        raise ConfigError("mask ratio 0 leaves no masked patches; training requires r > 0")
    idx = plan.masked_idx.unsqueeze(-1).expand(-1, -1, pred_tokens.shape[-1])
    diff = torch.gather(pred_tokens, 1, idx) - torch.gather(target_tokens, 1, idx)
    return diff.pow(2).mean(dim=(1, 2)).sqrt()


def gamma_recon_loss(distances: Tensor, gamma: float) -> Tensor:
    """Mean over the batch of max(distance - gamma, 0)."""
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    return torch.clamp(distances - gamma, min=0.0).mean()


def similarity(target_tokens: Tensor, pred_tokens: Tensor, plan: MaskPlan, gamma: float) -> Tensor:
    """Per-sample similarity: the negated margin-constrained reconstruction error.

    Always <= 0; equals 0 exactly when the masked-patch RMSE is within gamma.
    """
    err = per_sample_recon_error(pred_tokens, target_tokens, plan)
    return -torch.clamp(err - gamma, min=0.0)


@dataclass
class SwapPairing:
    """Flattened (anchor, partner) index pairs drawn from one batch."""

    anchors: Tensor  # (M,) long
    partners: Tensor  # (M,) long

    def __post_init__(self) -> None:
        if self.anchors.shape != self.partners.shape:
            raise ValueError("anchors and partners must have equal length")

    @property
    def num_pairs(self) -> int:
        return int(self.anchors.numel())

    def partners_of(self, anchor: int) -> list[int]:
        return self.partners[self.anchors == anchor].tolist()

    def validate(
        self,
        batch_size: int,
        domains: Tensor | None = None,
        intra: bool = True,
        allow_self: bool = False,
    ) -> None:
        if self.num_pairs == 0:
            return
        if int(self.anchors.min()) < 0 or int(self.anchors.max()) >= batch_size:
            raise ValueError("anchor index out of range")
        if int(self.partners.min()) < 0 or int(self.partners.max()) >= batch_size:
            raise ValueError("partner index out of range")
        if not allow_self and bool((self.anchors == self.partners).any()):
            raise ValueError("pairing may not use the anchor as its own partner")
        if domains is not None:
            same = domains[self.anchors] == domains[self.partners]
            if intra and not bool(same.all()):
                raise ValueError("intra-domain pairing contains a cross-domain pair")
            if not intra and bool(same.any()):
                raise ValueError("inter-domain pairing contains a same-domain pair")


def build_swap_pairing(
    domains: Tensor,
    scope: str = "intra_domain",
    max_negatives: int = 0,
    rng: torch.Generator | None = None,
) -> SwapPairing:
    """All in-batch partners per anchor under the given scope, optionally
    capped by seeded uniform subsampling (cap 0 = keep all)."""
    if scope not in ("intra_domain", "inter_domain"):
        raise ConfigError(f"unknown negatives_scope {scope!r}")
    if max_negatives > 0 and rng is None:
        raise ValueError("capped subsampling needs an explicit rng")
    b = int(domains.numel())
    anchors: list[Tensor] = []
    partners: list[Tensor] = []
    for i in range(b):
        if scope == "intra_domain":
            cand = torch.nonzero(domains == domains[i], as_tuple=False).flatten()
            cand = cand[cand != i]
        else:
            cand = torch.nonzero(domains != domains[i], as_tuple=False).flatten()
        if max_negatives > 0 and cand.numel() > max_negatives:
            pick = torch.randperm(cand.numel(), generator=rng)[:max_negatives]
            cand = cand[torch.sort(pick).values]
        if cand.numel():
            anchors.append(torch.full((cand.numel(),), i, dtype=torch.long))
            partners.append(cand.to(torch.long))
    if not anchors:
        return SwapPairing(torch.empty(0, dtype=torch.long), torch.empty(0, dtype=torch.long))
    return SwapPairing(torch.cat(anchors), torch.cat(partners))


def swap_reconstructions(
    model: DisMAE,
    semantic_tokens: Tensor,
    variation_cls: Tensor,
    pairing: SwapPairing,
    plan: MaskPlan,
) -> Tensor:
    """Decode each anchor's semantics under its partner's variation summary,
    reusing the anchor's mask plan. Returns (num_pairs, L, P). A self-pair
    (i, i) is legal here and reproduces the plain reconstruction."""
    pairing.validate(semantic_tokens.shape[0], allow_self=True)
    if pairing.num_pairs == 0:
        l, p = plan.num_patches, model.cfg.patch_values
        return semantic_tokens.new_zeros((0, l, p))
    return model.decode(
        semantic_tokens[pairing.anchors],
        variation_cls[pairing.partners],
        plan.rows(pairing.anchors),
    )


def contrastive_terms(s_pos: Tensor, s_neg: Tensor, anchors: Tensor, tau: float) -> tuple[Tensor, int]:
    """Batched InfoNCE-style terms over reconstruction similarities.

    ``l_i = -log( exp(s_pos_i/tau) / (exp(s_pos_i/tau) + sum_j exp(s_neg_ij/tau)) )``
    with the positive always part of the denominator. Anchors with an empty
    negative set contribute 0; their count is returned for the caller's
    warning counter.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    b = s_pos.shape[0]
    counts = torch.bincount(anchors, minlength=b) if anchors.numel() else torch.zeros(b, dtype=torch.long)
    empty = int((counts == 0).sum())
    if empty:
        log.debug("contrastive loss: %d anchors had no negatives", empty)
    if anchors.numel() == 0:
        return torch.zeros_like(s_pos), empty
    max_n = int(counts.max())
    z = (s_neg - s_pos[anchors]) / tau
    padded = torch.full((b, max_n + 1), -torch.inf, dtype=s_pos.dtype, device=s_pos.device)
    padded[:, 0] = 0.0  # the positive term, exp(0)
    order = torch.argsort(anchors, stable=True)
    slot = torch.cat([torch.arange(int(c)) for c in counts if int(c) > 0]) if int(counts.sum()) else torch.empty(0, dtype=torch.long)
    padded[anchors[order], slot + 1] = z[order]
    return torch.logsumexp(padded, dim=1), empty


def contrastive_term(
    target_i: Tensor,
    recon_ii: Tensor,
    recons_ij: Tensor,
    plan_i: MaskPlan,
    gamma: float,
    tau: float,
) -> Tensor:
    """Single-anchor contrastive term; `target_i`/`recon_ii` are (1, L, P) and
    `recons_ij` stacks the swapped reconstructions (n, L, P)."""
    s_pos = similarity(target_i, recon_ii, plan_i, gamma)
    n = recons_ij.shape[0]
    if n == 0:
        return torch.zeros((), dtype=s_pos.dtype)
    plan_rep = plan_i.rows(torch.zeros(n, dtype=torch.long))
    s_neg = similarity(target_i.expand(n, -1, -1), recons_ij, plan_rep, gamma)
    term, _ = contrastive_terms(s_pos, s_neg, torch.zeros(n, dtype=torch.long), tau)
    return term[0]


def domain_propensity(probs: Tensor, domains: Tensor, p_clamp_min: float) -> Tensor:
    """Classifier probability of each sample's true domain, clamped from below."""
    k = probs.shape[1]
    if domains.numel() and (int(domains.min()) < 0 or int(domains.max()) >= k):
        raise ValueError(f"domain index out of range for {k} domains")
    p = probs.gather(1, domains.view(-1, 1)).squeeze(1)
    return p.clamp(min=p_clamp_min)


def adaptive_weights(
    p: Tensor,
    weight_mode: str,
    num_domains: int,
    rng: torch.Generator | None = None,
) -> Tensor:
    """Per-sample contrastive weights; constants w.r.t. differentiation."""
    p = p.detach()
    if weight_mode == "ipw":
        return 1.0 / p
    if weight_mode == "none":
        return torch.ones_like(p)
    if weight_mode == "random":
        if rng is None:
            raise ValueError("random weight mode needs an explicit rng")
        return torch.empty_like(p).uniform_(1.0, float(num_domains), generator=rng)
    if weight_mode == "reverse":
        return p.clone()
    raise ConfigError(f"unknown weight_mode {weight_mode!r}")


def adaptive_contrastive_loss(terms: Tensor, weights: Tensor) -> Tensor:
    """Batch mean of weighted contrastive terms."""
    if terms.numel() == 0:
        raise ValueError("adaptive contrastive loss of an empty batch is undefined")
    if terms.shape != weights.shape:
        raise ValueError("terms and weights must have equal shape")
    return (weights * terms).mean()


def udg_objective(recon_loss: Tensor, contrastive_loss: Tensor, lambda1: float) -> Tensor:
    if lambda1 < 0:
        raise ConfigError(f"lambda1 must be >= 0, got {lambda1}")
    return recon_loss + lambda1 * contrastive_loss


def dg_objective(
    recon_loss: Tensor,
    contrastive_loss: Tensor,
    labels: Tensor | None,
    logits: Tensor,
    lambda1: float,
    lambda2: float,
) -> Tensor:
    if labels is None:
        raise ConfigError("labels are required for the supervised objective; use UDG mode otherwise")
    if lambda2 < 0:
        raise ConfigError(f"lambda2 must be >= 0, got {lambda2}")
    ce = F.cross_entropy(logits, labels)
    return udg_objective(recon_loss, contrastive_loss, lambda1) + lambda2 * ce


@dataclass
class PretrainLosses:
    total: Tensor
    recon: Tensor
    contrastive: Tensor
    cross_entropy: Tensor | None
    domain_probs: Tensor  # (B, K), detached
    propensity: Tensor | None  # (B,), detached and clamped
    weights: Tensor | None  # (B,), detached
    empty_negatives: int


def compute_pretrain_losses(
    model: DisMAE,
    images: Tensor,
    domains: Tensor,
    plan: MaskPlan,
    visible_tokens: Tensor,
    target_tokens: Tensor,
    cfg: LossConfig,
    *,
    mode: str = "udg",
    labels: Tensor | None = None,
    rng: torch.Generator | None = None,
    pairing: SwapPairing | None = None,
    weights: Tensor | None = None,
) -> PretrainLosses:
    """One pretraining objective evaluation.

    ``pairing`` and ``weights`` may be pinned by the caller (bit-reproducible
    steps, finite-difference checks); otherwise the pairing is drawn from
    ``rng`` and the weights come from the frozen domain classifier.
    """
    semantic_tokens, semantic_cls = model.encode_semantic(visible_tokens, plan)
    variation_cls = model.encode_variation(visible_tokens, plan) if model.variation is not None else None

    pred = model.decode(semantic_tokens, variation_cls, plan)
    distances = per_sample_recon_error(pred, target_tokens, plan)
    recon = gamma_recon_loss(distances, cfg.gamma)

    with torch.no_grad():
        domain_probs = model.classify_domain(semantic_cls.detach())

    propensity = None
    empty = 0
    if cfg.lambda1 > 0:
        if model.variation is None:
            raise ConfigError("contrastive term requires the variation branch; set lambda1 = 0 to disable")
        if pairing is None:
            pairing = build_swap_pairing(domains, cfg.negatives_scope, cfg.max_negatives, rng)
        s_pos = -torch.clamp(distances - cfg.gamma, min=0.0)
        preds_swap = swap_reconstructions(model, semantic_tokens, variation_cls, pairing, plan)
        s_neg = similarity(target_tokens[pairing.anchors], preds_swap, plan.rows(pairing.anchors), cfg.gamma)
        terms, empty = contrastive_terms(s_pos, s_neg, pairing.anchors, cfg.tau)
        if weights is None:
            propensity = domain_propensity(domain_probs, domains, cfg.p_clamp_min)
            weights = adaptive_weights(propensity, cfg.weight_mode, model.cfg.num_domains, rng)
        else:
            weights = weights.detach()
        contrastive = adaptive_contrastive_loss(terms, weights)
    else:
        contrastive = distances.new_zeros(())
        weights = None

    cross_entropy = None
    if mode == "dg":
        if labels is None:
            raise ConfigError("DG mode requires labels on every sample; use UDG mode otherwise")
        logits = model.classify_label(semantic_cls)
        cross_entropy = F.cross_entropy(logits, labels)
        total = udg_objective(recon, contrastive, cfg.lambda1) + cfg.lambda2 * cross_entropy
    else:
        total = udg_objective(recon, contrastive, cfg.lambda1)

    return PretrainLosses(
        total=total,
        recon=recon,
        contrastive=contrastive,
        cross_entropy=cross_entropy,
        domain_probs=domain_probs,
        propensity=propensity,
        weights=weights,
        empty_negatives=empty,
    )

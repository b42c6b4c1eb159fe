"""Downstream protocol: labeled-subset selection, linear probing vs full
fine-tuning, pooled/per-domain accuracy metrics, invariance diagnostics,
and the ablation grid runner.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .config import ConfigError, ProtocolConfig, RunConfig
from .data import MultiDomainDataset, split_train_val
from .masking import full_visible_plan
from .nets import DisMAE, LabelHead, trunc_normal_
from .patches import patchify

log = logging.getLogger(__name__)

# Reference probe/finetune settings (learning rate @ batch size) by label
# fraction; desk-scale runs rescale the rate linearly with their batch size.
PROBE_REFERENCE = ((0.01, 0.025, 96), (0.05, 0.05, 192))
FINETUNE_REFERENCE = ((0.10, 5e-5, 36), (1.00, 5e-5, 36))


@dataclass
class Metrics:
    overall: float
    average: float
    per_domain: dict[str, float]
    counts: dict[str, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "overall": self.overall,
            "average": self.average,
            "per_domain": dict(self.per_domain),
            "counts": dict(self.counts),
        }


def metrics_from_predictions(
    predictions: Tensor, labels: Tensor, domains: Tensor, domain_names: list[str]
) -> Metrics:
    per_domain: dict[str, float] = {}
    counts: dict[str, int] = {}
    total_correct = 0
    total = 0
    present = sorted(int(d) for d in torch.unique(domains))
    for d in present:
        sel = domains == d
        n = int(sel.sum())
        correct = int((predictions[sel] == labels[sel]).sum())
        name = domain_names[d]
        per_domain[name] = correct / n
        counts[name] = n
        total_correct += correct
        total += n
    overall = total_correct / total
    average = sum(per_domain.values()) / len(per_domain)
    return Metrics(overall=overall, average=average, per_domain=per_domain, counts=counts)


def embed_dataset(
    model: DisMAE, ds: MultiDomainDataset, which: str = "s0", batch_size: int = 128
) -> Tensor:
    """Summary embeddings with masking disabled (all patches visible)."""
    if which not in ("s0", "v0"):
        raise ConfigError(f"which must be 's0' or 'v0', got {which!r}")
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            images = ds.images[start : start + batch_size]
            grid = patchify(images, model.cfg)
            plan = full_visible_plan(images.shape[0], grid.num_patches)
            if which == "s0":
                _, cls = model.encode_semantic(grid.tokens, plan)
            else:
                cls = model.encode_variation(grid.tokens, plan)
            chunks.append(cls)
    return torch.cat(chunks, dim=0)


def select_labeled_subset(ds: MultiDomainDataset, fraction: float, seed: int) -> MultiDomainDataset:
    """Stratified by (domain, class); round(fraction * n) per stratum, floor 1."""
    if ds.labels is None:
        raise ConfigError("labeled subset selection requires a labeled dataset")
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    strata: dict[tuple[int, int], list[int]] = {}
    for i in range(len(ds)):
        strata.setdefault((int(ds.domains[i]), int(ds.labels[i])), []).append(i)
    if round(fraction * len(ds)) < len(strata):
        raise ConfigError(
            f"fraction {fraction} requests {round(fraction * len(ds))} items but there are "
            f"{len(strata)} (domain, class) strata; some stratum would be empty"
        )
    rng = np.random.default_rng([seed, 0x5E1])
    picked: list[int] = []
    for key in sorted(strata):
        members = strata[key]
        take = max(1, int(round(fraction * len(members))))
        perm = rng.permutation(len(members))[:take]
        picked.extend(members[int(i)] for i in perm)
    return ds.subset(sorted(picked))


def resolve_probe_lr(fraction: float, batch_size: int, override: float | None = None) -> tuple[float, dict]:
    if override is not None:
        return override, {"source": "config_override", "lr": override}
    ref_fraction, ref_lr, ref_batch = min(PROBE_REFERENCE, key=lambda row: abs(row[0] - fraction))
    lr = ref_lr * batch_size / ref_batch
    return lr, {
        "source": "reference_table",
        "reference_fraction": ref_fraction,
        "reference_lr": ref_lr,
        "reference_batch": ref_batch,
        "batch": batch_size,
        "lr": lr,
    }


def resolve_finetune_lr(fraction: float, batch_size: int, override: float | None = None) -> tuple[float, dict]:
    if override is not None:
        return override, {"source": "config_override", "lr": override}
    ref_fraction, ref_lr, ref_batch = min(FINETUNE_REFERENCE, key=lambda row: abs(row[0] - fraction))
    lr = ref_lr * batch_size / ref_batch
    return lr, {
        "source": "reference_table",
        "reference_fraction": ref_fraction,
        "reference_lr": ref_lr,
        "reference_batch": ref_batch,
        "batch": batch_size,
        "lr": lr,
    }


def _supervised_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, epoch, 0xF17])
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def fit_linear_head(feats: Tensor, labels: Tensor, num_classes: int, cfg: ProtocolConfig) -> LabelHead:
    """Linear head on standardized features; the per-dimension whitening
    (frozen statistics of the probe set) is folded back into the returned
    head so it consumes raw summaries."""
    mean = feats.mean(dim=0)
    std = feats.std(dim=0) + 1e-6
    white = (feats - mean) / std
    head = LabelHead(feats.shape[1], num_classes)
    gen = torch.Generator().manual_seed(cfg.seed + 17)
    trunc_normal_(head.fc.weight, std=0.02, rng=gen)
    torch.nn.init.zeros_(head.fc.bias)
    lr, mapping = resolve_probe_lr(cfg.label_fraction, cfg.probe_batch, cfg.probe_lr)
    log.info("probe lr resolution: %s", mapping)
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=cfg.probe_momentum)
    for epoch in range(1, cfg.epochs + 1):
        for batch in _supervised_batches(feats.shape[0], cfg.probe_batch, cfg.seed, epoch):
            idx = torch.from_numpy(batch).to(torch.long)
            loss = F.cross_entropy(head(white[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    with torch.no_grad():
        head.fc.weight.div_(std)
        head.fc.bias.sub_(head.fc.weight @ mean)
    return head


def linear_probe(model: DisMAE, subset: MultiDomainDataset, cfg: ProtocolConfig) -> LabelHead:
    """Fit a fresh linear head on frozen semantic summaries (masking off)."""
    if subset.labels is None:
        raise ConfigError("linear probe requires a labeled subset")
    num_classes = int(subset.labels.max()) + 1 if model.label_head is None else model.label_head.fc.out_features
    feats = embed_dataset(model, subset, which="s0")  # frozen: computed under no_grad
    return fit_linear_head(feats, subset.labels, num_classes, cfg)


def full_finetune(model: DisMAE, subset: MultiDomainDataset, cfg: ProtocolConfig) -> DisMAE:
    """Supervised fine-tuning of the semantic encoder plus label head; the
    variation encoder and decoder stay untouched. Returns a tuned copy."""
    if subset.labels is None:
        raise ConfigError("fine-tuning requires a labeled subset")
    tuned = copy.deepcopy(model)
    num_classes = int(subset.labels.max()) + 1
    if tuned.label_head is None or tuned.label_head.fc.out_features != num_classes:
        tuned.label_head = LabelHead(tuned.cfg.embed_dim, num_classes)
        gen = torch.Generator().manual_seed(cfg.seed + 29)
        trunc_normal_(tuned.label_head.fc.weight, std=0.02, rng=gen)
        torch.nn.init.zeros_(tuned.label_head.fc.bias)
        tuned.cfg.num_classes = num_classes
    lr, mapping = resolve_finetune_lr(cfg.label_fraction, cfg.finetune_batch, cfg.finetune_lr)
    log.info("finetune lr resolution: %s", mapping)
    params = list(tuned.semantic.parameters()) + list(tuned.label_head.parameters())
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.05)
    tuned.train()
    for epoch in range(1, cfg.epochs + 1):
        for batch in _supervised_batches(len(subset), cfg.finetune_batch, cfg.seed, epoch):
            idx = torch.from_numpy(batch).to(torch.long)
            images = subset.images[idx]
            grid = patchify(images, tuned.cfg)
            plan = full_visible_plan(images.shape[0], grid.num_patches)
            _, cls = tuned.encode_semantic(grid.tokens, plan)
            loss = F.cross_entropy(tuned.label_head(cls), subset.labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return tuned


def predict_labels(model: DisMAE, head: LabelHead, ds: MultiDomainDataset, batch_size: int = 128) -> Tensor:
    feats = embed_dataset(model, ds, which="s0", batch_size=batch_size)
    with torch.no_grad():
        return head(feats).argmax(dim=1)


def evaluate(model: DisMAE, head: LabelHead, test_ds: MultiDomainDataset) -> Metrics:
    """Accuracy of the label head over semantic summaries, masking disabled."""
    if test_ds.labels is None:
        raise ConfigError("evaluation requires labeled test items")
    if int(test_ds.labels.max()) >= head.fc.out_features:
        raise ConfigError(
            f"test set contains class index {int(test_ds.labels.max())} but the head "
            f"only covers {head.fc.out_features} classes"
        )
    preds = predict_labels(model, head, test_ds)
    return metrics_from_predictions(preds, test_ds.labels, test_ds.domains, test_ds.domain_names)


def dispatch_protocol(fraction: float, threshold: float = 0.10) -> str:
    """Below the threshold: linear probe; at or above it: full fine-tuning."""
    return "probe" if fraction < threshold else "finetune"


def domain_probe(representations: Tensor, domains: Tensor, seed: int,
                 hidden: int = 64, epochs: int = 300, lr: float = 5e-3) -> float:
    """Held-out accuracy of a fresh two-layer probe predicting domain.

    Quantitative stand-in for embedding-cloud plots: low on semantic
    summaries and high on variation summaries witness the intended split.
    """
    if representations.shape[0] != domains.shape[0]:
        raise ValueError("representations and domain labels differ in length")
    num_domains = int(domains.max()) + 1
    if num_domains < 2:
        raise ConfigError("domain probe needs >= 2 domains")
    n = representations.shape[0]
    rng = np.random.default_rng([seed, 0xD0])
    perm = rng.permutation(n)
    n_train = int(round(0.8 * n))
    train_idx = torch.from_numpy(perm[:n_train]).to(torch.long)
    test_idx = torch.from_numpy(perm[n_train:]).to(torch.long)

    x = representations.detach().to(torch.float32)
    x = (x - x[train_idx].mean(0)) / (x[train_idx].std(0) + 1e-6)
    gen = torch.Generator().manual_seed(seed + 101)
    probe = torch.nn.Sequential(
        torch.nn.Linear(x.shape[1], hidden),
        torch.nn.GELU(),
        torch.nn.Linear(hidden, num_domains),
    )
    for m in probe:
        if isinstance(m, torch.nn.Linear):
            trunc_normal_(m.weight, std=0.02, rng=gen)
            torch.nn.init.zeros_(m.bias)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(epochs):
        loss = F.cross_entropy(probe(x[train_idx]), domains[train_idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    with torch.no_grad():
        preds = probe(x[test_idx]).argmax(dim=1)
    return float((preds == domains[test_idx]).float().mean())


# --- ablation grid ---------------------------------------------------------------

WEIGHT_MODE_CELLS = {
    "ipw": "DisMAE (ipw)",
    "none": "w/o weights",
    "random": "Random weights",
    "reverse": "Reverse weights",
}


def ablation_cells(grid: dict[str, Any]) -> list[tuple[str, dict[str, Any]]]:
    """Expand a grid document into (cell id, config overrides) pairs."""
    known = {"weight_modes", "inter_domain_negatives", "decoder_depths", "mask_ratios", "seeds", "test_root"}
    unknown = sorted(set(grid) - known)
    if unknown:
        raise ConfigError(f"unknown grid keys {unknown}")
    cells: list[tuple[str, dict[str, Any]]] = []
    for mode in grid.get("weight_modes", []):
        if mode not in WEIGHT_MODE_CELLS:
            raise ConfigError(f"unknown weight mode {mode!r} in grid")
        cells.append((WEIGHT_MODE_CELLS[mode], {"loss.weight_mode": mode}))
    if grid.get("inter_domain_negatives"):
        cells.append(("Inter-domain neg.", {"loss.negatives_scope": "inter_domain"}))
    for depth in grid.get("decoder_depths", []):
        cells.append((f"decoder_depth={depth}", {"model.decoder_depth": int(depth)}))
    for ratio in grid.get("mask_ratios", []):
        cells.append((f"mask_ratio={ratio:g}", {"model.mask_ratio": float(ratio)}))
    return cells


def _apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    out = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        section, name = dotted.split(".")
        setattr(getattr(out, section), name, value)
    out.validate()
    return out


def run_ablation(
    config: RunConfig,
    grid: dict[str, Any],
    train_ds: MultiDomainDataset,
    test_ds: MultiDomainDataset,
    out_dir: str | Path,
) -> dict[str, Any]:
    """One pretrain+probe+evaluate run per cell; failures are recorded and the
    grid continues. Writes ablation.json and returns its content."""
    from .trainer import train_udg  # local import to avoid a cycle

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in grid.get("seeds", [config.train.seed])]
    results: dict[str, Any] = {}
    for cell_id, overrides in ablation_cells(grid):
        slug = cell_id.replace(" ", "_").replace("/", "-").replace(".", "").lower()
        per_seed: dict[str, Any] = {}
        try:
            for seed in seeds:
                cell_cfg = _apply_overrides(config, overrides)
                cell_cfg.train.seed = seed
                run_dir = out / "cells" / f"{slug}-seed{seed}"
                state = train_udg(cell_cfg, train_ds, run_dir)
                head = linear_probe(state.model, train_ds, cell_cfg.eval)
                metrics = evaluate(state.model, head, test_ds)
                per_seed[str(seed)] = metrics.to_dict()
            results[cell_id] = {
                "overall": float(np.mean([m["overall"] for m in per_seed.values()])),
                "average": float(np.mean([m["average"] for m in per_seed.values()])),
                "seeds": per_seed,
                "overrides": overrides,
            }
        except Exception as exc:  # record and continue with the next cell
            log.warning("ablation cell %r failed: %s", cell_id, exc)
            results[cell_id] = {"error": str(exc), "overrides": overrides, "seeds": per_seed}
    (out / "ablation.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results

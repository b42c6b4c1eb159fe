"""Alternating training loop: backbone updates with a frozen domain
classifier, interleaved with scheduled classifier passes over frozen
backbones. Checkpointing, per-epoch scalar logs, and strict determinism.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import Tensor

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, config_fingerprint, write_resolved_config
from .data import MultiDomainDataset, domain_balanced_batches
from .masking import random_masking
from .nets import DisMAE, build_model
from .objectives import compute_pretrain_losses
from .patches import patchify

log = logging.getLogger(__name__)

TRAINER_RNG_OFFSET = 1_000_003


class TrainAbort(RuntimeError):
    """Non-finite loss; carries the diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict[str, Any]):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainedState:
    config: RunConfig
    model: DisMAE
    backbone_opt: torch.optim.AdamW
    classifier_opt: torch.optim.SGD
    epoch: int
    rng: torch.Generator
    fingerprint: str

    def optimized_backbone_params(self) -> list[torch.nn.Parameter]:
        params = self.model.backbone_parameters()
        if self.config.train.mode == "dg" and self.model.label_head is not None:
            params = params + list(self.model.label_head.parameters())
        return params


def classifier_epochs(epochs: int, interval: int, max_epoch: int) -> list[int]:
    """Epochs at which the domain classifier trains: e % interval == 0 and e <= max_epoch."""
    return [e for e in range(1, epochs + 1) if e % interval == 0 and e <= max_epoch]


def init_state(config: RunConfig) -> TrainedState:
    config.validate()
    tc = config.train
    model = build_model(config.model, tc.seed)
    backbone_opt = torch.optim.AdamW(
        model.backbone_parameters()
        + (list(model.label_head.parameters()) if tc.mode == "dg" and model.label_head is not None else []),
        lr=tc.backbone_lr,
        betas=tuple(tc.backbone_betas),
        weight_decay=tc.backbone_weight_decay,
    )
    classifier_opt = torch.optim.SGD(
        model.domain_classifier.parameters(),
        lr=tc.classifier_lr,
        momentum=tc.classifier_momentum,
        weight_decay=tc.classifier_weight_decay,
    )
    rng = torch.Generator().manual_seed(tc.seed + TRAINER_RNG_OFFSET)
    return TrainedState(
        config=config,
        model=model,
        backbone_opt=backbone_opt,
        classifier_opt=classifier_opt,
        epoch=0,
        rng=rng,
        fingerprint=config_fingerprint(config),
    )


def _epoch_lr(state: TrainedState, epoch: int) -> float:
    tc = state.config.train
    if tc.lr_schedule == "cosine":
        return tc.backbone_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / max(tc.epochs, 1)))
    return tc.backbone_lr


def backbone_step(state: TrainedState, batch_idx: Tensor, dataset: MultiDomainDataset) -> dict[str, Any]:
    """One optimizer step on the encoders/decoder with the classifier frozen."""
    tc = state.config.train
    model = state.model
    model.train()
    images = dataset.images[batch_idx]
    domains = dataset.domains[batch_idx]
    labels = dataset.labels[batch_idx] if dataset.labels is not None else None

    grid = patchify(images, model.cfg)
    visible, plan = random_masking(grid.tokens, model.cfg.mask_ratio, state.rng)
    losses = compute_pretrain_losses(
        model,
        images,
        domains,
        plan,
        visible,
        grid.tokens,
        state.config.loss,
        mode=tc.mode,
        labels=labels if tc.mode == "dg" else None,
        rng=state.rng,
    )
    if not torch.isfinite(losses.total):
        snapshot = {
            "loss_total": float(losses.total.detach()),
            "loss_rec": float(losses.recon.detach()),
            "loss_con": float(losses.contrastive.detach()),
            "loss_ce": None if losses.cross_entropy is None else float(losses.cross_entropy.detach()),
            "batch_ids": [dataset.ids[int(i)] for i in batch_idx],
            "epoch": state.epoch,
        }
        raise TrainAbort("non-finite training loss", snapshot)

    state.backbone_opt.zero_grad(set_to_none=True)
    losses.total.backward()
    if tc.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.optimized_backbone_params(), tc.grad_clip)
    state.backbone_opt.step()

    diag: dict[str, Any] = {
        "loss_rec": float(losses.recon.detach()),
        "loss_con": float(losses.contrastive.detach()),
        "empty_negatives": losses.empty_negatives,
    }
    if losses.cross_entropy is not None:
        diag["loss_ce"] = float(losses.cross_entropy.detach())
    # Raw true-domain probabilities, grouped by domain, for the score logs.
    p_true = losses.domain_probs.gather(1, domains.view(-1, 1)).squeeze(1)
    diag["propensity_sum"] = {
        int(d): float(p_true[domains == d].sum()) for d in torch.unique(domains)
    }
    diag["propensity_count"] = {int(d): int((domains == d).sum()) for d in torch.unique(domains)}
    return diag


def adaptive_classifier_step(
    state: TrainedState,
    batches: list[Tensor],
    dataset: MultiDomainDataset,
    epoch: int,
) -> dict[str, Any]:
    """One scheduled pass of SGD on the domain classifier, backbones frozen."""
    tc = state.config.train
    if epoch % tc.adaptive_interval != 0 or epoch > tc.adaptive_max_epoch:
        raise RuntimeError(
            f"adaptive classifier step invoked outside its schedule (epoch {epoch}, "
            f"interval {tc.adaptive_interval}, max epoch {tc.adaptive_max_epoch})"
        )
    model = state.model
    model.train()
    if tc.classifier_pass == "single_batch":
        batches = batches[:1]
    total_ce = 0.0
    total_n = 0
    for batch_idx in batches:
        images = dataset.images[batch_idx]
        domains = dataset.domains[batch_idx]
        grid = patchify(images, model.cfg)
        visible, plan = random_masking(grid.tokens, model.cfg.mask_ratio, state.rng)
        with torch.no_grad():
            _, semantic_cls = model.encode_semantic(visible, plan)
        logits = model.domain_classifier(semantic_cls)
        ce = torch.nn.functional.cross_entropy(logits, domains)
        if not torch.isfinite(ce):
            raise TrainAbort(
                "non-finite domain-classifier loss",
                {"loss_domain_ce": float(ce.detach()), "epoch": epoch, "batch_ids": [dataset.ids[int(i)] for i in batch_idx]},
            )
        state.classifier_opt.zero_grad(set_to_none=True)
        ce.backward()
        state.classifier_opt.step()
        total_ce += float(ce.detach()) * len(batch_idx)
        total_n += len(batch_idx)
    return {"loss_domain_ce": total_ce / max(total_n, 1)}


class ScalarLogger:
    """Appends (epoch, series, value) rows to logs/scalars.csv."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / "logs" / "scalars.csv"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, "w", newline="\n") as f:
                csv.writer(f, lineterminator="\n").writerow(["epoch", "series", "value"])

    def write(self, epoch: int, series: str, value: float) -> None:
        with open(self.path, "a", newline="\n") as f:
            csv.writer(f, lineterminator="\n").writerow([epoch, series, f"{value:.10g}"])


def _train(config: RunConfig, dataset: MultiDomainDataset, run_dir: str | Path,
           resume_from: str | Path | None = None) -> TrainedState:
    config.validate()
    tc = config.train
    if dataset.num_domains < 2:
        raise ConfigError("training requires >= 2 domains (intra-domain contrast is degenerate otherwise)")
    if dataset.num_domains != config.model.num_domains:
        raise ConfigError(
            f"dataset has {dataset.num_domains} domains but model.num_domains = {config.model.num_domains}"
        )
    if tc.mode == "dg" and dataset.labels is None:
        raise ConfigError("DG training requires labels on every sample")

    run_path = Path(run_dir)
    run_path.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, run_path)

    state = checkpoint_load(resume_from, config) if resume_from is not None else init_state(config)
    logger = ScalarLogger(run_path)
    schedule = set(classifier_epochs(tc.epochs, tc.adaptive_interval, tc.adaptive_max_epoch))

    for epoch in range(state.epoch + 1, tc.epochs + 1):
        lr = _epoch_lr(state, epoch)
        for group in state.backbone_opt.param_groups:
            group["lr"] = lr
        batches = domain_balanced_batches(dataset, tc.per_domain_batch, tc.seed, epoch)
        sums = {"loss_rec": 0.0, "loss_con": 0.0, "loss_ce": 0.0}
        p_sum = {d: 0.0 for d in range(dataset.num_domains)}
        p_count = {d: 0 for d in range(dataset.num_domains)}
        try:
            for batch_idx in batches:
                diag = backbone_step(state, batch_idx, dataset)
                sums["loss_rec"] += diag["loss_rec"]
                sums["loss_con"] += diag["loss_con"]
                sums["loss_ce"] += diag.get("loss_ce", 0.0)
                for d, s in diag["propensity_sum"].items():
                    p_sum[d] += s
                    p_count[d] += diag["propensity_count"][d]
            state.epoch = epoch
            if epoch in schedule:
                adaptive_classifier_step(state, batches, dataset, epoch)
        except TrainAbort as abort:
            (run_path / "diagnostics.json").write_text(json.dumps(abort.snapshot, indent=2) + "\n")
            raise

        n_batches = max(len(batches), 1)
        logger.write(epoch, "loss_rec", sums["loss_rec"] / n_batches)
        logger.write(epoch, "loss_con", sums["loss_con"] / n_batches)
        if tc.mode == "dg":
            logger.write(epoch, "loss_ce", sums["loss_ce"] / n_batches)
        for d in range(dataset.num_domains):
            mean_p = p_sum[d] / p_count[d] if p_count[d] else float("nan")
            logger.write(epoch, f"propensity/{dataset.domain_names[d]}", mean_p)

        if tc.checkpoint_interval > 0 and epoch % tc.checkpoint_interval == 0:
            checkpoint_save(state, run_path / "checkpoints" / f"epoch-{epoch:04d}")

    checkpoint_save(state, run_path / "final")
    return state


def train_udg(config: RunConfig, dataset: MultiDomainDataset, run_dir: str | Path,
              resume_from: str | Path | None = None) -> TrainedState:
    if config.train.mode != "udg":
        raise ConfigError(f"train_udg requires mode 'udg', config says {config.train.mode!r}")
    return _train(config, dataset, run_dir, resume_from)


def train_dg(config: RunConfig, dataset: MultiDomainDataset, run_dir: str | Path,
             resume_from: str | Path | None = None) -> TrainedState:
    if config.train.mode != "dg":
        raise ConfigError(f"train_dg requires mode 'dg', config says {config.train.mode!r}")
    if dataset.labels is None:
        raise ConfigError("DG training requires a labeled dataset")
    return _train(config, dataset, run_dir, resume_from)


# --- checkpoint (de)serialization ------------------------------------------------


def _param_names(model: DisMAE) -> dict[int, str]:
    return {id(p): name for name, p in model.named_parameters()}


def _optimizer_arrays(prefix: str, opt: torch.optim.Optimizer, names: dict[int, str]) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for group in opt.param_groups:
        for p in group["params"]:
            opt_state = opt.state.get(p, {})
            for key, value in opt_state.items():
                if isinstance(value, torch.Tensor):
                    arrays[f"{prefix}.{names[id(p)]}.{key}"] = value.detach().cpu().numpy()
    return arrays


def state_arrays(state: TrainedState) -> dict[str, np.ndarray]:
    names = _param_names(state.model)
    arrays = {f"model.{k}": v.detach().cpu().numpy() for k, v in state.model.state_dict().items()}
    arrays.update(_optimizer_arrays("opt.backbone", state.backbone_opt, names))
    arrays.update(_optimizer_arrays("opt.classifier", state.classifier_opt, names))
    arrays["rng.trainer"] = state.rng.get_state().numpy()
    return arrays


def checkpoint_save(state: TrainedState, path: str | Path) -> Path:
    extras = {
        "mode": state.config.train.mode,
        "backbone_lr": [g["lr"] for g in state.backbone_opt.param_groups],
        "classifier_lr": [g["lr"] for g in state.classifier_opt.param_groups],
    }
    out = ckpt.save_arrays(
        path,
        state_arrays(state),
        epoch=state.epoch,
        config_fingerprint=state.fingerprint,
        extras=extras,
    )
    write_resolved_config(state.config, out)
    return out


def checkpoint_load(path: str | Path, config: RunConfig) -> TrainedState:
    fingerprint = config_fingerprint(config)
    arrays, epoch, extras = ckpt.load_arrays(path, expected_fingerprint=fingerprint)
    state = init_state(config)
    state.epoch = epoch

    model_state = {}
    for key, arr in arrays.items():
        if key.startswith("model."):
            model_state[key[len("model."):]] = torch.from_numpy(arr.copy())
    missing = set(state.model.state_dict()) - set(model_state)
    if missing:
        raise ckpt.CheckpointError(f"checkpoint is missing model arrays: {sorted(missing)[:4]}")
    state.model.load_state_dict(model_state, strict=True)

    for prefix, opt in (("opt.backbone", state.backbone_opt), ("opt.classifier", state.classifier_opt)):
        name_to_param = {name: p for name, p in state.model.named_parameters()}
        for key, arr in arrays.items():
            if not key.startswith(prefix + "."):
                continue
            rest = key[len(prefix) + 1:]
            pname, entry = rest.rsplit(".", 1)
            if pname not in name_to_param:
                raise ckpt.CheckpointError(f"optimizer state {key!r} names an unknown parameter")
            p = name_to_param[pname]
            opt.state.setdefault(p, {})[entry] = torch.from_numpy(arr.copy())
    for lr_key, opt in (("backbone_lr", state.backbone_opt), ("classifier_lr", state.classifier_opt)):
        lrs = extras.get(lr_key)
        if lrs:
            for group, lr in zip(opt.param_groups, lrs):
                group["lr"] = float(lr)

    rng_state = arrays.get("rng.trainer")
    if rng_state is None:
        raise ckpt.CheckpointError("checkpoint is missing the trainer rng state (rng.trainer)")
    state.rng.set_state(torch.from_numpy(rng_state.copy()))
    return state

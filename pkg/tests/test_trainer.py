import copy
import hashlib
import json
from pathlib import Path

import pytest
import torch

from dismae.config import ConfigError, RunConfig
from dismae.data import domain_balanced_batches
from dismae.trainer import (
    TrainAbort,
    adaptive_classifier_step,
    backbone_step,
    checkpoint_load,
    checkpoint_save,
    classifier_epochs,
    init_state,
    train_dg,
    train_udg,
)


def param_bytes(module: torch.nn.Module) -> bytes:
    return b"".join(p.detach().numpy().tobytes() for p in module.parameters())


def backbone_bytes(model) -> bytes:
    parts = [param_bytes(model.semantic), param_bytes(model.decoder)]
    if model.variation is not None:
        parts.append(param_bytes(model.variation))
    return b"".join(parts)


def base_config(**train_kw) -> RunConfig:
    cfg = RunConfig()
    cfg.train.epochs = 2
    cfg.train.per_domain_batch = 2
    cfg.train.adaptive_interval = 1
    cfg.train.adaptive_max_epoch = 100
    for k, v in train_kw.items():
        setattr(cfg.train, k, v)
    return cfg


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(Path(root).rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(root)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


class TestSchedule:
    def test_paper_schedule(self):
        assert classifier_epochs(120, 15, 100) == [15, 30, 45, 60, 75, 90]

    def test_every_epoch(self):
        assert classifier_epochs(3, 1, 3) == [1, 2, 3]

    def test_horizon_zero_disables(self):
        assert classifier_epochs(10, 2, 0) == []

    def test_out_of_schedule_call_rejected(self, small_dataset):
        cfg = base_config(adaptive_interval=5)
        state = init_state(cfg)
        batches = domain_balanced_batches(small_dataset, 2, cfg.train.seed, 1)
        with pytest.raises(RuntimeError, match="schedule"):
            adaptive_classifier_step(state, batches, small_dataset, epoch=3)


class TestFreezeContracts:
    def test_backbone_step_freezes_classifier(self, small_dataset):
        cfg = base_config()
        state = init_state(cfg)
        batches = domain_balanced_batches(small_dataset, 2, cfg.train.seed, 1)
        before_clf = param_bytes(state.model.domain_classifier)
        before_bb = backbone_bytes(state.model)
        backbone_step(state, batches[0], small_dataset)
        assert param_bytes(state.model.domain_classifier) == before_clf
        assert backbone_bytes(state.model) != before_bb

    def test_classifier_step_freezes_backbones(self, small_dataset):
        cfg = base_config()
        state = init_state(cfg)
        batches = domain_balanced_batches(small_dataset, 2, cfg.train.seed, 1)
        backbone_step(state, batches[0], small_dataset)
        before_bb = backbone_bytes(state.model)
        before_clf = param_bytes(state.model.domain_classifier)
        state.epoch = 1
        adaptive_classifier_step(state, batches, small_dataset, epoch=1)
        assert backbone_bytes(state.model) == before_bb
        assert param_bytes(state.model.domain_classifier) != before_clf

    def test_twenty_alternating_steps(self, small_dataset):
        cfg = base_config(epochs=20)
        state = init_state(cfg)
        for epoch in range(1, 21):
            batches = domain_balanced_batches(small_dataset, 2, cfg.train.seed, epoch)
            clf = param_bytes(state.model.domain_classifier)
            for b in batches:
                backbone_step(state, b, small_dataset)
            assert param_bytes(state.model.domain_classifier) == clf
            bb = backbone_bytes(state.model)
            adaptive_classifier_step(state, batches, small_dataset, epoch=epoch)
            assert backbone_bytes(state.model) == bb


class TestDeterminismAndResume:
    def test_two_identical_runs(self, small_dataset, tmp_path):
        cfg = base_config(checkpoint_interval=1)
        train_udg(cfg, small_dataset, tmp_path / "a")
        train_udg(cfg, small_dataset, tmp_path / "b")
        assert tree_digest(tmp_path / "a" / "final") == tree_digest(tmp_path / "b" / "final")

    def test_resume_equivalence(self, small_dataset, tmp_path):
        cfg = base_config(epochs=3, checkpoint_interval=1)
        train_udg(cfg, small_dataset, tmp_path / "full")
        train_udg(cfg, small_dataset, tmp_path / "resumed", resume_from=tmp_path / "full" / "checkpoints" / "epoch-0001")
        assert tree_digest(tmp_path / "resumed" / "final") == tree_digest(tmp_path / "full" / "final")

    def test_two_steps_bitwise_from_same_state(self, small_dataset, tmp_path):
        cfg = base_config()
        state = init_state(cfg)
        checkpoint_save(state, tmp_path / "s0")
        batches = domain_balanced_batches(small_dataset, 2, cfg.train.seed, 1)
        backbone_step(state, batches[0], small_dataset)
        after_a = backbone_bytes(state.model)
        state2 = checkpoint_load(tmp_path / "s0", cfg)
        backbone_step(state2, batches[0], small_dataset)
        assert backbone_bytes(state2.model) == after_a


class TestTrainLoop:
    def test_log_rows_per_series(self, small_dataset, tmp_path):
        cfg = base_config(epochs=2)
        train_udg(cfg, small_dataset, tmp_path / "run")
        text = (tmp_path / "run" / "logs" / "scalars.csv").read_text().strip().splitlines()
        assert text[0] == "epoch,series,value"
        rows = [line.split(",") for line in text[1:]]
        for series in ("loss_rec", "loss_con", "propensity/crimson", "propensity/forest", "propensity/ocean"):
            assert sum(1 for r in rows if r[1] == series) == 2

    def test_one_epoch_runs_backbone_then_classifier(self, small_dataset, tmp_path):
        cfg = base_config(epochs=1, adaptive_interval=1, adaptive_max_epoch=1)
        before = init_state(cfg)
        state = train_udg(cfg, small_dataset, tmp_path / "run")
        assert backbone_bytes(state.model) != backbone_bytes(before.model)
        assert param_bytes(state.model.domain_classifier) != param_bytes(before.model.domain_classifier)

    def test_adaptive_horizon_zero_keeps_uniform_propensity(self, small_dataset, tmp_path):
        cfg = base_config(epochs=2, adaptive_max_epoch=0)
        train_udg(cfg, small_dataset, tmp_path / "run")
        rows = (tmp_path / "run" / "logs" / "scalars.csv").read_text().strip().splitlines()[1:]
        for row in rows:
            epoch, series, value = row.split(",")
            if series.startswith("propensity/"):
                assert abs(float(value) - 1.0 / 3.0) < 1e-6

    def test_lambda1_zero_never_evaluates_contrastive(self, small_dataset, tmp_path, monkeypatch):
        import dismae.objectives as objectives

        def boom(*a, **k):
            raise AssertionError("contrastive path should not run")

        monkeypatch.setattr(objectives, "contrastive_terms", boom)
        cfg = base_config(epochs=1)
        cfg.loss.lambda1 = 0.0
        cfg.model.variation_enabled = False
        train_udg(cfg, small_dataset, tmp_path / "run")

    def test_single_domain_rejected(self, small_dataset, tmp_path):
        cfg = base_config()
        only = small_dataset.subset(torch.nonzero(small_dataset.domains == 0).flatten())
        only.domain_names = ["crimson"]
        with pytest.raises(ConfigError):
            train_udg(cfg, only, tmp_path / "run")

    def test_mode_mismatch_rejected(self, small_dataset, tmp_path):
        cfg = base_config()
        with pytest.raises(ConfigError):
            train_dg(cfg, small_dataset, tmp_path / "run")

    def test_dg_without_labels_rejected(self, small_dataset, tmp_path):
        cfg = base_config(mode="dg")
        unlabeled = small_dataset.subset(range(len(small_dataset)))
        unlabeled.labels = None
        with pytest.raises(ConfigError):
            train_dg(cfg, unlabeled, tmp_path / "run")

    def test_dg_lambda2_zero_matches_udg_backbones(self, small_dataset, tmp_path):
        cfg_u = base_config(epochs=2)
        cfg_u.model.num_classes = 10
        state_u = train_udg(cfg_u, small_dataset, tmp_path / "udg")

        cfg_d = base_config(epochs=2, mode="dg")
        cfg_d.model.num_classes = 10
        cfg_d.loss.lambda2 = 0.0
        state_d = train_dg(cfg_d, small_dataset, tmp_path / "dg")

        assert backbone_bytes(state_u.model) == backbone_bytes(state_d.model)
        assert param_bytes(state_u.model.domain_classifier) == param_bytes(state_d.model.domain_classifier)

    def test_dg_logs_ce_series(self, small_dataset, tmp_path):
        cfg = base_config(epochs=1, mode="dg")
        cfg.model.num_classes = 10
        train_dg(cfg, small_dataset, tmp_path / "run")
        text = (tmp_path / "run" / "logs" / "scalars.csv").read_text()
        assert "loss_ce" in text

    def test_nan_abort_writes_diagnostics(self, small_dataset, tmp_path):
        cfg = base_config(epochs=1, checkpoint_interval=1)
        state = init_state(cfg)
        with torch.no_grad():
            state.model.semantic.patch_embed.weight.fill_(float("nan"))
        checkpoint_save(state, tmp_path / "poisoned")
        with pytest.raises(TrainAbort):
            train_udg(cfg, small_dataset, tmp_path / "run", resume_from=tmp_path / "poisoned")
        snapshot = json.loads((tmp_path / "run" / "diagnostics.json").read_text())
        assert "loss_rec" in snapshot and "batch_ids" in snapshot

    def test_single_batch_classifier_pass(self, small_dataset, tmp_path):
        cfg = base_config(epochs=1, classifier_pass="single_batch")
        train_udg(cfg, small_dataset, tmp_path / "run")

    def test_cosine_schedule_runs(self, small_dataset, tmp_path):
        cfg = base_config(epochs=2, lr_schedule="cosine")
        train_udg(cfg, small_dataset, tmp_path / "run")

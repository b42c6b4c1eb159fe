"""Command-line surface.

Subcommands: gen-data, pretrain, probe, finetune, eval, swap-grid, scores,
embed, ablate. Exit codes: 0 on success, 2 on configuration errors, 1 for
anything else. DISMAE_SEED overrides the config seed; an explicit --seed
flag overrides both.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from .analysis import export_embeddings, export_pca_projection, save_swap_grid_png, swap_grid, write_scores
from .config import (
    ConfigError,
    RunConfig,
    config_fingerprint,
    factor_spec_from_dict,
    load_run_config,
    resolve_seed,
    write_resolved_config,
)
from .data import MultiDomainDataset, generate_factored_dataset, load_image_folders, split_train_val
from .evaluation import (
    dispatch_protocol,
    evaluate,
    full_finetune,
    linear_probe,
    resolve_finetune_lr,
    resolve_probe_lr,
    run_ablation,
    select_labeled_subset,
)
from .trainer import TrainedState, checkpoint_load, checkpoint_save, init_state, train_dg, train_udg

log = logging.getLogger(__name__)


def materialize_dataset(cfg: RunConfig, workdir: str | Path) -> MultiDomainDataset:
    if cfg.data.factor is not None:
        return generate_factored_dataset(cfg.data.factor, Path(workdir) / "data")
    return load_image_folders(cfg.data.root, labeled=cfg.data.labeled)


def _load_ckpt_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    embedded = Path(args.ckpt) / "config.resolved.json"
    if not embedded.is_file():
        raise ConfigError(f"checkpoint {args.ckpt} has no embedded config; pass --config")
    return load_run_config(embedded)


def cmd_gen_data(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except FileNotFoundError:
        raise ConfigError(f"spec file not found: {args.spec}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"spec file {args.spec} is not valid JSON: {exc}") from None
    spec = factor_spec_from_dict(raw)
    ds = generate_factored_dataset(spec, args.out)
    print(f"generated {len(ds)} images across {ds.num_domains} domains under {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    cfg.train.seed = resolve_seed(cfg, args.seed)
    cfg.output_dir = str(args.out)
    ds = materialize_dataset(cfg, args.out)
    train = train_dg if cfg.train.mode == "dg" else train_udg
    state = train(cfg, ds, args.out, resume_from=args.resume)
    print(f"pretrained {cfg.train.epochs} epochs; final checkpoint at {Path(args.out) / 'final'}")
    return 0


def _state_with_head(base: TrainedState, model, num_classes: int) -> TrainedState:
    cfg = copy.deepcopy(base.config)
    cfg.model.num_classes = num_classes
    state = init_state(cfg)
    state.model = model
    state.epoch = base.epoch
    state.fingerprint = config_fingerprint(cfg)
    return state


def cmd_probe(args) -> int:
    cfg = _load_ckpt_config(args)
    if args.seed is not None:
        cfg.eval.seed = args.seed
    state = checkpoint_load(args.ckpt, cfg)
    branch = dispatch_protocol(cfg.eval.label_fraction, cfg.eval.dispatch_threshold)
    if branch != "probe":
        raise ConfigError(
            f"label fraction {cfg.eval.label_fraction} is at or above the "
            f"{cfg.eval.dispatch_threshold} threshold, which dispatches to full "
            f"fine-tuning; use the finetune command"
        )
    ds = materialize_dataset(cfg, args.out)
    if ds.labels is None:
        raise ConfigError("probing requires labeled training data")
    subset = select_labeled_subset(ds, cfg.eval.label_fraction, cfg.eval.seed)
    head = linear_probe(state.model, subset, cfg.eval)
    model = state.model
    model.label_head = head
    model.cfg.num_classes = head.fc.out_features
    out_state = _state_with_head(state, model, head.fc.out_features)
    checkpoint_save(out_state, Path(args.out) / "final")
    lr, mapping = resolve_probe_lr(cfg.eval.label_fraction, cfg.eval.probe_batch, cfg.eval.probe_lr)
    (Path(args.out) / "probe.log.json").write_text(
        json.dumps({"labeled_items": len(subset), "lr_resolution": mapping}, indent=2) + "\n"
    )
    print(f"probe head trained on {len(subset)} labeled items; checkpoint at {Path(args.out) / 'final'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_ckpt_config(args)
    if args.seed is not None:
        cfg.eval.seed = args.seed
    state = checkpoint_load(args.ckpt, cfg)
    branch = dispatch_protocol(cfg.eval.label_fraction, cfg.eval.dispatch_threshold)
    if branch != "finetune":
        raise ConfigError(
            f"label fraction {cfg.eval.label_fraction} is below the "
            f"{cfg.eval.dispatch_threshold} threshold, which dispatches to the linear "
            f"probe; use the probe command"
        )
    ds = materialize_dataset(cfg, args.out)
    if ds.labels is None:
        raise ConfigError("fine-tuning requires labeled training data")
    subset = select_labeled_subset(ds, cfg.eval.label_fraction, cfg.eval.seed)
    tuned = full_finetune(state.model, subset, cfg.eval)
    out_state = _state_with_head(state, tuned, tuned.label_head.fc.out_features)
    checkpoint_save(out_state, Path(args.out) / "final")
    lr, mapping = resolve_finetune_lr(cfg.eval.label_fraction, cfg.eval.finetune_batch, cfg.eval.finetune_lr)
    (Path(args.out) / "finetune.log.json").write_text(
        json.dumps({"labeled_items": len(subset), "lr_resolution": mapping}, indent=2) + "\n"
    )
    print(f"fine-tuned on {len(subset)} labeled items; checkpoint at {Path(args.out) / 'final'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_ckpt_config(args)
    state = checkpoint_load(args.ckpt, cfg)
    if state.model.label_head is None:
        raise ConfigError("checkpoint has no label head; run probe or finetune first")
    if args.data_root:
        test_ds = load_image_folders(args.data_root, labeled=True)
    else:
        test_ds = materialize_dataset(cfg, args.out)
    metrics = evaluate(state.model, state.model.label_head, test_ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    return 0


def _parse_ids(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ConfigError(f"ids must be comma-separated integers, got {text!r}") from None


def cmd_swap_grid(args) -> int:
    cfg = _load_ckpt_config(args)
    state = checkpoint_load(args.ckpt, cfg)
    workdir = Path(args.out).parent if Path(args.out).suffix else Path(args.out)
    if args.data_root:
        ds = load_image_folders(args.data_root, labeled=True)
    else:
        ds = materialize_dataset(cfg, workdir)
    seed = args.seed if args.seed is not None else cfg.eval.seed
    tile = swap_grid(state.model, ds, _parse_ids(args.rows), _parse_ids(args.cols), seed)
    save_swap_grid_png(tile, args.out)
    print(f"swap grid written to {args.out}")
    return 0


def cmd_scores(args) -> int:
    write_scores(args.run, args.out_csv, args.out_png)
    print(f"scores written to {args.out_csv}")
    return 0


def cmd_embed(args) -> int:
    cfg = _load_ckpt_config(args)
    state = checkpoint_load(args.ckpt, cfg)
    workdir = Path(args.out).parent if Path(args.out).suffix else Path(args.out)
    ds = materialize_dataset(cfg, workdir)
    if args.split != "all":
        train_ds, val_ds = split_train_val(ds, cfg.eval.val_fraction, cfg.eval.seed)
        ds = train_ds if args.split == "train" else val_ds
    export_embeddings(state.model, ds, args.which, args.out)
    if args.pca:
        export_pca_projection(state.model, ds, args.which, args.pca)
    print(f"{args.which} embeddings for split {args.split!r} written to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    cfg.train.seed = resolve_seed(cfg, args.seed)
    try:
        grid = json.loads(Path(args.grid).read_text())
    except FileNotFoundError:
        raise ConfigError(f"grid file not found: {args.grid}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid file {args.grid} is not valid JSON: {exc}") from None
    ds = materialize_dataset(cfg, args.out)
    if grid.get("test_root"):
        train_ds, test_ds = ds, load_image_folders(grid["test_root"], labeled=True)
    else:
        train_ds, test_ds = split_train_val(ds, cfg.eval.val_fraction, cfg.eval.seed)
    results = run_ablation(cfg, grid, train_ds, test_ds, args.out)
    print(f"ablation table with {len(results)} cell(s) at {Path(args.out) / 'ablation.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dismae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic factored dataset")
    p.add_argument("--spec", required=True, help="FactorSpec JSON document")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="unsupervised (or DG) pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on the frozen semantic encoder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("finetune", help="full supervised fine-tuning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="accuracy metrics on labeled test domains")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data-root", default=None, help="test dataset root (default: config data)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("swap-grid", help="variation-swap reconstruction grid PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data-root", default=None)
    p.add_argument("--rows", required=True, help="comma-separated dataset indices")
    p.add_argument("--cols", required=True, help="comma-separated dataset indices")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_swap_grid)

    p = sub.add_parser("scores", help="per-domain propensity series CSV + plot")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-png", default=None)
    p.set_defaults(func=cmd_scores)

    p = sub.add_parser("embed", help="export summary embeddings as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--which", choices=("s0", "v0"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pca", default=None, help="also write a 2-d principal-component projection CSV")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, help="grid JSON document")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

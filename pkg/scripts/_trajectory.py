"""Probe-quality and propensity trajectories across training checkpoints.

Trains one model variant with periodic checkpoints, then probes each
checkpoint: linear class probe (train/held-out), domain probes on both
summaries, and the variation-usage statistic.
"""

import argparse
import copy
import json
import time
from pathlib import Path

import torch

import dismae.nets as nets


def forward_broadcast(self, semantic_tokens, variation_summary, plan):
    b, n, _ = semantic_tokens.shape
    if variation_summary is not None and variation_summary.shape[0] != b:
        raise ValueError("batch mismatch")
    x = self.embed(semantic_tokens)
    d = x.shape[-1]
    mask = self.mask_token.to(x.dtype).expand(b, plan.num_masked, d)
    patches = torch.cat([x[:, 1:], mask], dim=1)
    patches = torch.gather(patches, 1, plan.restore_perm.unsqueeze(-1).expand(-1, -1, d))
    seq = torch.cat([x[:, :1], patches], dim=1) + self.pos_embed.to(x.dtype)
    if variation_summary is not None:
        seq = seq + self.cond_proj(variation_summary).unsqueeze(1)
    for blk in self.blocks:
        seq = blk(seq)
    seq = self.norm(seq)
    return self.head(seq[:, 1 : 1 + plan.num_patches])


from dismae.config import DomainPalette, FactorSpec, RunConfig, _default_domains
from dismae.data import generate_factored_dataset, restrict_domains
from dismae.evaluation import domain_probe, embed_dataset, evaluate, linear_probe
from dismae.masking import random_masking
from dismae.objectives import per_sample_recon_error
from dismae.patches import patchify
from dismae.trainer import checkpoint_load, train_udg

HELD_OUT = DomainPalette(
    name="orchid",
    foreground=[[1.00, 0.50, 0.95], [0.95, 0.40, 0.90]],
    background=[[0.55, 0.05, 0.60], [0.65, 0.10, 0.70]],
)


def v_usage(model, ds):
    gen = torch.Generator().manual_seed(0)
    idx = torch.arange(0, 48)
    grid = patchify(ds.images[idx], model.cfg)
    visible, plan = random_masking(grid.tokens, model.cfg.mask_ratio, gen)
    with torch.no_grad():
        tokens, _ = model.encode_semantic(visible, plan)
        if model.variation is None:
            return 0.0
        v0 = model.encode_variation(visible, plan)
        rec = model.decode(tokens, v0, plan)
        rec2 = model.decode(tokens, v0[torch.roll(torch.arange(48), 16)], plan)
    return float((rec2 - rec).pow(2).mean().sqrt())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--variant", choices=("mae", "ipw", "none"), required=True)
    ap.add_argument("--cond", choices=("token", "broadcast"), default="token")
    ap.add_argument("--epochs", type=int, default=600)
    ap.add_argument("--every", type=int, default=100)
    ap.add_argument("--image-size", type=int, default=16)
    ap.add_argument("--patch-size", type=int, default=4)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--lambda1", type=float, default=1e-2)
    ap.add_argument("--mask-ratio", type=float, default=0.8)
    ap.add_argument("--decoder-depth", type=int, default=1)
    ap.add_argument("--t-ad", type=int, default=5)
    ap.add_argument("--e-ad", type=int, default=0)
    ap.add_argument("--clf-lr", type=float, default=5e-3)
    ap.add_argument("--num-classes", type=int, default=5)
    ap.add_argument("--samples", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=2)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    torch.set_num_threads(args.threads)

    if args.cond == "broadcast":
        nets.ConditionalDecoder.forward = forward_broadcast

    out = Path(args.out)
    spec = FactorSpec(
        seed=100, noise_std=0.02, image_size=args.image_size,
        num_classes=args.num_classes, samples_per_class_per_domain=args.samples,
        domains=_default_domains() + [HELD_OUT],
    )
    full = generate_factored_dataset(spec, out / "data")
    train_ds = restrict_domains(full, ["crimson", "forest", "ocean"])
    test_ds = restrict_domains(full, ["orchid"])

    cfg = RunConfig()
    cfg.model.image_size = args.image_size
    cfg.model.patch_size = args.patch_size
    cfg.model.mask_ratio = args.mask_ratio
    cfg.model.num_classes = 0
    cfg.model.decoder_depth = args.decoder_depth
    cfg.loss.lambda1 = 0.0 if args.variant == "mae" else args.lambda1
    cfg.loss.weight_mode = "none" if args.variant == "none" else "ipw"
    cfg.loss.max_negatives = 4
    cfg.model.variation_enabled = args.variant != "mae"
    cfg.train.epochs = args.epochs
    cfg.train.backbone_lr = args.lr
    cfg.train.adaptive_interval = args.t_ad
    cfg.train.adaptive_max_epoch = args.e_ad if args.e_ad else args.epochs
    cfg.train.classifier_lr = args.clf_lr
    cfg.train.seed = args.seed
    cfg.train.checkpoint_interval = args.every

    t0 = time.time()
    train_udg(cfg, train_ds, out / "run")
    print(f"trained {args.epochs} epochs in {(time.time()-t0)/60:.1f} min", flush=True)

    rows = []
    for e in range(args.every, args.epochs + 1, args.every):
        state = checkpoint_load(out / "run" / "checkpoints" / f"epoch-{e:04d}", cfg)
        model = state.model
        pcfg = copy.deepcopy(cfg.eval)
        pcfg.label_fraction = 1.0
        head = linear_probe(model, train_ds, pcfg)
        acc_train = evaluate(model, head, train_ds).overall
        acc_test = evaluate(model, head, test_ds).overall
        s0 = embed_dataset(model, train_ds, which="s0")
        row = {
            "epoch": e,
            "probe_train": round(acc_train, 4),
            "probe_unseen": round(acc_test, 4),
            "s0_domain": round(domain_probe(s0, train_ds.domains, seed=0), 4),
            "v_usage": round(v_usage(model, train_ds), 4),
        }
        if model.variation is not None:
            v0 = embed_dataset(model, train_ds, which="v0")
            row["v0_domain"] = round(domain_probe(v0, train_ds.domains, seed=0), 4)
        rows.append(row)
        print(json.dumps(row), flush=True)
    (out / "trajectory.json").write_text(json.dumps({"args": vars(args), "rows": rows}, indent=2) + "\n")


if __name__ == "__main__":
    main()

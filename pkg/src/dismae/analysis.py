"""Artifact emitters: swap-reconstruction grids, propensity-score tracking,
and embedding exports with a native PCA projection.

Every emitter is deterministic given (checkpoint, ids, seed); plots are
backed by CSV files so images are never the source of truth.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ConfigError
from .data import MultiDomainDataset
from .evaluation import embed_dataset
from .masking import full_visible_plan, random_masking
from .nets import DisMAE
from .patches import grid_from_tokens, patchify, unpatchify


def _to_uint8(images: torch.Tensor) -> np.ndarray:
    arr = images.clamp(0.0, 1.0).detach().cpu().numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def paste_visible(pred_tokens: torch.Tensor, target_tokens: torch.Tensor, plan) -> torch.Tensor:
    """Predicted values at masked positions, originals at visible positions."""
    out = pred_tokens.clone()
    idx = plan.visible_idx.unsqueeze(-1).expand(-1, -1, out.shape[-1])
    out.scatter_(1, idx, torch.gather(target_tokens, 1, idx))
    return out


def swap_grid(
    model: DisMAE,
    ds: MultiDomainDataset,
    row_ids: list[int],
    col_ids: list[int],
    seed: int,
) -> np.ndarray:
    """Grid image: cell (i, j) decodes row i's semantics under column j's
    variation summary, with row i's visible patches pasted back. Header row
    and column show the original images; the mask is fixed per row."""
    n = len(ds)
    for i in row_ids + col_ids:
        if not (0 <= i < n):
            raise ConfigError(f"id {i} does not resolve to a dataset item (size {n})")
    if model.variation is None:
        raise ConfigError("swap grids require the variation branch")
    model.eval()
    rng = torch.Generator().manual_seed(seed)
    s = model.cfg.image_size

    # One mask draw per unique id: an id shared between a row and a column
    # keeps its semantics and variation under the same visible set, so the
    # (i, i) cell is exactly the plain reconstruction.
    unique_ids = list(dict.fromkeys(row_ids + col_ids))
    row_pos = torch.tensor([unique_ids.index(i) for i in row_ids], dtype=torch.long)
    col_pos = torch.tensor([unique_ids.index(i) for i in col_ids], dtype=torch.long)

    with torch.no_grad():
        images = ds.images[torch.tensor(unique_ids, dtype=torch.long)]
        grid = patchify(images, model.cfg)
        visible, plan = random_masking(grid.tokens, model.cfg.mask_ratio, rng)
        tokens, _ = model.encode_semantic(visible, plan)
        variation = model.encode_variation(visible, plan)
        row_tokens = tokens[row_pos]
        row_plan = plan.rows(row_pos)
        row_targets = grid.tokens[row_pos]

        tile = np.zeros(((len(row_ids) + 1) * s, (len(col_ids) + 1) * s, model.cfg.channels), dtype=np.uint8)
        pix = _to_uint8(images.permute(0, 2, 3, 1))
        for j, pos in enumerate(col_pos):
            tile[0:s, (j + 1) * s : (j + 2) * s] = pix[pos]
        for i, pos in enumerate(row_pos):
            tile[(i + 1) * s : (i + 2) * s, 0:s] = pix[pos]

        for j in range(len(col_ids)):
            cond = variation[col_pos[j] : col_pos[j] + 1].expand(len(row_ids), -1)
            pred = model.decode(row_tokens, cond, row_plan)
            composite = paste_visible(pred, row_targets, row_plan)
            imgs = unpatchify(grid_from_tokens(composite, model.cfg), model.cfg)
            cell_pix = _to_uint8(imgs.permute(0, 2, 3, 1))
            for i in range(len(row_ids)):
                tile[(i + 1) * s : (i + 2) * s, (j + 1) * s : (j + 2) * s] = cell_pix[i]
    return tile


def save_swap_grid_png(tile: np.ndarray, out_path: str | Path) -> None:
    mode = "RGB" if tile.shape[2] == 3 else "L"
    arr = tile if tile.shape[2] == 3 else tile[:, :, 0]
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(out_path)


def read_propensity_series(run_dir: str | Path) -> list[tuple[int, str, float]]:
    """(epoch, domain, mean_p) rows parsed from the run's scalar log."""
    path = Path(run_dir) / "logs" / "scalars.csv"
    if not path.is_file():
        raise ConfigError(f"run directory {run_dir} has no logs/scalars.csv")
    rows: list[tuple[int, str, float]] = []
    with open(path, newline="") as f:
        for record in csv.DictReader(f):
            series = record["series"]
            if series.startswith("propensity/"):
                rows.append((int(record["epoch"]), series.split("/", 1)[1], float(record["value"])))
    if not rows:
        raise ConfigError(f"run directory {run_dir} has no propensity series")
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def write_scores(run_dir: str | Path, out_csv: str | Path, out_png: str | Path | None = None) -> None:
    rows = read_propensity_series(run_dir)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "domain", "mean_p"])
        for epoch, domain, value in rows:
            writer.writerow([epoch, domain, f"{value:.10g}"])
    if out_png is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        domains = sorted({r[1] for r in rows})
        fig, ax = plt.subplots(figsize=(6, 4))
        for name in domains:
            series = [(e, v) for e, d, v in rows if d == name]
            ax.plot([e for e, _ in series], [v for _, v in series], label=name)
        ax.axhline(1.0 / len(domains), linestyle="--", color="gray", label=f"1/{len(domains)}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean true-domain probability")
        ax.legend()
        fig.tight_layout()
        Path(out_png).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_png, dpi=100, metadata={"Software": None})
        plt.close(fig)


def export_embeddings(
    model: DisMAE, ds: MultiDomainDataset, which: str, out_csv: str | Path
) -> None:
    emb = embed_dataset(model, ds, which=which).numpy()
    out = Path(out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    dim = emb.shape[1]
    with open(out, "w", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "domain", "label"] + [f"dim{i}" for i in range(dim)])
        for i in range(len(ds)):
            label = "" if ds.labels is None else int(ds.labels[i])
            writer.writerow(
                [ds.ids[i], ds.domain_names[int(ds.domains[i])], label]
                + [f"{v:.8g}" for v in emb[i]]
            )


def export_pca_projection(
    model: DisMAE, ds: MultiDomainDataset, which: str, out_csv: str | Path, dims: int = 2
) -> None:
    emb = embed_dataset(model, ds, which=which).numpy()
    coords = pca_project(emb, dims=dims)
    out = Path(out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "domain", "label"] + [f"pc{i}" for i in range(dims)])
        for i in range(len(ds)):
            label = "" if ds.labels is None else int(ds.labels[i])
            writer.writerow(
                [ds.ids[i], ds.domain_names[int(ds.domains[i])], label]
                + [f"{v:.8g}" for v in coords[i]]
            )


def pca_project(embeddings: np.ndarray, dims: int = 2) -> np.ndarray:
    """Centered projection onto the top principal components; each component's
    sign is fixed by making its largest-magnitude entry positive."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d embedding matrix, got shape {x.shape}")
    if x.shape[0] < dims:
        raise ConfigError(f"need at least {dims} samples to project to {dims} dims, got {x.shape[0]}")
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:dims]
    for k in range(dims):
        pivot = int(np.argmax(np.abs(comps[k])))
        if comps[k, pivot] < 0:
            comps[k] = -comps[k]
    return centered @ comps.T

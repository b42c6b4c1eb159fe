"""Synthetic factored multi-domain data, on-disk ingestion, splits, batching.

The generator renders fixed 5x7 digit glyphs (the semantic factor) in
per-domain color palettes (the variation factor), so class geometry is
identical across domains while domain is decodable from color statistics
alone. Everything is a pure function of explicit seeds.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ConfigError, DomainPalette, FactorSpec

log = logging.getLogger(__name__)

MIN_PALETTE_DISTANCE = 0.2

# Classic 5x7 dot-matrix digits; '#' marks foreground.
_GLYPHS = [
    (" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "),
    ("  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    (" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"),
    ("#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "),
    ("   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "),
    ("#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "),
    ("  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "),
    ("#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "),
    (" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "),
    (" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "),
]


@dataclass
class MultiDomainDataset:
    images: torch.Tensor  # (N, C, H, W) float32 in [0, 1]
    domains: torch.Tensor  # (N,) long
    labels: torch.Tensor | None  # (N,) long, or None when unlabeled
    domain_names: list[str]
    class_names: list[str] | None
    ids: list[str]
    skipped_files: int = 0

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    def subset(self, indices) -> "MultiDomainDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return MultiDomainDataset(
            images=self.images[idx],
            domains=self.domains[idx],
            labels=None if self.labels is None else self.labels[idx],
            domain_names=self.domain_names,
            class_names=self.class_names,
            ids=[self.ids[int(i)] for i in idx],
        )


def _palette_colors(p: DomainPalette) -> np.ndarray:
    return np.asarray(list(p.foreground) + list(p.background), dtype=np.float64)


def check_palette_disjointness(domains: list[DomainPalette]) -> None:
    """Cross-domain colors must differ by >= 0.2 in some channel."""
    for i in range(len(domains)):
        for j in range(i + 1, len(domains)):
            a = _palette_colors(domains[i])[:, None, :]
            b = _palette_colors(domains[j])[None, :, :]
            worst = float(np.abs(a - b).max(axis=2).min())
            if worst < MIN_PALETTE_DISTANCE:
                raise ConfigError(
                    f"palettes of domains {domains[i].name!r} and {domains[j].name!r} are not "
                    f"disjoint: closest color pair differs by {worst:.3f} < {MIN_PALETTE_DISTANCE}"
                )


def render_glyph_image(
    class_index: int,
    palette: DomainPalette,
    image_size: int,
    noise_std: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One (H, W, 3) float image: colored glyph on colored background."""
    glyph = _GLYPHS[class_index]
    fg = np.asarray(palette.foreground[int(rng.integers(len(palette.foreground)))], dtype=np.float64)
    bg = np.asarray(palette.background[int(rng.integers(len(palette.background)))], dtype=np.float64)
    img = np.tile(bg, (image_size, image_size, 1))
    if palette.texture:
        yy, xx = np.mgrid[0:image_size, 0:image_size]
        stripes = ((yy + xx) // 2) % 2 == 0
        img[stripes] = np.clip(img[stripes] + 0.03, 0.0, 1.0)
    scale = max(1, int(image_size * 0.8) // 7)
    gw, gh = 5 * scale, 7 * scale
    jitter = int(image_size * 0.10)
    dx = int(rng.integers(-jitter, jitter + 1)) if jitter else 0
    dy = int(rng.integers(-jitter, jitter + 1)) if jitter else 0
    x0 = min(max((image_size - gw) // 2 + dx, 0), image_size - gw)
    y0 = min(max((image_size - gh) // 2 + dy, 0), image_size - gh)
    for r, row in enumerate(glyph):
        for c, ch in enumerate(row):
            if ch == "#":
                img[y0 + r * scale : y0 + (r + 1) * scale, x0 + c * scale : x0 + (c + 1) * scale] = fg
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def _spec_echo(spec: FactorSpec) -> dict:
    return {
        "num_classes": spec.num_classes,
        "domains": [
            {
                "name": d.name,
                "foreground": [list(map(float, c)) for c in d.foreground],
                "background": [list(map(float, c)) for c in d.background],
                "texture": d.texture,
            }
            for d in spec.domains
        ],
        "samples_per_class_per_domain": spec.samples_per_class_per_domain,
        "image_size": spec.image_size,
        "noise_std": spec.noise_std,
        "seed": spec.seed,
    }


def generate_factored_dataset(spec: FactorSpec, out_dir: str | Path) -> MultiDomainDataset:
    """Render the dataset to ``out_dir/<domain>/<class>/NNNN.png`` + manifest.json."""
    spec.validate()
    check_palette_disjointness(spec.domains)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    images: list[np.ndarray] = []
    domains: list[int] = []
    labels: list[int] = []
    ids: list[str] = []
    files: list[dict] = []
    for d_idx, palette in enumerate(spec.domains):
        for c_idx in range(spec.num_classes):
            class_dir = out / palette.name / str(c_idx)
            class_dir.mkdir(parents=True, exist_ok=True)
            for n in range(spec.samples_per_class_per_domain):
                rng = np.random.default_rng([spec.seed, d_idx, c_idx, n])
                img = _quantize(render_glyph_image(c_idx, palette, spec.image_size, spec.noise_std, rng))
                rel = f"{palette.name}/{c_idx}/{n:04d}.png"
                Image.fromarray(img, mode="RGB").save(out / rel)
                files.append(
                    {
                        "path": rel,
                        "sha256": hashlib.sha256((out / rel).read_bytes()).hexdigest(),
                        "domain": palette.name,
                        "class": str(c_idx),
                    }
                )
                images.append(img)
                domains.append(d_idx)
                labels.append(c_idx)
                ids.append(rel)
    manifest = {"spec": _spec_echo(spec), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    stack = np.stack(images).astype(np.float32) / 255.0  # (N, H, W, C)
    return MultiDomainDataset(
        images=torch.from_numpy(stack).permute(0, 3, 1, 2).contiguous(),
        domains=torch.tensor(domains, dtype=torch.long),
        labels=torch.tensor(labels, dtype=torch.long),
        domain_names=[d.name for d in spec.domains],
        class_names=[str(c) for c in range(spec.num_classes)],
        ids=ids,
    )


def _decode_png(path: Path) -> np.ndarray | None:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception:
        return None


def load_image_folders(root: str | Path, labeled: bool = True) -> MultiDomainDataset:
    """Load ``root/<domain>/[<class>/]*.png``; domain/class index = lexicographic rank."""
    rootp = Path(root)
    if not rootp.is_dir():
        raise ConfigError(f"dataset root {root} is not a directory")
    domain_dirs = sorted(p for p in rootp.iterdir() if p.is_dir())
    if not domain_dirs:
        raise ConfigError(f"dataset root {root} contains no domain directories")

    has_subdirs = [any(c.is_dir() for c in d.iterdir()) for d in domain_dirs]
    if labeled and not all(has_subdirs):
        flat = [d.name for d, s in zip(domain_dirs, has_subdirs) if not s]
        raise ConfigError(f"labeled layout expects class subdirectories; domains {flat} have none")
    if not labeled and any(has_subdirs):
        nested = [d.name for d, s in zip(domain_dirs, has_subdirs) if s]
        raise ConfigError(f"unlabeled layout expects images directly under the domain; domains {nested} have subdirectories")

    class_names: list[str] | None = None
    if labeled:
        class_names = sorted({c.name for d in domain_dirs for c in d.iterdir() if c.is_dir()})

    images: list[np.ndarray] = []
    domains: list[int] = []
    labels: list[int] = []
    ids: list[str] = []
    skipped = 0
    for d_idx, d in enumerate(domain_dirs):
        count_before = len(images)
        if labeled:
            entries = [(class_names.index(c.name), f) for c in sorted(p for p in d.iterdir() if p.is_dir()) for f in sorted(c.iterdir()) if f.is_file()]
        else:
            entries = [(-1, f) for f in sorted(d.iterdir()) if f.is_file()]
        for label, f in entries:
            arr = _decode_png(f)
            if arr is None:
                skipped += 1
                continue
            images.append(arr)
            domains.append(d_idx)
            labels.append(label)
            ids.append(str(f.relative_to(rootp)))
        if len(images) == count_before:
            raise ConfigError(f"domain directory {d.name!r} contains no decodable images")
    if skipped:
        log.warning("skipped %d non-image files under %s", skipped, root)

    stack = np.stack(images)
    return MultiDomainDataset(
        images=torch.from_numpy(stack).permute(0, 3, 1, 2).contiguous(),
        domains=torch.tensor(domains, dtype=torch.long),
        labels=torch.tensor(labels, dtype=torch.long) if labeled else None,
        domain_names=[d.name for d in domain_dirs],
        class_names=class_names,
        ids=ids,
        skipped_files=skipped,
    )


def restrict_domains(ds: MultiDomainDataset, keep: list[str]) -> MultiDomainDataset:
    """Dataset restricted to the named domains, with re-indexed domain ids.

    Supports the leave-out protocol: train on a subset of domains, evaluate
    on the held-out one.
    """
    missing = [name for name in keep if name not in ds.domain_names]
    if missing:
        raise ConfigError(f"domains {missing} not present in {ds.domain_names}")
    old_idx = [ds.domain_names.index(name) for name in keep]
    mask = torch.zeros(len(ds), dtype=torch.bool)
    remap = torch.full((len(ds.domain_names),), -1, dtype=torch.long)
    for new, old in enumerate(old_idx):
        mask |= ds.domains == old
        remap[old] = new
    idx = torch.nonzero(mask, as_tuple=False).flatten()
    out = ds.subset(idx)
    out.domains = remap[out.domains]
    out.domain_names = list(keep)
    return out


def _strata(ds: MultiDomainDataset) -> dict[tuple, list[int]]:
    out: dict[tuple, list[int]] = {}
    for i in range(len(ds)):
        key = (int(ds.domains[i]),) if ds.labels is None else (int(ds.domains[i]), int(ds.labels[i]))
        out.setdefault(key, []).append(i)
    return out


def split_train_val(
    ds: MultiDomainDataset, val_fraction: float, seed: int
) -> tuple[MultiDomainDataset, MultiDomainDataset]:
    """Deterministic stratified split; strata are (domain[, class])."""
    if not (0.0 < val_fraction < 1.0):
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng([seed, 0x5713])
    strata = _strata(ds)
    train_idx: list[int] = []
    val_idx: list[int] = []
    for key in sorted(strata):
        members = strata[key]
        if len(members) < 2:
            raise ConfigError(f"stratum {key} has {len(members)} item(s); need >= 2 to split")
        perm = rng.permutation(len(members))
        n_val = int(round(val_fraction * len(members)))
        for rank, pos in enumerate(perm):
            (val_idx if rank < n_val else train_idx).append(members[int(pos)])
    return ds.subset(sorted(train_idx)), ds.subset(sorted(val_idx))


def domain_balanced_batches(
    ds: MultiDomainDataset, per_domain_batch: int, seed: int, epoch: int
) -> list[torch.Tensor]:
    """Equal per-domain draws per batch; shuffling is pure in (seed, epoch);
    the trailing remainder of every domain is dropped."""
    if per_domain_batch < 1:
        raise ConfigError(f"per_domain_batch must be >= 1, got {per_domain_batch}")
    rng = np.random.default_rng([seed, epoch, 0xBA7C4])
    per_domain: list[np.ndarray] = []
    for d in range(ds.num_domains):
        idx = torch.nonzero(ds.domains == d, as_tuple=False).flatten().numpy()
        if len(idx) < per_domain_batch:
            raise ConfigError(
                f"domain {ds.domain_names[d]!r} has only {len(idx)} items; "
                f"needs >= per_domain_batch = {per_domain_batch}"
            )
        per_domain.append(idx[rng.permutation(len(idx))])
    num_batches = min(len(idx) // per_domain_batch for idx in per_domain)
    batches = []
    for b in range(num_batches):
        chunk = np.concatenate([idx[b * per_domain_batch : (b + 1) * per_domain_batch] for idx in per_domain])
        batches.append(torch.from_numpy(chunk).to(torch.long))
    return batches

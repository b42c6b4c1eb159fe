"""Dual-branch masked-autoencoder networks.

A full-width semantic encoder and a lighter variation encoder consume the
same visible patches; a conditioning decoder reconstructs every patch from
the semantic tokens plus the variation summary vector, which rides along as
one extra decoder token. Two small heads (domain classifier, label head)
read the semantic summary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ConfigError, ModelConfig
from .masking import MaskPlan


@dataclass
class LatentPair:
    """Semantic token sequence with its summary row, plus the variation summary."""

    semantic_tokens: Tensor  # (B, 1 + len_keep, H); row 0 is the summary token
    semantic_cls: Tensor  # (B, H)
    variation_cls: Tensor | None  # (B, H); None when the variation branch is disabled


def trunc_normal_(tensor: Tensor, std: float, rng: torch.Generator | None = None) -> Tensor:
    """In-place truncated normal (mean 0, cut at +/- 2 std) with explicit rng."""
    def cdf(x: float) -> float:
        return (1.0 + math.erf(x / math.sqrt(2.0))) / 2.0

    low, high = cdf(-2.0), cdf(2.0)
    with torch.no_grad():
        tensor.uniform_(2 * low - 1, 2 * high - 1, generator=rng)
        tensor.erfinv_()
        tensor.mul_(std * math.sqrt(2.0))
        tensor.clamp_(-2.0 * std, 2.0 * std)
    return tensor


def sincos_pos_embed_2d(dim: int, side: int, with_cls: bool = True) -> Tensor:
    """Fixed 2-D sine-cosine position table, (1, [1+]side*side, dim)."""
    if dim % 4 != 0:
        raise ConfigError(f"position embedding dim must be divisible by 4, got {dim}")
    coords = torch.arange(side, dtype=torch.float64)
    grid_y, grid_x = torch.meshgrid(coords, coords, indexing="ij")
    omega = torch.arange(dim // 4, dtype=torch.float64) / (dim / 4.0)
    omega = 1.0 / (10000.0 ** omega)
    out = []
    for grid in (grid_y, grid_x):
        angles = grid.reshape(-1, 1) * omega.reshape(1, -1)
        out.append(torch.sin(angles))
        out.append(torch.cos(angles))
    table = torch.cat(out, dim=1).to(torch.float32)
    if with_cls:
        table = torch.cat([torch.zeros(1, dim), table], dim=0)
    return table.unsqueeze(0)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * hidden_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class TokenEncoder(nn.Module):
    """Transformer over [cls] + visible patch tokens with fixed positions."""

    def __init__(self, cfg: ModelConfig, depth: int):
        super().__init__()
        self.patch_embed = nn.Linear(cfg.patch_values, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        side = cfg.image_size // cfg.patch_size
        self.register_buffer("pos_embed", sincos_pos_embed_2d(cfg.embed_dim, side), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.num_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, visible_tokens: Tensor, plan: MaskPlan) -> Tensor:
        b = visible_tokens.shape[0]
        x = self.patch_embed(visible_tokens)
        pos = self.pos_embed.to(x.dtype)
        x = x + pos[0, 1:][plan.visible_idx]
        cls = self.cls_token.to(x.dtype) + pos[:, :1]
        x = torch.cat([cls.expand(b, -1, -1), x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class ConditionalDecoder(nn.Module):
    """Reconstructs all patch positions from semantic tokens and a variation summary.

    The summary vector is projected to decoder width and appended as one
    extra sequence token; it is dropped from the per-patch output.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.decoder_dim
        self.embed = nn.Linear(cfg.embed_dim, d)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        side = cfg.image_size // cfg.patch_size
        self.register_buffer("pos_embed", sincos_pos_embed_2d(d, side), persistent=False)
        if cfg.variation_enabled:
            self.cond_proj = nn.Linear(cfg.embed_dim, d)
            self.cond_pos = nn.Parameter(torch.zeros(1, 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads) for _ in range(cfg.decoder_depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.patch_values)

    def forward(self, semantic_tokens: Tensor, variation_summary: Tensor | None, plan: MaskPlan) -> Tensor:
        b, n, _ = semantic_tokens.shape
        if variation_summary is not None:
            if not hasattr(self, "cond_proj"):
                raise ConfigError("decoder was built without the variation conditioning path")
            if variation_summary.shape[0] != b:
                raise ValueError(
                    f"batch mismatch: {b} semantic rows vs {variation_summary.shape[0]} variation rows"
                )
        x = self.embed(semantic_tokens)
        d = x.shape[-1]
        mask = self.mask_token.to(x.dtype).expand(b, plan.num_masked, d)
        patches = torch.cat([x[:, 1:], mask], dim=1)
        patches = torch.gather(patches, 1, plan.restore_perm.unsqueeze(-1).expand(-1, -1, d))
        seq = torch.cat([x[:, :1], patches], dim=1) + self.pos_embed.to(x.dtype)
        if variation_summary is not None:
            cond = self.cond_proj(variation_summary).unsqueeze(1) + self.cond_pos.to(x.dtype)
            seq = torch.cat([seq, cond], dim=1)
        for blk in self.blocks:
            seq = blk(seq)
        seq = self.norm(seq)
        return self.head(seq[:, 1 : 1 + plan.num_patches])


class DomainClassifier(nn.Module):
    """Two affine layers with one GELU; final layer zero-initialized."""

    def __init__(self, dim: int, num_domains: int):
        super().__init__()
        if num_domains < 2:
            raise ConfigError(f"domain classifier needs >= 2 domains, got {num_domains}")
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, num_domains)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))

    def probabilities(self, x: Tensor) -> Tensor:
        return self.forward(x).softmax(dim=-1)


class LabelHead(nn.Module):
    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        if num_classes < 1:
            raise ConfigError("label head requires num_classes >= 1 (unlabeled mode has no head)")
        self.fc = nn.Linear(dim, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(x)


class DisMAE(nn.Module):
    """Bundles both encoders, the decoder, and the two heads."""

    def __init__(self, cfg: ModelConfig, rng: torch.Generator | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.semantic = TokenEncoder(cfg, cfg.semantic_depth)
        self.variation = TokenEncoder(cfg, cfg.variation_depth) if cfg.variation_enabled else None
        self.decoder = ConditionalDecoder(cfg)
        self.domain_classifier = DomainClassifier(cfg.embed_dim, cfg.num_domains)
        self.label_head = LabelHead(cfg.embed_dim, cfg.num_classes) if cfg.num_classes >= 1 else None
        self.reset_parameters(rng)

    def reset_parameters(self, rng: torch.Generator | None = None) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                trunc_normal_(module.weight, std=0.02, rng=rng)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        for token in (
            self.semantic.cls_token,
            None if self.variation is None else self.variation.cls_token,
            self.decoder.mask_token,
            getattr(self.decoder, "cond_pos", None),
        ):
            if token is not None:
                trunc_normal_(token, std=0.02, rng=rng)
        # Zero final classifier layer: training starts at the uniform propensity 1/K.
        nn.init.zeros_(self.domain_classifier.fc2.weight)
        nn.init.zeros_(self.domain_classifier.fc2.bias)

    def encode_semantic(self, visible_tokens: Tensor, plan: MaskPlan) -> tuple[Tensor, Tensor]:
        tokens = self.semantic(visible_tokens, plan)
        return tokens, tokens[:, 0]

    def encode_variation(self, visible_tokens: Tensor, plan: MaskPlan) -> Tensor:
        if self.variation is None:
            raise ConfigError("variation branch is disabled in this model")
        return self.variation(visible_tokens, plan)[:, 0]

    def encode_latents(self, visible_tokens: Tensor, plan: MaskPlan) -> LatentPair:
        tokens, cls = self.encode_semantic(visible_tokens, plan)
        variation = self.encode_variation(visible_tokens, plan) if self.variation is not None else None
        return LatentPair(semantic_tokens=tokens, semantic_cls=cls, variation_cls=variation)

    def decode(self, semantic_tokens: Tensor, variation_summary: Tensor | None, plan: MaskPlan) -> Tensor:
        return self.decoder(semantic_tokens, variation_summary, plan)

    def classify_domain(self, semantic_cls: Tensor) -> Tensor:
        return self.domain_classifier.probabilities(semantic_cls)

    def classify_label(self, semantic_cls: Tensor) -> Tensor:
        if self.label_head is None:
            raise ConfigError("model is unlabeled (num_classes = 0); no label head available")
        return self.label_head(semantic_cls)

    def backbone_parameters(self) -> list[nn.Parameter]:
        params = list(self.semantic.parameters()) + list(self.decoder.parameters())
        if self.variation is not None:
            params += list(self.variation.parameters())
        return params


def build_model(cfg: ModelConfig, seed: int) -> DisMAE:
    rng = torch.Generator().manual_seed(seed)
    return DisMAE(cfg, rng)

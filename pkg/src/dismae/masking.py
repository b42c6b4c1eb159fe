"""Random patch masking: visible/masked index bookkeeping for one batch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .config import ConfigError


@dataclass
class MaskPlan:
    """Per-sample visible/masked partition of patch positions.

    ``restore_perm[b, pos]`` gives, for original patch position ``pos``, its
    index in the shuffled sequence [kept patches || masked patches]; gathering
    a decoder sequence with it restores the original row-major order.
    """

    num_patches: int
    len_keep: int
    visible_idx: Tensor  # (B, len_keep) long
    masked_idx: Tensor  # (B, L - len_keep) long
    restore_perm: Tensor  # (B, L) long

    @property
    def batch_size(self) -> int:
        return self.visible_idx.shape[0]

    @property
    def num_masked(self) -> int:
        return self.num_patches - self.len_keep

    def rows(self, index: Tensor) -> "MaskPlan":
        """Plan restricted to the given batch rows (e.g. swap anchors)."""
        return MaskPlan(
            num_patches=self.num_patches,
            len_keep=self.len_keep,
            visible_idx=self.visible_idx[index],
            masked_idx=self.masked_idx[index],
            restore_perm=self.restore_perm[index],
        )

    def validate(self) -> None:
        b = self.batch_size
        if self.visible_idx.shape != (b, self.len_keep):
            raise ValueError("visible_idx shape mismatch")
        if self.masked_idx.shape != (b, self.num_patches - self.len_keep):
            raise ValueError("masked_idx shape mismatch")
        if self.restore_perm.shape != (b, self.num_patches):
            raise ValueError("restore_perm shape mismatch")
        full = torch.arange(self.num_patches)
        for i in range(b):
            union = torch.cat([self.visible_idx[i], self.masked_idx[i]])
            if not torch.equal(torch.sort(union).values, full):
                raise ValueError(f"visible/masked sets of sample {i} do not partition 0..L-1")
            if not torch.equal(torch.sort(self.restore_perm[i]).values, full):
                raise ValueError(f"restore_perm of sample {i} is not a bijection")


def random_masking(tokens: Tensor, ratio: float, rng: torch.Generator) -> tuple[Tensor, MaskPlan]:
    """Uniform random per-sample masking by noise ranking.

    Keeps ``len_keep = floor(L * (1 - ratio))`` patches per sample. The kept
    tokens come back in noise order, matching ``visible_idx``.
    """
    if not (0.0 <= ratio < 1.0):
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    b, l, _ = tokens.shape
    len_keep = math.floor(l * (1.0 - ratio))
    noise = torch.rand(b, l, generator=rng, dtype=torch.float32)
    shuffle = torch.argsort(noise, dim=1)
    restore_perm = torch.argsort(shuffle, dim=1)
    visible_idx = shuffle[:, :len_keep]
    masked_idx = shuffle[:, len_keep:]
    visible = torch.gather(tokens, 1, visible_idx.unsqueeze(-1).expand(-1, -1, tokens.shape[2]))
    plan = MaskPlan(
        num_patches=l,
        len_keep=len_keep,
        visible_idx=visible_idx,
        masked_idx=masked_idx,
        restore_perm=restore_perm,
    )
    return visible, plan


def full_visible_plan(batch_size: int, num_patches: int) -> MaskPlan:
    """Degenerate plan with every patch visible in canonical order.

    Used for probe/finetune/eval forward passes, which disable masking.
    """
    idx = torch.arange(num_patches).unsqueeze(0).expand(batch_size, -1)
    return MaskPlan(
        num_patches=num_patches,
        len_keep=num_patches,
        visible_idx=idx,
        masked_idx=idx[:, :0],
        restore_perm=idx,
    )

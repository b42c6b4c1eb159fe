"""Prototype: broadcast-add decoder conditioning instead of the extra token.

Temporary experiment driver; monkeypatches the decoder forward, then runs
the same calibration protocol.
"""

import sys

import torch
from torch import nn

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


nets.ConditionalDecoder.forward = forward_broadcast

sys.argv[0] = "calibrate.py"
exec(open("scripts/calibrate.py").read())

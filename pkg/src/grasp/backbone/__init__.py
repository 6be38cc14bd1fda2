"""Sequential encoders consuming enhanced item matrices.

Both backbones map an ``L x h`` input matrix to per-position user
representations ``o_t`` with strict causality: ``o_t`` depends only on
positions ``<= t``.  Batched forward/backward cores operate on left-padded
``(B, L, h)`` grids with a boolean mask; padding never leaks into real
positions.
"""

from .common import (
    BackboneConfig,
    SequenceOutput,
    load_backbone_checkpoint,
    save_backbone_checkpoint,
    score,
)
from .gru4rec import Gru4Rec, gru4rec_forward
from .sasrec import SasRec, sasrec_forward

KINDS = {"gru4rec": Gru4Rec, "sasrec": SasRec}


def build_backbone(cfg: BackboneConfig, seed: int):
    return KINDS[cfg.kind](cfg, seed)


__all__ = [
    "BackboneConfig",
    "SequenceOutput",
    "Gru4Rec",
    "SasRec",
    "build_backbone",
    "gru4rec_forward",
    "sasrec_forward",
    "score",
    "save_backbone_checkpoint",
    "load_backbone_checkpoint",
]

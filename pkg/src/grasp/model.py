"""Composition of an item encoder and a sequential backbone.

Two encoders exist: ``SemanticEncoder`` (the retrieval-augmented path:
frozen embedding stores -> gated branches -> fusion MLP) and ``IdEncoder``
(a plain trainable item-id embedding table, the ID-only baseline).  The
``RecModel`` wrapper owns the batch loss -- per-position binary cross
entropy over {positive, sampled negatives} -- and routes gradients to
exactly two parameter groups: the encoder's and the backbone's.  Semantic
stores are read-only; no gradient path into them exists.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import hae as hae_mod
from .backbone import BackboneConfig, build_backbone
from .errors import DataError
from .hae import HaeConfig, SemanticStore

PROB_CLAMP = 1e-7


def pad_sequences(seqs, max_seq_len: int):
    """Left-pad integer sequences into an (B, L) grid plus boolean mask.

    Sequences longer than ``max_seq_len`` keep their most recent items; L
    is the longest kept length in the batch.
    """
    kept = [list(s)[-max_seq_len:] for s in seqs]
    L = max((len(s) for s in kept), default=0)
    B = len(kept)
    items = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, s in enumerate(kept):
        if s:
            items[b, L - len(s):] = s
            mask[b, L - len(s):] = True
    return items, mask


class SemanticEncoder:
    """Holistic-attention enhancement over frozen semantic stores."""

    group_name = "hae"

    def __init__(
        self,
        user_store: SemanticStore,
        item_store: SemanticStore,
        cfg: HaeConfig,
        seed: int,
        user_rows: np.ndarray | None = None,
        item_rows: np.ndarray | None = None,
    ):
        if user_store.matrix.dim != cfg.d_sem or item_store.matrix.dim != cfg.d_sem:
            raise DataError(
                f"store dims ({user_store.matrix.dim}, {item_store.matrix.dim}) "
                f"do not match configured d_sem {cfg.d_sem}"
            )
        self.user_store = user_store
        self.item_store = item_store
        self.cfg = cfg
        self.hae = hae_mod.init_params(cfg, seed)
        self.user_rows = self._check_rows(user_rows, user_store.matrix.rows, "user")
        self.item_rows = self._check_rows(item_rows, item_store.matrix.rows, "item")

    @staticmethod
    def _check_rows(rows, limit, label):
        if rows is None:
            return None
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= limit):
            raise DataError(f"{label} id map points outside the embedding matrix ({limit} rows)")
        return rows

    def _map(self, ids, rows):
        return ids if rows is None else rows[ids]

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.hae.tensors()

    def encode_items(self, user_ids, item_ids, positions_mask=None, softmax_over_positions=False):
        """Enhanced representations for items under each user's query.

        ``item_ids`` may have any trailing shape after the batch axis; the
        user vectors broadcast across it.  Returns (fused, cache).
        """
        user_ids = np.asarray(user_ids, dtype=np.int64)
        item_ids = np.asarray(item_ids, dtype=np.int64)
        urows = self._map(user_ids, self.user_rows)
        irows = self._map(item_ids, self.item_rows)
        extra = item_ids.ndim - 1
        shape = (len(user_ids),) + (1,) * extra + (self.cfg.d_sem,)
        u = np.broadcast_to(self.user_store.matrix.values[urows].reshape(shape), irows.shape + (self.cfg.d_sem,))
        ubar = np.broadcast_to(self.user_store.cache.pooled_means[urows].reshape(shape), irows.shape + (self.cfg.d_sem,))
        it = self.item_store.matrix.values[irows]
        itbar = self.item_store.cache.pooled_means[irows]
        concat = hae_mod._branch_concat(
            u, ubar, it, itbar, self.cfg,
            positions_mask=positions_mask,
            softmax_over_positions=softmax_over_positions and self.cfg.softmax_variant,
        )
        fused, mlp_cache = hae_mod.fuse_forward(concat, self.hae)
        return fused, mlp_cache

    def backward(self, cache, d_fused) -> dict[str, np.ndarray]:
        return hae_mod.fuse_backward(cache, d_fused, self.hae)


class IdEncoder:
    """Trainable item-id embedding table (ID-only baseline)."""

    group_name = "id_embedding"

    def __init__(self, item_count: int, h: int, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1DE]))
        s = 1.0 / np.sqrt(h)
        self.emb = rng.uniform(-s, s, size=(item_count, h))

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"emb": self.emb}

    def encode_items(self, user_ids, item_ids, positions_mask=None, softmax_over_positions=False):
        item_ids = np.asarray(item_ids, dtype=np.int64)
        return self.emb[item_ids], item_ids

    def backward(self, cache, d_fused) -> dict[str, np.ndarray]:
        item_ids = cache
        grad = np.zeros_like(self.emb)
        np.add.at(grad, item_ids.reshape(-1), d_fused.reshape(-1, d_fused.shape[-1]))
        return {"emb": grad}


class RecModel:
    """Encoder + backbone with the BCE training objective."""

    def __init__(self, encoder, backbone):
        self.encoder = encoder
        self.backbone = backbone

    def parameter_groups(self) -> dict[str, dict[str, np.ndarray]]:
        return {self.encoder.group_name: self.encoder.params, "backbone": self.backbone.params}

    # -- training ------------------------------------------------------
    def loss_and_grads(self, batch, *, training=True, rng=None):
        """Mean BCE over real (position, candidate) pairs plus gradients.

        ``batch`` carries users (B,), inputs (B, L), mask (B, L), targets
        (B, L) and negatives (B, L, n_neg).  Returns (loss, grads, n_pairs).
        """
        users, inputs, mask = batch.users, batch.inputs, batch.mask
        targets, negatives = batch.targets, batch.negatives
        enc_in, cache_in = self.encoder.encode_items(
            users, inputs, positions_mask=mask, softmax_over_positions=True
        )
        o, bb_cache = self.backbone.forward(enc_in, mask, training=training, rng=rng)
        cand_ids = np.concatenate([targets[..., None], negatives], axis=-1)
        cand, cache_cand = self.encoder.encode_items(users, cand_ids)

        logits = np.einsum("blh,blch->blc", o, cand)
        probs = 1.0 / (1.0 + np.exp(-logits))
        labels = np.zeros_like(probs)
        labels[..., 0] = 1.0
        pair_mask = np.broadcast_to(mask[..., None], probs.shape).astype(np.float64)
        n_pairs = pair_mask.sum()
        if n_pairs == 0:
            raise ValueError("batch contains no real training positions")

        clamped = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
        losses = -(labels * np.log(clamped) + (1.0 - labels) * np.log(1.0 - clamped))
        loss = float((losses * pair_mask).sum() / n_pairs)

        inside = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
        d_logits = (probs - labels) * inside * pair_mask / n_pairs
        d_o = np.einsum("blc,blch->blh", d_logits, cand)
        d_cand = d_logits[..., None] * o[:, :, None, :]

        d_enc_in, bb_grads = self.backbone.backward(bb_cache, d_o)
        enc_grads = self.encoder.backward(cache_in, d_enc_in)
        for name, g in self.encoder.backward(cache_cand, d_cand).items():
            enc_grads[name] = enc_grads[name] + g
        return loss, {self.encoder.group_name: enc_grads, "backbone": bb_grads}, n_pairs

    # -- inference -----------------------------------------------------
    def final_representations(self, users, seqs, max_seq_len: int) -> np.ndarray:
        """Last-position backbone output per user, shape (B, h)."""
        inputs, mask = pad_sequences(seqs, max_seq_len)
        enc_in, _ = self.encoder.encode_items(
            users, inputs, positions_mask=mask, softmax_over_positions=True
        )
        out, _ = self.backbone.forward(enc_in, mask)
        return out[:, -1, :]

    def candidate_scores(self, users, cand_ids, o_final) -> np.ndarray:
        """sigma(o . repr) for each candidate, shape (B, C)."""
        cand, _ = self.encoder.encode_items(users, cand_ids)
        logits = np.einsum("bh,bch->bc", o_final, cand)
        return 1.0 / (1.0 + np.exp(-logits))

    # -- parameter snapshots --------------------------------------------
    def snapshot(self, precision: str = "f32") -> dict[str, dict[str, np.ndarray]]:
        """Copy of all parameters; ``f32`` mimics checkpoint serialization."""
        out = {}
        for group, tensors in self.parameter_groups().items():
            if precision == "f32":
                out[group] = {n: t.astype(np.float32).astype(np.float64) for n, t in tensors.items()}
            else:
                out[group] = {n: t.copy() for n, t in tensors.items()}
        return out

    def load_snapshot(self, snap) -> None:
        for group, tensors in self.parameter_groups().items():
            for name, tensor in tensors.items():
                tensor[...] = snap[group][name]


def semantic_checksum(model: RecModel) -> str:
    """Digest of the frozen stores; unchanged across training by contract."""
    if not isinstance(model.encoder, SemanticEncoder):
        return ""
    digest = hashlib.sha256()
    enc = model.encoder
    for arr in (
        enc.user_store.matrix.values,
        enc.user_store.cache.pooled_means,
        enc.user_store.cache.neighbor_ids,
        enc.item_store.matrix.values,
        enc.item_store.cache.pooled_means,
        enc.item_store.cache.neighbor_ids,
    ):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def build_semantic_model(
    user_store: SemanticStore,
    item_store: SemanticStore,
    hae_cfg: HaeConfig,
    backbone_cfg: BackboneConfig,
    seed: int,
    user_rows=None,
    item_rows=None,
) -> RecModel:
    encoder = SemanticEncoder(user_store, item_store, hae_cfg, seed, user_rows, item_rows)
    return RecModel(encoder, build_backbone(backbone_cfg, seed))


def build_id_model(item_count: int, backbone_cfg: BackboneConfig, seed: int) -> RecModel:
    return RecModel(IdEncoder(item_count, backbone_cfg.h, seed), build_backbone(backbone_cfg, seed))

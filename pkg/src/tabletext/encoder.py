"""Set encoders over record structures.

Records are embedded as ReLU(W [key; value] + b). The hierarchical path runs
a transformer over each entity's records plus a learned aggregation slot,
then a second transformer over the per-entity aggregates; the summary z is
the mean of the entity states. The flat path runs one transformer over the
linearized records. No positional encodings anywhere: inputs are unordered
sets, and permutation equivariance is the point.

Everything is batched with padding masks. Layout for the low level: each
entity occupies a row of length L = max_records + 1, records in slots
0..J_i-1, the aggregation slot at J_i, padding after. Masked softmax uses an
additive -1e30, which underflows to an exact zero weight on padded slots.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .datamodel import BOS_ID, EOS_ID, Example, Vocabulary
from .tensorcore import (
    ParamStore,
    Tensor,
    add,
    concat,
    dropout,
    embedding_lookup,
    gather_rows,
    init_bias,
    init_embedding,
    init_gain,
    init_matrix,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    scatter_rows,
    slice_axis,
    softmax,
    transpose_axes,
    reduce_sum,
)

SCENARIOS = ("flat", "hier-kv", "hier-k")

NEG_INF = -1e30


@dataclass
class ModelConfig:
    """Model shape shared by the encoders, attention, and decoder."""

    scenario: str = "hier-kv"
    d: int = 300
    key_dim: int = 20
    value_dim: int = 300
    layers: int = 2
    heads: int = 2
    dropout: float = 0.5
    context_over_states: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        for name in ("d", "key_dim", "value_dim", "layers", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def is_hierarchical(self) -> bool:
        return self.scenario in ("hier-kv", "hier-k")


def _stack_params(store: ParamStore, prefix: str, cfg: ModelConfig, seed: int) -> None:
    d = cfg.d
    for i in range(cfg.layers):
        p = f"{prefix}.layer{i}"
        init_gain(store, f"{p}.norm1.gain", d)
        init_bias(store, f"{p}.norm1.bias", d)
        for w in ("Wq", "Wk", "Wv", "Wo"):
            init_matrix(store, f"{p}.attn.{w}", d, d, seed)
        init_gain(store, f"{p}.norm2.gain", d)
        init_bias(store, f"{p}.norm2.bias", d)
        init_matrix(store, f"{p}.ff.W1", d, 2 * d, seed)
        init_bias(store, f"{p}.ff.b1", 2 * d)
        init_matrix(store, f"{p}.ff.W2", 2 * d, d, seed)
        init_bias(store, f"{p}.ff.b2", d)
    init_gain(store, f"{prefix}.final_norm.gain", d)
    init_bias(store, f"{prefix}.final_norm.bias", d)


def build_encoder_params(
    store: ParamStore, cfg: ModelConfig, num_values: int, num_keys: int, seed: int
) -> None:
    init_embedding(store, "embed.key", num_keys, cfg.key_dim, seed)
    init_embedding(store, "embed.value", num_values, cfg.value_dim, seed)
    init_matrix(store, "embed.record.W", cfg.key_dim + cfg.value_dim, cfg.d, seed)
    init_bias(store, "embed.record.b", cfg.d)
    if cfg.is_hierarchical:
        init_embedding(store, "encoder.ent", 1, cfg.d, seed)
        _stack_params(store, "encoder.low", cfg, seed)
        _stack_params(store, "encoder.high", cfg, seed)
    else:
        _stack_params(store, "encoder.flat", cfg, seed)


@dataclass
class PackedBatch:
    """Index arrays for one batch of examples, encoder and decoder side."""

    size: int
    n_entities: int  # I: padded entity count
    n_records: int  # J: padded records-per-entity count
    n_flat: int  # R: padded linearized record count
    # one row per real record, in example/file order
    rec_key_ids: np.ndarray
    rec_value_ids: np.ndarray
    rec_low_slot: np.ndarray  # into (B*I*L) rows, L = J+1
    rec_flat_slot: np.ndarray  # into (B*R) rows
    ent_scatter_slot: np.ndarray  # aggregation slots of real entities, into (B*I*L)
    ent_gather_slot: np.ndarray  # (B*I,) aggregation slot per entity row (pads garbage)
    low_mask: np.ndarray  # (B*I, L)
    entity_mask: np.ndarray  # (B, I)
    record_mask: np.ndarray  # (B, I, J)
    flat_mask: np.ndarray  # (B, R)
    # decoder side
    n_steps: int  # T = description length + 1 (EOS target)
    inp_ids: np.ndarray  # (B, T) BOS + words, OOV as UNK
    tgt_word_ids: np.ndarray  # (B, T) words + EOS, OOV as UNK
    copy_flag: np.ndarray  # (B, T) 1.0 where the target is copied
    copy_ent: np.ndarray  # (B, T) entity index of the copy target
    copy_rec_flat: np.ndarray  # (B, T) i * J + j of the copy target
    copy_lin: np.ndarray  # (B, T) linear record index of the copy target
    token_mask: np.ndarray  # (B, T)

    @property
    def low_len(self) -> int:
        return self.n_records + 1

    def num_tokens(self) -> float:
        return float(self.token_mask.sum())


def pack_batch(examples: List[Example], vocab: Vocabulary) -> PackedBatch:
    if not examples:
        raise ValueError("cannot pack an empty batch")
    B = len(examples)
    I = max(len(ex.entities) for ex in examples)
    J = max(len(e.records) for ex in examples for e in ex.entities)
    R = max(ex.num_records() for ex in examples)
    L = J + 1
    T = max(len(ex.description.tokens) for ex in examples) + 1

    rec_key_ids, rec_value_ids, rec_low_slot, rec_flat_slot = [], [], [], []
    ent_scatter_slot = []
    ent_gather_slot = np.zeros(B * I, dtype=np.int64)
    low_mask = np.zeros((B * I, L))
    entity_mask = np.zeros((B, I))
    record_mask = np.zeros((B, I, J))
    flat_mask = np.zeros((B, R))

    inp_ids = np.zeros((B, T), dtype=np.int64)
    tgt_word_ids = np.zeros((B, T), dtype=np.int64)
    copy_flag = np.zeros((B, T))
    copy_ent = np.zeros((B, T), dtype=np.int64)
    copy_rec_flat = np.zeros((B, T), dtype=np.int64)
    copy_lin = np.zeros((B, T), dtype=np.int64)
    token_mask = np.zeros((B, T))

    for b, ex in enumerate(examples):
        lin_offset = [0]
        for e in ex.entities:
            lin_offset.append(lin_offset[-1] + len(e.records))
        pos = 0
        for i, entity in enumerate(ex.entities):
            row = (b * I + i) * L
            for j, rec in enumerate(entity.records):
                rec_key_ids.append(vocab.key_id(rec.key))
                rec_value_ids.append(vocab.value_id(rec.value))
                rec_low_slot.append(row + j)
                rec_flat_slot.append(b * R + pos)
                record_mask[b, i, j] = 1.0
                flat_mask[b, pos] = 1.0
                pos += 1
            ji = len(entity.records)
            ent_scatter_slot.append(row + ji)
            ent_gather_slot[b * I + i] = row + ji
            low_mask[b * I + i, : ji + 1] = 1.0
            entity_mask[b, i] = 1.0

        tokens = ex.description.tokens
        align = ex.description.copy_alignment
        ids = [vocab.word_id(tok) for tok in tokens]
        inp_ids[b, 0] = BOS_ID
        inp_ids[b, 1 : len(tokens) + 1] = ids[: T - 1]
        tgt_word_ids[b, : len(tokens)] = ids
        tgt_word_ids[b, len(tokens)] = EOS_ID
        token_mask[b, : len(tokens) + 1] = 1.0
        for t, a in enumerate(align):
            if a is not None:
                i, j = a
                copy_flag[b, t] = 1.0
                copy_ent[b, t] = i
                copy_rec_flat[b, t] = i * J + j
                copy_lin[b, t] = lin_offset[i] + j

    return PackedBatch(
        size=B,
        n_entities=I,
        n_records=J,
        n_flat=R,
        rec_key_ids=np.asarray(rec_key_ids, dtype=np.int64),
        rec_value_ids=np.asarray(rec_value_ids, dtype=np.int64),
        rec_low_slot=np.asarray(rec_low_slot, dtype=np.int64),
        rec_flat_slot=np.asarray(rec_flat_slot, dtype=np.int64),
        ent_scatter_slot=np.asarray(ent_scatter_slot, dtype=np.int64),
        ent_gather_slot=ent_gather_slot,
        low_mask=low_mask,
        entity_mask=entity_mask,
        record_mask=record_mask,
        flat_mask=flat_mask,
        n_steps=T,
        inp_ids=inp_ids,
        tgt_word_ids=tgt_word_ids,
        copy_flag=copy_flag,
        copy_ent=copy_ent,
        copy_rec_flat=copy_rec_flat,
        copy_lin=copy_lin,
        token_mask=token_mask,
    )


def _multi_head_attention(store, prefix, x, add_mask, cfg):
    # x: (N, L, d); add_mask: (N*H, 1, L) additive numpy constant.
    # Projections run as single 2D matmuls; heads fold into the batch axis.
    t = store.tensor
    N, L, d = x.data.shape
    H = cfg.heads
    dh = d // H
    x2 = reshape(x, (N * L, d))
    heads = []
    for name in ("Wq", "Wk", "Wv"):
        proj = reshape(matmul(x2, t(f"{prefix}.{name}")), (N, L, H, dh))
        heads.append(reshape(transpose_axes(proj, (0, 2, 1, 3)), (N * H, L, dh)))
    q, k, v = heads
    scores = matmul(q, transpose_axes(k, (0, 2, 1)))
    scores = mul(scores, 1.0 / np.sqrt(dh))
    scores = add(scores, add_mask)
    weights = softmax(scores, axis=-1)
    ctx = reshape(matmul(weights, v), (N, H, L, dh))
    ctx = reshape(transpose_axes(ctx, (0, 2, 1, 3)), (N * L, d))
    return reshape(matmul(ctx, t(f"{prefix}.Wo")), (N, L, d))


def transformer_stack(store, prefix, x, mask, cfg, training=False, rng=None):
    """Pre-norm residual transformer over (N, L, d) with a (N, L) valid mask."""
    t = store.tensor
    N, L, d = x.data.shape
    add_mask = np.repeat(((1.0 - mask) * NEG_INF)[:, None, :], cfg.heads, axis=0)
    for i in range(cfg.layers):
        p = f"{prefix}.layer{i}"
        y = layer_norm(x, t(f"{p}.norm1.gain"), t(f"{p}.norm1.bias"))
        a = _multi_head_attention(store, f"{p}.attn", y, add_mask, cfg)
        x = add(x, dropout(a, cfg.dropout, training, rng))
        y = reshape(layer_norm(x, t(f"{p}.norm2.gain"), t(f"{p}.norm2.bias")), (N * L, d))
        h = relu(add(matmul(y, t(f"{p}.ff.W1")), t(f"{p}.ff.b1")))
        h = reshape(add(matmul(h, t(f"{p}.ff.W2")), t(f"{p}.ff.b2")), (N, L, d))
        x = add(x, dropout(h, cfg.dropout, training, rng))
    return layer_norm(x, t(f"{prefix}.final_norm.gain"), t(f"{prefix}.final_norm.bias"))


@dataclass
class EncodedBatch:
    """Encoder outputs plus the masks attention and the decoder need."""

    z: Tensor  # (B, d)
    batch: PackedBatch
    # hierarchical scenarios
    entity_states: Optional[Tensor] = None  # e: (B, I, d)
    record_states: Optional[Tensor] = None  # h: (B, I, J, d)
    record_embeddings: Optional[Tensor] = None  # r: (B, I, J, d), zero at pads
    key_embeddings: Optional[Tensor] = None  # k: (B, I, J, key_dim), zero at pads
    # flat scenario
    flat_states: Optional[Tensor] = None  # (B, R, d)
    # lazily filled by attention.projected_targets; never set by encoders
    proj_cache: Optional[dict] = None


def _masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    # x: (B, N, d); mask: (B, N) with >= 1 valid per row
    weighted = mul(x, mask[:, :, None])
    total = reduce_sum(weighted, axis=1)
    return mul(total, (1.0 / mask.sum(axis=1))[:, None])


def encode_batch(
    store: ParamStore,
    cfg: ModelConfig,
    batch: PackedBatch,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> EncodedBatch:
    t = store.tensor
    B, I, J, R = batch.size, batch.n_entities, batch.n_records, batch.n_flat
    L = batch.low_len
    d = cfg.d

    k_emb = embedding_lookup(t("embed.key"), batch.rec_key_ids)
    v_emb = embedding_lookup(t("embed.value"), batch.rec_value_ids)
    pre = add(matmul(concat([k_emb, v_emb], axis=1), t("embed.record.W")), t("embed.record.b"))
    r = relu(pre)  # (N_rec, d)

    if not cfg.is_hierarchical:
        x = reshape(scatter_rows(r, batch.rec_flat_slot, B * R), (B, R, d))
        states = transformer_stack(store, "encoder.flat", x, batch.flat_mask, cfg, training, rng)
        z = _masked_mean(states, batch.flat_mask)
        return EncodedBatch(z=z, batch=batch, flat_states=states)

    rec_grid = scatter_rows(r, batch.rec_low_slot, B * I * L)  # records only
    ent_rows = gather_rows(t("encoder.ent"), np.zeros(len(batch.ent_scatter_slot), dtype=np.int64))
    ent_grid = scatter_rows(ent_rows, batch.ent_scatter_slot, B * I * L)
    low_in = reshape(add(rec_grid, ent_grid), (B * I, L, d))
    low_out = transformer_stack(store, "encoder.low", low_in, batch.low_mask, cfg, training, rng)

    h_ent = gather_rows(reshape(low_out, (B * I * L, d)), batch.ent_gather_slot)
    h_ent = reshape(h_ent, (B, I, d))
    entity_states = transformer_stack(
        store, "encoder.high", h_ent, batch.entity_mask, cfg, training, rng
    )
    z = _masked_mean(entity_states, batch.entity_mask)

    record_states = _slice_records(reshape(low_out, (B, I, L, d)), J)
    record_embeddings = _slice_records(reshape(rec_grid, (B, I, L, d)), J)

    key_embeddings = None
    if cfg.scenario == "hier-k":
        k_grid = scatter_rows(k_emb, batch.rec_low_slot, B * I * L)
        key_embeddings = _slice_records(reshape(k_grid, (B, I, L, cfg.key_dim)), J)

    return EncodedBatch(
        z=z,
        batch=batch,
        entity_states=entity_states,
        record_states=record_states,
        record_embeddings=record_embeddings,
        key_embeddings=key_embeddings,
    )


def _slice_records(x: Tensor, n_records: int) -> Tensor:
    return slice_axis(x, axis=2, start=0, stop=n_records)


def encode_example(store, cfg, example: Example, vocab: Vocabulary) -> EncodedBatch:
    """Single-example convenience wrapper (evaluation mode)."""
    return encode_batch(store, cfg, pack_batch([example], vocab), training=False)

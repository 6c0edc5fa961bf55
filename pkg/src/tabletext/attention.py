"""Decoding-time attention over encoded structures.

Three scenarios share the bilinear score form d_t' W x. The hierarchical
path scores entities (alpha, against high-level states) and records within
each entity (beta, against low-level record states, or beta-hat against raw
key embeddings in the key-guided variant), and mixes raw record embeddings
r_{i,j} with the product weights. The flat path is a single softmax over
linearized encoder states, and the context is a weighted sum of those
states. No score scaling here; that belongs to the encoders' self-attention.

The attention targets are projected through the bilinear weight once per
encoded batch and cached, so each decoding step costs only batched matvecs
against the current query.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .encoder import NEG_INF, EncodedBatch, ModelConfig
from .tensorcore import (
    ParamStore,
    Tensor,
    add,
    exp,
    init_matrix,
    log_softmax,
    matmul,
    mul,
    reshape,
    transpose_axes,
)


def build_attention_params(store: ParamStore, cfg: ModelConfig, seed: int) -> None:
    if cfg.scenario == "flat":
        init_matrix(store, "attention.W_flat", cfg.d, cfg.d, seed)
        return
    init_matrix(store, "attention.W_alpha", cfg.d, cfg.d, seed)
    if cfg.scenario == "hier-kv":
        init_matrix(store, "attention.W_beta", cfg.d, cfg.d, seed)
    else:
        init_matrix(store, "attention.W_key", cfg.d, cfg.key_dim, seed)


# projection kind -> (weight name, EncodedBatch field holding the targets)
_PROJECTIONS = {
    "alpha": ("attention.W_alpha", "entity_states"),
    "beta_kv": ("attention.W_beta", "record_states"),
    "beta_k": ("attention.W_key", "key_embeddings"),
    "flat": ("attention.W_flat", "flat_states"),
}


def projected_targets(store: ParamStore, enc: EncodedBatch, kind: str) -> Tensor:
    """Attention targets multiplied by the bilinear weight, cached on enc.

    x W' has the query dimension last, so a step's scores are one batched
    matvec. Gradients flow back through the cached node into both the weight
    and the encoder states each time it is consumed.
    """
    if enc.proj_cache is None:
        enc.proj_cache = {}
    if kind not in enc.proj_cache:
        weight_name, field = _PROJECTIONS[kind]
        x = getattr(enc, field)
        if x is None:
            raise ValueError(f"encoded batch has no targets for {kind!r} attention")
        W = store.tensor(weight_name)
        shape = x.data.shape
        proj = matmul(reshape(x, (-1, shape[-1])), transpose_axes(W, (1, 0)))
        enc.proj_cache[kind] = reshape(proj, shape[:-1] + (W.data.shape[0],))
    return enc.proj_cache[kind]


@dataclass
class AttentionOutput:
    """Context plus the distributions, in prob and log form.

    Hierarchical: alpha (B, I), beta (B, I, J), copy log-prob factorized.
    Flat: alpha is the record distribution (B, R), beta is None.
    """

    context: Tensor  # (B, d)
    alpha: Tensor
    log_alpha: Tensor
    beta: Optional[Tensor] = None
    log_beta: Optional[Tensor] = None


def entity_scores(store: ParamStore, d_t: Tensor, enc: EncodedBatch):
    """Bilinear entity scores, masked; returns (alpha, log_alpha)."""
    proj = projected_targets(store, enc, "alpha")  # (B, I, d)
    B, I, d = proj.data.shape
    scores = reshape(matmul(proj, reshape(d_t, (B, d, 1))), (B, I))
    masked = add(scores, (1.0 - enc.batch.entity_mask) * NEG_INF)
    log_alpha = log_softmax(masked, axis=-1)
    return exp(log_alpha), log_alpha


def _record_scores(store, d_t, enc, kind):
    proj = projected_targets(store, enc, kind)  # (B, I, J, d)
    B, I, J, d = proj.data.shape
    scores = matmul(reshape(proj, (B, I * J, d)), reshape(d_t, (B, d, 1)))
    masked = add(reshape(scores, (B, I, J)), (1.0 - enc.batch.record_mask) * NEG_INF)
    log_beta = log_softmax(masked, axis=-1)
    return exp(log_beta), log_beta


def record_scores_kv(store: ParamStore, d_t: Tensor, enc: EncodedBatch):
    """Per-entity record distributions scored against low-level states."""
    return _record_scores(store, d_t, enc, "beta_kv")


def record_scores_k(store: ParamStore, d_t: Tensor, enc: EncodedBatch):
    """Key-guided variant: scores depend only on raw key embeddings."""
    return _record_scores(store, d_t, enc, "beta_k")


def hierarchical_context(alpha: Tensor, beta: Tensor, source: Tensor) -> Tensor:
    """c_t = sum_i alpha_i sum_j beta_ij source_ij over (B, I, J, d) sources."""
    B, I, J, d = source.data.shape
    if alpha.data.shape != (B, I) or beta.data.shape != (B, I, J):
        raise ValueError(
            f"attention shape mismatch: alpha {alpha.data.shape}, "
            f"beta {beta.data.shape}, source {source.data.shape}"
        )
    weights = mul(reshape(alpha, (B, I, 1)), beta)  # (B, I, J)
    flat = matmul(reshape(weights, (B, 1, I * J)), reshape(source, (B, I * J, d)))
    return reshape(flat, (B, d))


def flat_attention(store: ParamStore, d_t: Tensor, enc: EncodedBatch) -> AttentionOutput:
    proj = projected_targets(store, enc, "flat")  # (B, R, d)
    B, R, d = proj.data.shape
    scores = reshape(matmul(proj, reshape(d_t, (B, d, 1))), (B, R))
    masked = add(scores, (1.0 - enc.batch.flat_mask) * NEG_INF)
    log_alpha = log_softmax(masked, axis=-1)
    alpha = exp(log_alpha)
    context = reshape(matmul(reshape(alpha, (B, 1, R)), enc.flat_states), (B, d))
    return AttentionOutput(context=context, alpha=alpha, log_alpha=log_alpha)


def context_source(cfg: ModelConfig, enc: EncodedBatch) -> Tensor:
    """What the hierarchical context mixes: raw record embeddings by default."""
    return enc.record_states if cfg.context_over_states else enc.record_embeddings


def attend(store: ParamStore, cfg: ModelConfig, d_t: Tensor, enc: EncodedBatch) -> AttentionOutput:
    """Scenario dispatch: full attention stack for one decoder step."""
    if cfg.scenario == "flat":
        return flat_attention(store, d_t, enc)
    alpha, log_alpha = entity_scores(store, d_t, enc)
    if cfg.scenario == "hier-kv":
        beta, log_beta = record_scores_kv(store, d_t, enc)
    else:
        beta, log_beta = record_scores_k(store, d_t, enc)
    context = hierarchical_context(alpha, beta, context_source(cfg, enc))
    return AttentionOutput(
        context=context, alpha=alpha, log_alpha=log_alpha, beta=beta, log_beta=log_beta
    )


@dataclass
class TraceStep:
    """One decoding step of an attention trace, plain data for serialization."""

    t: int
    token: str
    alpha: List[float]
    beta: List[List[float]]

    def to_json(self) -> dict:
        return {"t": self.t, "token": self.token, "alpha": self.alpha, "beta": self.beta}


def trace_step(t: int, token: str, out: AttentionOutput, enc: EncodedBatch, row: int = 0) -> TraceStep:
    """Strip padding and freeze one step's distributions (single example row)."""
    if out.beta is None:
        n = int(enc.batch.flat_mask[row].sum())
        return TraceStep(t=t, token=token, alpha=list(out.alpha.data[row, :n]), beta=[])
    n_ent = int(enc.batch.entity_mask[row].sum())
    alpha = list(out.alpha.data[row, :n_ent])
    beta = []
    for i in range(n_ent):
        ji = int(enc.batch.record_mask[row, i].sum())
        beta.append(list(out.beta.data[row, i, :ji]))
    return TraceStep(t=t, token=token, alpha=alpha, beta=beta)

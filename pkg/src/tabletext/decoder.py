"""Attention decoder with a copy switch.

Two stacked LSTM layers with input feeding (previous context concatenated to
the word embedding). The top hidden state scores attention; generation and
switch projections read [d_t; c_t]. Training supervises a hard switch from
the copy alignment: copied tokens pay -log(p_copy * pointer), generated
tokens pay -log((1 - p_copy) * gen[y]). Inference scores the soft mixture
over the word vocabulary extended with out-of-vocabulary record values, so
beam hypotheses live in one probability space.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from .attention import (
    AttentionOutput,
    TraceStep,
    attend,
    build_attention_params,
    context_source,
    projected_targets,
    trace_step,
)
from .datamodel import BOS_ID, EOS_ID, UNK_ID, Example, Vocabulary
from .encoder import (
    NEG_INF,
    EncodedBatch,
    ModelConfig,
    PackedBatch,
    build_encoder_params,
    encode_batch,
    pack_batch,
)
from .tensorcore import (
    ParamStore,
    Tensor,
    add,
    concat,
    decoder_loop,
    embedding_lookup,
    init_bias,
    init_embedding,
    init_matrix,
    log_softmax,
    matmul,
    mul,
    neg,
    no_grad,
    pick,
    reduce_sum,
    reshape,
    sigmoid,
    slice_axis,
    softmax,
    softplus,
    tanh,
)

INIT_HEADS = ("h1", "c1", "h2", "c2")


def build_decoder_params(store: ParamStore, cfg: ModelConfig, num_words: int, seed: int) -> None:
    d = cfg.d
    init_embedding(store, "decoder.embed.word", num_words, d, seed)
    for head in INIT_HEADS:
        init_matrix(store, f"decoder.init.{head}.W", d, d, seed)
        init_bias(store, f"decoder.init.{head}.b", d)
    init_matrix(store, "decoder.lstm1.W", 3 * d, 4 * d, seed)
    init_bias(store, "decoder.lstm1.b", 4 * d)
    init_matrix(store, "decoder.lstm2.W", 2 * d, 4 * d, seed)
    init_bias(store, "decoder.lstm2.b", 4 * d)
    init_matrix(store, "decoder.out.W", 2 * d, num_words, seed)
    init_bias(store, "decoder.out.b", num_words)
    init_matrix(store, "decoder.switch.W", 2 * d, 1, seed)
    init_bias(store, "decoder.switch.b", 1)


def build_model_params(cfg: ModelConfig, vocab: Vocabulary, seed: int) -> ParamStore:
    """All parameters for one scenario. Initialization is derived per name,
    so parameters shared between scenarios are identical at the same seed."""
    store = ParamStore()
    build_encoder_params(store, cfg, vocab.num_values, vocab.num_keys, seed)
    build_attention_params(store, cfg, seed)
    build_decoder_params(store, cfg, vocab.num_words, seed)
    return store


@dataclass
class DecoderState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor
    context: Tensor  # c_{t-1}, input feeding
    t: int = 1


def init_state(store: ParamStore, z: Tensor) -> DecoderState:
    parts = {}
    for head in INIT_HEADS:
        W = store.tensor(f"decoder.init.{head}.W")
        b = store.tensor(f"decoder.init.{head}.b")
        parts[head] = tanh(add(matmul(z, W), b))
    context = Tensor(np.zeros_like(z.data))
    return DecoderState(
        h1=parts["h1"], c1=parts["c1"], h2=parts["h2"], c2=parts["c2"], context=context, t=1
    )


def _lstm_step(store, prefix, x, h, c):
    d = h.data.shape[1]
    gates = add(matmul(concat([x, h], axis=1), store.tensor(f"{prefix}.W")), store.tensor(f"{prefix}.b"))
    i = sigmoid(slice_axis(gates, 1, 0, d))
    f = sigmoid(slice_axis(gates, 1, d, 2 * d))
    g = tanh(slice_axis(gates, 1, 2 * d, 3 * d))
    o = sigmoid(slice_axis(gates, 1, 3 * d, 4 * d))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


@dataclass
class StepOutput:
    gen_scores: Tensor  # (B, V) pre-softmax
    switch_logit: Tensor  # (B,)
    attention: AttentionOutput

    def gen_dist(self) -> Tensor:
        return softmax(self.gen_scores, axis=-1)

    def log_gen_dist(self) -> Tensor:
        return log_softmax(self.gen_scores, axis=-1)

    def switch_prob(self) -> Tensor:
        return sigmoid(self.switch_logit)

    def copy_dist(self) -> Tensor:
        """Flattened pointer distribution: (B, I*J) hierarchical, (B, R) flat."""
        att = self.attention
        if att.beta is None:
            return att.alpha
        B, I, J = att.beta.data.shape
        return reshape(mul(reshape(att.alpha, (B, I, 1)), att.beta), (B, I * J))


def decode_step(
    store: ParamStore,
    cfg: ModelConfig,
    enc: EncodedBatch,
    state: DecoderState,
    word_ids: np.ndarray,
) -> Tuple[StepOutput, DecoderState]:
    emb = embedding_lookup(store.tensor("decoder.embed.word"), word_ids)
    x = concat([emb, state.context], axis=1)
    h1, c1 = _lstm_step(store, "decoder.lstm1", x, state.h1, state.c1)
    h2, c2 = _lstm_step(store, "decoder.lstm2", h1, state.h2, state.c2)
    att = attend(store, cfg, h2, enc)
    merged = concat([h2, att.context], axis=1)
    gen_scores = add(matmul(merged, store.tensor("decoder.out.W")), store.tensor("decoder.out.b"))
    switch_logit = reshape(
        add(matmul(merged, store.tensor("decoder.switch.W")), store.tensor("decoder.switch.b")),
        (h2.data.shape[0],),
    )
    out = StepOutput(gen_scores=gen_scores, switch_logit=switch_logit, attention=att)
    next_state = DecoderState(h1=h1, c1=c1, h2=h2, c2=c2, context=att.context, t=state.t + 1)
    return out, next_state


def _step_nll(out: StepOutput, batch: PackedBatch, t: int, hierarchical: bool) -> Tensor:
    """Per-example NLL contributions for step t, masked by token validity."""
    log_gen_y = pick(out.log_gen_dist(), batch.tgt_word_ids[:, t])
    u = out.switch_logit
    log_copy = neg(softplus(neg(u)))  # log sigmoid(u)
    log_gen = neg(softplus(u))  # log (1 - sigmoid(u))
    att = out.attention
    if hierarchical:
        B, I, J = att.beta.data.shape
        log_ptr = add(
            pick(att.log_alpha, batch.copy_ent[:, t]),
            pick(reshape(att.log_beta, (B, I * J)), batch.copy_rec_flat[:, t]),
        )
    else:
        log_ptr = pick(att.log_alpha, batch.copy_lin[:, t])
    copy_nll = neg(add(log_copy, log_ptr))
    gen_nll = neg(add(log_gen, log_gen_y))
    flag = batch.copy_flag[:, t]
    tok = add(mul(copy_nll, flag), mul(gen_nll, 1.0 - flag))
    return mul(tok, batch.token_mask[:, t])


def _nll_fused(store: ParamStore, cfg: ModelConfig, enc: EncodedBatch) -> Tensor:
    """Same loss as the step-by-step path, as one fused recurrence node."""
    batch = enc.batch
    hier = cfg.is_hierarchical
    if hier:
        alpha_proj = projected_targets(store, enc, "alpha")
        beta_proj = projected_targets(
            store, enc, "beta_kv" if cfg.scenario == "hier-kv" else "beta_k"
        )
        ctx_src = context_source(cfg, enc)
        ent_add = (1.0 - batch.entity_mask) * NEG_INF
        rec_add = (1.0 - batch.record_mask) * NEG_INF
        ptr_ent, ptr_rec = batch.copy_ent, batch.copy_rec_flat
    else:
        alpha_proj = projected_targets(store, enc, "flat")
        beta_proj, ctx_src = None, enc.flat_states
        ent_add = (1.0 - batch.flat_mask) * NEG_INF
        rec_add = None
        ptr_ent, ptr_rec = batch.copy_lin, None

    t = store.tensor
    state0 = init_state(store, enc.z)
    per_example = decoder_loop(
        t("decoder.embed.word"),
        concat([state0.h1, state0.c1, state0.h2, state0.c2], axis=1),
        alpha_proj,
        beta_proj,
        ctx_src,
        t("decoder.lstm1.W"), t("decoder.lstm1.b"),
        t("decoder.lstm2.W"), t("decoder.lstm2.b"),
        t("decoder.out.W"), t("decoder.out.b"),
        t("decoder.switch.W"), t("decoder.switch.b"),
        ent_add, rec_add,
        batch.inp_ids, batch.tgt_word_ids, batch.copy_flag,
        ptr_ent, ptr_rec, batch.token_mask,
    )
    return mul(reduce_sum(per_example), 1.0 / batch.num_tokens())


def nll_loss(
    store: ParamStore,
    cfg: ModelConfig,
    batch: PackedBatch,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    fused: bool = True,
) -> Tensor:
    """Mean per-token negative log-likelihood of a packed batch.

    The fused form and the plain decode_step loop compute the same graph;
    fused trades tape granularity for speed and is the default everywhere.
    """
    enc = encode_batch(store, cfg, batch, training=training, rng=rng)
    if fused:
        return _nll_fused(store, cfg, enc)
    state = init_state(store, enc.z)
    total = None
    for t in range(batch.n_steps):
        out, state = decode_step(store, cfg, enc, state, batch.inp_ids[:, t])
        tok = _step_nll(out, batch, t, cfg.is_hierarchical)
        total = tok if total is None else add(total, tok)
    return mul(reduce_sum(total), 1.0 / batch.num_tokens())


# ---------------------------------------------------------------------------
# inference


@dataclass
class GenerationResult:
    tokens: List[str]
    logprob: float
    trace: List[TraceStep]


def _extended_vocab(example: Example, vocab: Vocabulary, n_records_pad: int, hierarchical: bool):
    """Mixture columns for every record, plus the extended token table.

    Returns (ext_tokens, rec_mix_col, rec_copy_col) where ext_tokens extends
    the word list, rec_mix_col[r] is the mixture column of linear record r,
    and rec_copy_col[r] is its column in the pointer distribution (the padded
    entity-record grid for hierarchical scenarios, linear order for flat).
    """
    ext_tokens: List[str] = []
    ext_ids = {}
    rec_mix_col = []
    rec_copy_col = []
    lin = 0
    for i, entity in enumerate(example.entities):
        for j, rec in enumerate(entity.records):
            if vocab.has_word(rec.value):
                col = vocab.word_id(rec.value)
            else:
                if rec.value not in ext_ids:
                    ext_ids[rec.value] = vocab.num_words + len(ext_tokens)
                    ext_tokens.append(rec.value)
                col = ext_ids[rec.value]
            rec_mix_col.append(col)
            rec_copy_col.append(i * n_records_pad + j if hierarchical else lin)
            lin += 1
    return ext_tokens, np.asarray(rec_mix_col), np.asarray(rec_copy_col)


def _tile_encoded(enc: EncodedBatch, k: int) -> EncodedBatch:
    def rep(x: Optional[Tensor]) -> Optional[Tensor]:
        return None if x is None else Tensor(np.repeat(x.data, k, axis=0))

    batch = replace(
        enc.batch,
        size=k,
        entity_mask=np.repeat(enc.batch.entity_mask, k, axis=0),
        record_mask=np.repeat(enc.batch.record_mask, k, axis=0),
        flat_mask=np.repeat(enc.batch.flat_mask, k, axis=0),
    )
    return EncodedBatch(
        z=rep(enc.z),
        batch=batch,
        entity_states=rep(enc.entity_states),
        record_states=rep(enc.record_states),
        record_embeddings=rep(enc.record_embeddings),
        key_embeddings=rep(enc.key_embeddings),
        flat_states=rep(enc.flat_states),
    )


def _np_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class _Hyp:
    seq: Tuple[int, ...]
    score: float
    finalized_at: float  # step index, inf while open
    trace: Tuple[TraceStep, ...]

    def order_key(self):
        return (-self.score, self.finalized_at, self.seq)


def beam_search(
    store: ParamStore,
    cfg: ModelConfig,
    vocab: Vocabulary,
    example: Example,
    beam_size: int = 5,
    max_len: int = 600,
) -> GenerationResult:
    """Length-capped beam search over the generate/copy mixture.

    Hypotheses that emit EOS are moved to a finalized pool without consuming
    a beam slot. Returns the best finalized hypothesis, falling back to the
    best open one at the length cap; ties prefer earlier finalization, then
    the lexicographically smallest token-id sequence.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with no_grad():
        batch = pack_batch([example], vocab)
        enc = encode_batch(store, cfg, batch, training=False)
        ext_tokens, rec_mix_col, rec_copy_col = _extended_vocab(
            example, vocab, batch.n_records, cfg.is_hierarchical
        )
        V = vocab.num_words
        V_ext = V + len(ext_tokens)

        state0 = init_state(store, enc.z)
        beams: List[_Hyp] = [_Hyp(seq=(), score=0.0, finalized_at=np.inf, trace=())]
        states = {
            "h1": state0.h1.data,
            "c1": state0.c1.data,
            "h2": state0.h2.data,
            "c2": state0.c2.data,
            "ctx": state0.context.data,
        }
        finalized: List[_Hyp] = []

        for step in range(1, max_len + 1):
            K = len(beams)
            enc_k = _tile_encoded(enc, K)
            if step == 1:
                word_ids = np.full(K, BOS_ID, dtype=np.int64)
            else:
                word_ids = np.array(
                    [h.seq[-1] if h.seq[-1] < V else UNK_ID for h in beams], dtype=np.int64
                )
            state = DecoderState(
                h1=Tensor(states["h1"]),
                c1=Tensor(states["c1"]),
                h2=Tensor(states["h2"]),
                c2=Tensor(states["c2"]),
                context=Tensor(states["ctx"]),
                t=step,
            )
            out, nxt = decode_step(store, cfg, enc_k, state, word_ids)

            gen = _np_softmax(out.gen_scores.data)  # (K, V)
            u = out.switch_logit.data
            sw = np.empty_like(u)
            pos = u >= 0
            sw[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
            sw[~pos] = np.exp(u[~pos]) / (1.0 + np.exp(u[~pos]))
            copy = out.copy_dist().data  # (K, I*J) or (K, R)
            mix = np.zeros((K, V_ext))
            mix[:, :V] = (1.0 - sw)[:, None] * gen
            for col, src in zip(rec_mix_col, rec_copy_col):
                mix[:, col] += sw * copy[:, src]
            with np.errstate(divide="ignore"):
                log_mix = np.log(mix)
            cand = np.array([h.score for h in beams])[:, None] + log_mix  # (K, V_ext)

            flat = cand.ravel()
            keep = min(len(flat), beam_size * 2 + 8)
            top_idx = np.argpartition(-flat, keep - 1)[:keep]
            threshold = flat[top_idx].min()
            # every EOS candidate is considered, so no finalizable hypothesis
            # is lost to the top-k preselection
            eos_idx = np.arange(K) * V_ext + EOS_ID
            selected = np.union1d(np.flatnonzero(flat >= threshold), eos_idx)

            scored = []
            for idx in selected:
                k, w = divmod(int(idx), V_ext)
                scored.append((-flat[idx], beams[k].seq + (w,), k, w, float(flat[idx])))
            scored.sort(key=lambda item: (item[0], item[1]))

            next_beams: List[_Hyp] = []
            next_rows: List[int] = []
            for _, seq, k, w, score in scored:
                token = vocab.words[w] if w < V else ext_tokens[w - V]
                tr = beams[k].trace + (trace_step(step, token, out.attention, enc_k, row=k),)
                if w == EOS_ID:
                    finalized.append(
                        _Hyp(seq=seq, score=score, finalized_at=float(step), trace=tr)
                    )
                elif len(next_beams) < beam_size:
                    next_beams.append(_Hyp(seq=seq, score=score, finalized_at=np.inf, trace=tr))
                    next_rows.append(k)

            if not next_beams:
                break
            if finalized:
                # log increments are <= 0 and later finalization loses ties,
                # so no open hypothesis at or below the best finalized score
                # can ever produce a better result
                best_final = max(h.score for h in finalized)
                if all(h.score <= best_final for h in next_beams):
                    break
            rows = np.asarray(next_rows)
            states = {
                "h1": nxt.h1.data[rows],
                "c1": nxt.c1.data[rows],
                "h2": nxt.h2.data[rows],
                "c2": nxt.c2.data[rows],
                "ctx": nxt.context.data[rows],
            }
            beams = next_beams

        pool = finalized if finalized else beams
        best = min(pool, key=_Hyp.order_key)

    tokens = [vocab.words[w] if w < V else ext_tokens[w - V] for w in best.seq if w != EOS_ID]
    return GenerationResult(tokens=tokens, logprob=best.score, trace=list(best.trace))


def greedy_decode(store, cfg, vocab, example, max_len: int = 600) -> GenerationResult:
    return beam_search(store, cfg, vocab, example, beam_size=1, max_len=max_len)

"""Batch packing, the set encoders, and their invariances: permutation
equivariance, exact masking, summary means, gradients."""

import numpy as np
import numpy.testing as npt
import pytest

from model_fixtures import (
    example_from,
    permute_entities,
    permute_records,
    ragged_examples,
    random_perm,
    small_cfg,
    small_model,
    two_entity_example,
    vocab_of,
)
from tabletext import tensorcore as tc
from tabletext.datamodel import BOS_ID, EOS_ID
from tabletext.encoder import ModelConfig, encode_batch, encode_example, pack_batch


def weighted_scalar(t, seed=0):
    w = np.random.default_rng(seed).normal(size=t.data.shape)
    return tc.reduce_sum(tc.mul(t, w))


# ---------------------------------------------------------------- packing


def test_pack_batch_dimensions():
    batch = pack_batch(ragged_examples(), vocab_of(ragged_examples()))
    assert batch.size == 3
    assert batch.n_entities == 3
    assert batch.n_records == 4
    assert batch.n_flat == 9
    assert batch.low_len == 5
    assert batch.n_steps == 11  # longest description + EOS


def test_pack_batch_masks_and_slots():
    ex = two_entity_example()
    batch = pack_batch([ex], vocab_of([ex]))
    npt.assert_array_equal(batch.entity_mask, [[1.0, 1.0]])
    npt.assert_array_equal(batch.record_mask[0], [[1, 1, 1], [1, 1, 0]])
    npt.assert_array_equal(batch.flat_mask, [[1.0] * 5])
    # aggregation slot sits right after each entity's records
    npt.assert_array_equal(batch.low_mask, [[1, 1, 1, 1], [1, 1, 1, 0]])
    npt.assert_array_equal(batch.ent_scatter_slot, [3, 4 + 2])
    npt.assert_array_equal(batch.ent_gather_slot, [3, 6])
    assert batch.rec_low_slot.tolist() == [0, 1, 2, 4, 5]
    assert batch.rec_flat_slot.tolist() == [0, 1, 2, 3, 4]


def test_pack_batch_decoder_side():
    ex = two_entity_example()
    vocab = vocab_of([ex])
    batch = pack_batch([ex], vocab)
    T = len(ex.description.tokens) + 1
    assert batch.n_steps == T
    assert batch.inp_ids[0, 0] == BOS_ID
    assert batch.tgt_word_ids[0, T - 1] == EOS_ID
    npt.assert_array_equal(batch.token_mask[0], np.ones(T))
    ids = [vocab.word_id(t) for t in ex.description.tokens]
    npt.assert_array_equal(batch.inp_ids[0, 1:], ids)
    npt.assert_array_equal(batch.tgt_word_ids[0, :-1], ids)
    # "Hawks" copies from entity 0 record 0; "22" from entity 1 record 1
    assert batch.copy_flag[0, 0] == 1.0 and batch.copy_ent[0, 0] == 0
    assert batch.copy_flag[0, 8] == 1.0 and batch.copy_ent[0, 8] == 1
    assert batch.copy_rec_flat[0, 8] == 1 * batch.n_records + 1
    assert batch.copy_lin[0, 8] == 4
    assert batch.copy_flag[0, 1] == 0.0  # "won" is generated


def test_pack_batch_empty_raises():
    with pytest.raises(ValueError, match="empty"):
        pack_batch([], vocab_of(ragged_examples()))


# ---------------------------------------------------------------- embeddings


def test_record_embeddings_nonnegative_and_zero_under_zero_weights():
    cfg, store, vocab, batch = small_model("hier-kv")
    enc = encode_batch(store, cfg, batch)
    assert (enc.record_embeddings.data >= 0.0).all()
    store["embed.record.W"].tensor.data[:] = 0.0
    store["embed.record.b"].tensor.data[:] = 0.0
    enc0 = encode_batch(store, cfg, batch)
    npt.assert_array_equal(enc0.record_embeddings.data, np.zeros_like(enc0.record_embeddings.data))


def test_record_embeddings_zero_at_padding():
    cfg, store, vocab, batch = small_model("hier-kv")
    enc = encode_batch(store, cfg, batch)
    pad = batch.record_mask == 0.0
    npt.assert_array_equal(enc.record_embeddings.data[pad], 0.0)
    cfg_k, store_k, _, batch_k = small_model("hier-k")
    enc_k = encode_batch(store_k, cfg_k, batch_k)
    npt.assert_array_equal(enc_k.key_embeddings.data[batch_k.record_mask == 0.0], 0.0)


# ---------------------------------------------------------------- summary z


def test_z_is_mean_of_real_entity_states():
    cfg, store, vocab, batch = small_model("hier-kv")
    enc = encode_batch(store, cfg, batch)
    e = enc.entity_states.data
    for b in range(batch.size):
        n = int(batch.entity_mask[b].sum())
        npt.assert_allclose(enc.z.data[b], e[b, :n].sum(axis=0) / n, rtol=0, atol=1e-12)


def test_single_entity_z_equals_its_state():
    ex = example_from([("team", [("NAME", "Bulls"), ("PTS", "88")])], ["Bulls", "at", "88"])
    cfg, store, vocab, batch = small_model("hier-kv", examples=[ex])
    enc = encode_batch(store, cfg, batch)
    npt.assert_allclose(enc.z.data[0], enc.entity_states.data[0, 0], rtol=0, atol=1e-15)


def test_flat_z_is_mean_of_record_states():
    cfg, store, vocab, batch = small_model("flat")
    enc = encode_batch(store, cfg, batch)
    s = enc.flat_states.data
    for b in range(batch.size):
        n = int(batch.flat_mask[b].sum())
        npt.assert_allclose(enc.z.data[b], s[b, :n].sum(axis=0) / n, rtol=0, atol=1e-12)


# ------------------------------------------------------- permutation symmetry


@pytest.mark.parametrize("scenario", ["hier-kv", "hier-k"])
def test_entity_permutation_equivariance(scenario):
    ex = two_entity_example()
    vocab = vocab_of([ex])
    cfg = small_cfg(scenario)
    from tabletext.decoder import build_model_params

    store = build_model_params(cfg, vocab, seed=7)
    perm = [1, 0]
    enc_a = encode_batch(store, cfg, pack_batch([ex], vocab))
    enc_b = encode_batch(store, cfg, pack_batch([permute_entities(ex, perm)], vocab))
    npt.assert_allclose(enc_b.z.data, enc_a.z.data, rtol=0, atol=1e-12)
    for i, p in enumerate(perm):
        npt.assert_allclose(
            enc_b.entity_states.data[0, i], enc_a.entity_states.data[0, p], rtol=0, atol=1e-12
        )
        ji = len(ex.entities[p].records)
        npt.assert_allclose(
            enc_b.record_states.data[0, i, :ji],
            enc_a.record_states.data[0, p, :ji],
            rtol=0,
            atol=1e-12,
        )
        npt.assert_array_equal(
            enc_b.record_embeddings.data[0, i, :ji], enc_a.record_embeddings.data[0, p, :ji]
        )


def test_record_permutation_leaves_entity_states_unchanged():
    ex = two_entity_example()
    vocab = vocab_of([ex])
    cfg = small_cfg("hier-kv")
    from tabletext.decoder import build_model_params

    store = build_model_params(cfg, vocab, seed=7)
    perm = [2, 0, 1]
    enc_a = encode_batch(store, cfg, pack_batch([ex], vocab))
    enc_b = encode_batch(store, cfg, pack_batch([permute_records(ex, 0, perm)], vocab))
    npt.assert_allclose(enc_b.entity_states.data, enc_a.entity_states.data, rtol=0, atol=1e-12)
    npt.assert_allclose(enc_b.z.data, enc_a.z.data, rtol=0, atol=1e-12)
    for j, p in enumerate(perm):
        npt.assert_allclose(
            enc_b.record_states.data[0, 0, j], enc_a.record_states.data[0, 0, p], rtol=0, atol=1e-12
        )


def test_flat_record_permutation_equivariance():
    ex = two_entity_example()
    vocab = vocab_of([ex])
    cfg = small_cfg("flat")
    from tabletext.decoder import build_model_params

    store = build_model_params(cfg, vocab, seed=7)
    # permuting records inside entity 0 shifts linear rows 0..2
    perm_lin = [1, 2, 0, 3, 4]
    enc_a = encode_batch(store, cfg, pack_batch([ex], vocab))
    enc_b = encode_batch(store, cfg, pack_batch([permute_records(ex, 0, [1, 2, 0])], vocab))
    npt.assert_allclose(enc_b.z.data, enc_a.z.data, rtol=0, atol=1e-12)
    for r, p in enumerate(perm_lin):
        npt.assert_allclose(
            enc_b.flat_states.data[0, r], enc_a.flat_states.data[0, p], rtol=0, atol=1e-12
        )


def test_random_permutation_sweep_keeps_z():
    rng = np.random.default_rng(123)
    ex = ragged_examples()[2]  # 3 entities, ragged records
    vocab = vocab_of(ragged_examples())
    from tabletext.decoder import build_model_params

    for scenario in ("hier-kv", "hier-k", "flat"):
        cfg = small_cfg(scenario)
        store = build_model_params(cfg, vocab, seed=11)
        base = encode_batch(store, cfg, pack_batch([ex], vocab)).z.data
        for _ in range(10):
            shuffled = permute_entities(ex, random_perm(rng, len(ex.entities)))
            i = int(rng.integers(len(shuffled.entities)))
            shuffled = permute_records(
                shuffled, i, random_perm(rng, len(shuffled.entities[i].records))
            )
            z = encode_batch(store, cfg, pack_batch([shuffled], vocab)).z.data
            npt.assert_allclose(z, base, rtol=0, atol=1e-9)


# ---------------------------------------------------------------- masking


@pytest.mark.parametrize("scenario", ["hier-kv", "flat"])
def test_padding_does_not_leak_into_real_slots(scenario):
    examples = ragged_examples()
    vocab = vocab_of(examples)
    cfg = small_cfg(scenario)
    from tabletext.decoder import build_model_params

    store = build_model_params(cfg, vocab, seed=3)
    # gemm kernels differ with row count, so equality is up to float noise
    close = lambda a, b: npt.assert_allclose(a, b, rtol=0, atol=1e-12)
    enc_all = encode_batch(store, cfg, pack_batch(examples, vocab))
    for b, ex in enumerate(examples):
        enc_one = encode_batch(store, cfg, pack_batch([ex], vocab))
        close(enc_all.z.data[b], enc_one.z.data[0])
        if scenario == "flat":
            n = ex.num_records()
            close(enc_all.flat_states.data[b, :n], enc_one.flat_states.data[0, :n])
        else:
            n = len(ex.entities)
            close(enc_all.entity_states.data[b, :n], enc_one.entity_states.data[0, :n])
            for i, e in enumerate(ex.entities):
                close(
                    enc_all.record_states.data[b, i, : len(e.records)],
                    enc_one.record_states.data[0, i, : len(e.records)],
                )


def test_fully_masked_rows_stay_finite():
    cfg, store, vocab, batch = small_model("hier-kv")
    enc = encode_batch(store, cfg, batch)
    assert np.isfinite(enc.entity_states.data).all()
    assert np.isfinite(enc.record_states.data).all()
    assert np.isfinite(enc.z.data).all()


# ---------------------------------------------------------------- determinism


def test_eval_encoding_is_deterministic():
    cfg, store, vocab, batch = small_model("hier-k")
    a = encode_batch(store, cfg, batch)
    b = encode_batch(store, cfg, batch)
    npt.assert_array_equal(a.z.data, b.z.data)
    npt.assert_array_equal(a.record_states.data, b.record_states.data)


def test_dropout_only_acts_in_training():
    cfg, store, vocab, batch = small_model("hier-kv", dropout=0.3)
    eval_a = encode_batch(store, cfg, batch)
    eval_b = encode_batch(store, cfg, batch, training=False, rng=np.random.default_rng(0))
    npt.assert_array_equal(eval_a.z.data, eval_b.z.data)
    train = encode_batch(store, cfg, batch, training=True, rng=np.random.default_rng(0))
    assert np.abs(train.z.data - eval_a.z.data).max() > 1e-8


def test_encode_example_matches_single_batch():
    ex = two_entity_example()
    cfg, store, vocab, _ = small_model("hier-kv", examples=[ex])
    a = encode_example(store, cfg, ex, vocab)
    b = encode_batch(store, cfg, pack_batch([ex], vocab))
    npt.assert_array_equal(a.z.data, b.z.data)


# ---------------------------------------------------------------- config


def test_config_rejects_bad_values():
    with pytest.raises(ValueError, match="unknown scenario"):
        ModelConfig(scenario="tree")
    with pytest.raises(ValueError, match="not divisible"):
        ModelConfig(d=10, heads=3)
    with pytest.raises(ValueError, match="dropout"):
        ModelConfig(dropout=1.0)
    with pytest.raises(ValueError, match="layers"):
        ModelConfig(layers=0)


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("scenario", ["hier-kv", "hier-k", "flat"])
def test_grad_through_encoder(scenario):
    ex = two_entity_example()
    vocab = vocab_of([ex])
    cfg = small_cfg(scenario)
    from tabletext.decoder import build_decoder_params, build_model_params

    store = tc.ParamStore()
    from tabletext.encoder import build_encoder_params

    build_encoder_params(store, cfg, vocab.num_values, vocab.num_keys, seed=5)
    batch = pack_batch([ex], vocab)

    def f():
        enc = encode_batch(store, cfg, batch)
        out = weighted_scalar(enc.z, seed=1)
        if cfg.is_hierarchical:
            out = tc.add(out, weighted_scalar(enc.record_states, seed=2))
            out = tc.add(out, weighted_scalar(enc.record_embeddings, seed=3))
        else:
            out = tc.add(out, weighted_scalar(enc.flat_states, seed=2))
        return out

    err = tc.grad_check(f, store, epsilon=1e-5)
    assert err < 1e-6, f"finite-difference mismatch: {err}"

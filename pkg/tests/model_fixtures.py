"""Hand-built record structures shared by the model tests.

Values are globally unique within each fixture: copy alignment resolves ties
to the first matching entity, so uniqueness makes alignment move consistently
with entity and record permutations.
"""

import numpy as np

from tabletext.datamodel import (
    Dataset,
    Description,
    Entity,
    Example,
    Record,
    align_copies,
    build_vocab,
)
from tabletext.decoder import build_model_params
from tabletext.encoder import ModelConfig, pack_batch


def example_from(spec, tokens):
    """spec: [(kind, [(key, value), ...]), ...]; alignment by value match."""
    entities = [
        Entity(kind=kind, records=[Record(key=k, value=v) for k, v in recs])
        for kind, recs in spec
    ]
    return align_copies(Example(entities=entities, description=Description(tokens=list(tokens))))


def two_entity_example():
    return example_from(
        [
            ("team", [("NAME", "Hawks"), ("CITY", "Atlanta"), ("PTS", "95")]),
            ("player", [("NAME", "Millsap"), ("PTS", "22")]),
        ],
        ["Hawks", "won", "with", "95", "points", "and", "Millsap", "scored", "22"],
    )


def ragged_examples():
    """Three examples with different entity/record/description sizes."""
    return [
        two_entity_example(),
        example_from(
            [("team", [("NAME", "Bulls"), ("PTS", "88")])],
            ["Bulls", "lost", "at", "88"],
        ),
        example_from(
            [
                ("team", [("NAME", "Heat"), ("CITY", "Miami"), ("PTS", "101"), ("REB", "40")]),
                ("player", [("NAME", "Dragic"), ("PTS", "17"), ("AST", "8")]),
                ("player", [("NAME", "Whiteside"), ("PTS", "14")]),
            ],
            ["Heat", "beat", "them", "with", "101", "as", "Dragic", "added", "8", "assists"],
        ),
    ]


def vocab_of(examples):
    return build_vocab(Dataset(examples=examples, split="train"))


def small_cfg(scenario, **overrides):
    base = dict(scenario=scenario, d=8, key_dim=4, value_dim=8, layers=1, heads=2, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def small_model(scenario, examples=None, seed=7, **overrides):
    """(cfg, store, vocab, batch) for a small model over the fixtures."""
    examples = examples if examples is not None else ragged_examples()
    cfg = small_cfg(scenario, **overrides)
    vocab = vocab_of(examples)
    store = build_model_params(cfg, vocab, seed=seed)
    batch = pack_batch(examples, vocab)
    return cfg, store, vocab, batch


def permute_entities(ex, perm):
    """Entities reordered by perm; alignment recomputed (covariant because
    fixture values are unique)."""
    entities = [ex.entities[p] for p in perm]
    return align_copies(
        Example(entities=entities, description=Description(tokens=list(ex.description.tokens)))
    )


def permute_records(ex, ent_idx, perm):
    entities = [
        Entity(kind=e.kind, records=[e.records[p] for p in perm] if i == ent_idx else list(e.records))
        for i, e in enumerate(ex.entities)
    ]
    return align_copies(
        Example(entities=entities, description=Description(tokens=list(ex.description.tokens)))
    )


def replace_values(ex, mapping):
    """Same keys and shapes, values swapped via mapping; tokens unchanged."""
    entities = [
        Entity(kind=e.kind, records=[Record(key=r.key, value=mapping.get(r.value, r.value)) for r in e.records])
        for e in ex.entities
    ]
    return align_copies(
        Example(entities=entities, description=Description(tokens=list(ex.description.tokens)))
    )


def random_perm(rng, n):
    perm = rng.permutation(n)
    return [int(p) for p in perm]

"""Parsing, alignment, linearization, and vocabulary behavior."""

import json

import pytest

from tabletext import datamodel as dm


def make_example(entities, description):
    return dm.parse_example(1, {"entities": entities, "description": description})


TEAMS = [
    {
        "kind": "team",
        "records": [
            {"key": "NAME", "value": "Hawks"},
            {"key": "PTS", "value": "102"},
            {"key": "WINS", "value": "31"},
        ],
    },
    {
        "kind": "team",
        "records": [
            {"key": "NAME", "value": "Magic"},
            {"key": "PTS", "value": "96"},
        ],
    },
]

PLAYER = {
    "kind": "player",
    "records": [
        {"key": "NAME", "value": "Jeff_Teague"},
        {"key": "PTS", "value": "17"},
        {"key": "AST", "value": "7"},
    ],
}


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path


# ---------------------------------------------------------------- parsing


def test_parse_round_trip(tmp_path):
    row = {
        "entities": TEAMS + [PLAYER],
        "description": "Hawks beat Magic 102 - 96 .",
    }
    path = write_jsonl(tmp_path / "train.jsonl", [row])
    ds = dm.parse_dataset(path, "train")
    assert len(ds.examples) == 1
    back = dm.serialize_example(ds.examples[0])
    assert back == row
    # a second round trip is byte-stable
    path2 = tmp_path / "again.jsonl"
    dm.write_dataset(ds.examples, path2)
    ds2 = dm.parse_dataset(path2, "train")
    assert dm.serialize_example(ds2.examples[0]) == row


def test_parse_malformed_json_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps({"entities": TEAMS, "description": "Hawks won ."})
    path.write_text(good + "\n{broken\n", encoding="utf-8")
    with pytest.raises(ValueError, match="line 2"):
        dm.parse_dataset(path, "train")


def test_parse_unknown_field_rejected():
    with pytest.raises(ValueError, match="unknown field 'speling'"):
        dm.parse_example(
            1, {"entities": TEAMS, "description": "x", "speling": 1}
        )


def test_parse_empty_entities_rejected():
    with pytest.raises(ValueError, match="non-empty"):
        dm.parse_example(1, {"entities": [], "description": "x"})


def test_parse_duplicate_key_rejected():
    bad = [
        {
            "kind": "team",
            "records": [
                {"key": "PTS", "value": "1"},
                {"key": "PTS", "value": "2"},
            ],
        }
    ]
    with pytest.raises(ValueError, match="duplicate record key"):
        make_example(bad, "x")


def test_parse_multi_token_value_rejected():
    bad = [{"kind": "team", "records": [{"key": "NAME", "value": "Two Words"}]}]
    with pytest.raises(ValueError, match="single token"):
        make_example(bad, "x")


def test_parse_bad_kind_and_key():
    with pytest.raises(ValueError, match="kind"):
        make_example([{"kind": "robot", "records": [{"key": "A", "value": "1"}]}], "x")
    with pytest.raises(ValueError, match="uppercase"):
        make_example([{"kind": "team", "records": [{"key": "pts", "value": "1"}]}], "x")


def test_parse_reserved_tokens_rejected():
    with pytest.raises(ValueError, match="reserved"):
        make_example(TEAMS, "Hawks <eos> won")


def test_parse_empty_description_rejected():
    with pytest.raises(ValueError, match="description"):
        dm.parse_example(1, {"entities": TEAMS, "description": "   "})


def test_split_tag_validation(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [])
    with pytest.raises(ValueError, match="split"):
        dm.parse_dataset(path, "dev")


# ---------------------------------------------------------------- alignment


def test_align_copies_marks_value_tokens():
    ex = make_example(TEAMS + [PLAYER], "Hawks beat Magic 102 - 96 .")
    align = ex.description.copy_alignment
    assert align[0] == (0, 0)  # Hawks -> team 0 NAME
    assert align[1] is None
    assert align[2] == (1, 0)
    assert align[3] == (0, 1)  # 102 -> team 0 PTS
    assert align[4] is None
    assert align[5] == (1, 1)
    assert align[6] is None


def test_align_copies_tie_breaks_to_first_entity_then_first_record():
    # the value 17 appears in two entities; the first in file order wins
    dup = [
        {
            "kind": "player",
            "records": [
                {"key": "NAME", "value": "A_Smith"},
                {"key": "REB", "value": "17"},
            ],
        },
        {
            "kind": "player",
            "records": [
                {"key": "NAME", "value": "B_Jones"},
                {"key": "PTS", "value": "17"},
            ],
        },
    ]
    ex = make_example(dup, "B_Jones scored 17 points")
    assert ex.description.copy_alignment[2] == (0, 1)


def test_align_copies_idempotent():
    ex = make_example(TEAMS, "Hawks 102")
    first = list(ex.description.copy_alignment)
    dm.align_copies(ex)
    assert ex.description.copy_alignment == first


# ---------------------------------------------------------------- linearize


def test_linearize_preserves_file_order_without_separators():
    ex = make_example(TEAMS + [PLAYER], "x")
    flat = dm.linearize(ex.entities)
    assert [(r.key, r.value) for r in flat[:3]] == [
        ("NAME", "Hawks"),
        ("PTS", "102"),
        ("WINS", "31"),
    ]
    assert len(flat) == ex.num_records() == 8
    assert all(r.key != dm.ENT_KEY for r in flat)


# ---------------------------------------------------------------- vocabulary


def train_dataset():
    ex = make_example(TEAMS + [PLAYER], "Hawks beat Magic and Jeff_Teague scored and scored")
    return dm.Dataset(examples=[ex], split="train")


def test_build_vocab_reserved_ids():
    vocab = dm.build_vocab(train_dataset())
    assert vocab.words[dm.PAD_ID] == dm.PAD_TOKEN
    assert vocab.words[dm.UNK_ID] == dm.UNK_TOKEN
    assert vocab.words[dm.BOS_ID] == dm.BOS_TOKEN
    assert vocab.words[dm.EOS_ID] == dm.EOS_TOKEN
    assert vocab.keys[dm.ENT_KEY_ID] == dm.ENT_KEY
    assert vocab.values[:2] == [dm.PAD_TOKEN, dm.UNK_TOKEN]


def test_build_vocab_bijections():
    vocab = dm.build_vocab(train_dataset())
    for i, w in enumerate(vocab.words):
        assert vocab.word_id(w) == i or w in (dm.PAD_TOKEN,)
    assert len(set(vocab.words)) == len(vocab.words)
    assert len(set(vocab.values)) == len(vocab.values)
    assert len(set(vocab.keys)) == len(vocab.keys)


def test_build_vocab_min_freq_unks_rare_words():
    vocab = dm.build_vocab(train_dataset(), min_freq=2)
    assert vocab.word_id("scored") > dm.EOS_ID
    assert vocab.word_id("beat") == dm.UNK_ID  # freq 1
    # all keys and train values survive regardless of frequency
    assert vocab.key_id("PTS") > 0
    assert vocab.value_id("Jeff_Teague") > dm.UNK_ID


def test_build_vocab_rejects_non_train_split():
    ds = dm.Dataset(examples=[], split="test")
    with pytest.raises(ValueError, match="train"):
        dm.build_vocab(ds)


def test_vocab_unknown_key_errors():
    vocab = dm.build_vocab(train_dataset())
    with pytest.raises(KeyError, match="BOGUS"):
        vocab.key_id("BOGUS")


def test_vocab_json_round_trip(tmp_path):
    vocab = dm.build_vocab(train_dataset())
    path = tmp_path / "vocab.json"
    vocab.save(path)
    loaded = dm.Vocabulary.load(path)
    assert loaded.words == vocab.words
    assert loaded.values == vocab.values
    assert loaded.keys == vocab.keys


def test_entity_name_helper():
    ex = make_example(TEAMS, "x")
    assert ex.entities[0].name() == "Hawks"
    ex2 = make_example(
        [{"kind": "team", "records": [{"key": "PTS", "value": "1"}]}], "x"
    )
    assert ex2.entities[0].name() is None

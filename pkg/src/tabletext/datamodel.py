"""Data types and ingestion for structured game tables paired with descriptions.

A data structure is an unordered set of entities; an entity is an unordered
set of key/value records. File order of entities and records is preserved only
as the canonical tie-break order (alignment, linearization, copy indexing);
the model itself must not depend on it.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
ENT_KEY = "<ent>"

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
ENT_KEY_ID = 0

RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, ENT_KEY)

SPLITS = ("train", "valid", "test")
ENTITY_KINDS = ("team", "player")

NAME_KEY = "NAME"

_KEY_RE = re.compile(r"^[A-Z][A-Z0-9_]*$")


@dataclass
class Record:
    key: str
    value: str


@dataclass
class Entity:
    kind: str
    records: List[Record]

    def name(self) -> Optional[str]:
        """Value of the NAME record, when present."""
        for r in self.records:
            if r.key == NAME_KEY:
                return r.value
        return None

    def values(self) -> List[str]:
        return [r.value for r in self.records]


DataStructure = List[Entity]


@dataclass
class Description:
    tokens: List[str]
    # one entry per token: (entity index, record index) or None
    copy_alignment: List[Optional[Tuple[int, int]]] = field(default_factory=list)


@dataclass
class Example:
    entities: DataStructure
    description: Description

    def num_records(self) -> int:
        return sum(len(e.records) for e in self.entities)


@dataclass
class Dataset:
    examples: List[Example]
    split: str


def _fail(line_no: int, message: str) -> None:
    raise ValueError(f"line {line_no}: {message}")


def _check_fields(line_no: int, obj: dict, allowed: Tuple[str, ...], where: str) -> None:
    for key in obj:
        if key not in allowed:
            _fail(line_no, f"unknown field {key!r} in {where}")


def _parse_record(line_no: int, obj, idx: Tuple[int, int]) -> Record:
    if not isinstance(obj, dict):
        _fail(line_no, f"record {idx} is not an object")
    _check_fields(line_no, obj, ("key", "value"), f"record {idx}")
    key = obj.get("key")
    value = obj.get("value")
    if not isinstance(key, str) or not _KEY_RE.match(key or ""):
        _fail(line_no, f"record {idx}: key must be an uppercase ASCII identifier, got {key!r}")
    if not isinstance(value, str) or not value:
        _fail(line_no, f"record {idx}: value must be a non-empty string")
    if any(ch.isspace() for ch in value):
        _fail(line_no, f"record {idx}: value {value!r} must be a single token")
    if value in RESERVED_TOKENS:
        _fail(line_no, f"record {idx}: value {value!r} is a reserved token")
    return Record(key=key, value=value)


def _parse_entity(line_no: int, obj, idx: int) -> Entity:
    if not isinstance(obj, dict):
        _fail(line_no, f"entity {idx} is not an object")
    _check_fields(line_no, obj, ("kind", "records"), f"entity {idx}")
    kind = obj.get("kind")
    if kind not in ENTITY_KINDS:
        _fail(line_no, f"entity {idx}: kind must be one of {ENTITY_KINDS}, got {kind!r}")
    records_raw = obj.get("records")
    if not isinstance(records_raw, list) or not records_raw:
        _fail(line_no, f"entity {idx}: records must be a non-empty list")
    records = [_parse_record(line_no, r, (idx, j)) for j, r in enumerate(records_raw)]
    seen = Counter(r.key for r in records)
    dupes = [k for k, n in seen.items() if n > 1]
    if dupes:
        _fail(line_no, f"entity {idx}: duplicate record key(s) {sorted(dupes)}")
    return Entity(kind=kind, records=records)


def parse_example(line_no: int, obj) -> Example:
    if not isinstance(obj, dict):
        _fail(line_no, "example is not an object")
    _check_fields(line_no, obj, ("entities", "description"), "example")
    entities_raw = obj.get("entities")
    if not isinstance(entities_raw, list) or not entities_raw:
        _fail(line_no, "entities must be a non-empty list")
    entities = [_parse_entity(line_no, e, i) for i, e in enumerate(entities_raw)]
    text = obj.get("description")
    if not isinstance(text, str) or not text.strip():
        _fail(line_no, "description must be a non-empty string")
    tokens = text.split()
    for tok in tokens:
        if tok in RESERVED_TOKENS:
            _fail(line_no, f"description token {tok!r} is a reserved token")
    example = Example(entities=entities, description=Description(tokens=tokens))
    align_copies(example)
    return example


def parse_dataset(path, split: str) -> Dataset:
    """Read a JSONL dataset file; errors carry 1-based line numbers."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    examples: List[Example] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"line {line_no}: malformed JSON ({e.msg})") from None
            examples.append(parse_example(line_no, obj))
    return Dataset(examples=examples, split=split)


def serialize_example(example: Example) -> dict:
    return {
        "entities": [
            {
                "kind": e.kind,
                "records": [{"key": r.key, "value": r.value} for r in e.records],
            }
            for e in example.entities
        ],
        "description": " ".join(example.description.tokens),
    }


def write_dataset(examples: List[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(serialize_example(ex)) + "\n")


def align_copies(example: Example) -> Example:
    """Mark description tokens that string-equal some record value.

    Ties resolve to the first entity, then the first record, in file order.
    Recomputes from scratch, so repeated calls are idempotent.
    """
    lookup: Dict[str, Tuple[int, int]] = {}
    for i, entity in enumerate(example.entities):
        for j, record in enumerate(entity.records):
            lookup.setdefault(record.value, (i, j))
    example.description.copy_alignment = [
        lookup.get(tok) for tok in example.description.tokens
    ]
    return example


def linearize(entities: DataStructure) -> List[Record]:
    """All records in canonical order: entities in file order, records in
    file order. No separator pseudo-records are inserted."""
    flat: List[Record] = []
    for entity in entities:
        flat.extend(entity.records)
    return flat


class Vocabulary:
    """Three id namespaces: description words, record values, record keys.

    Words reserve PAD/UNK/BOS/EOS at ids 0..3; values reserve PAD/UNK at
    0..1; keys reserve the entity-aggregate pseudo-key at 0. Each namespace
    is a bijection between its tokens and a dense id range.
    """

    def __init__(self, words: List[str], values: List[str], keys: List[str]):
        if words[:4] != [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN]:
            raise ValueError("word namespace must start with the reserved tokens")
        if values[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("value namespace must start with PAD and UNK")
        if keys[0] != ENT_KEY:
            raise ValueError("key namespace must start with the entity pseudo-key")
        self.words = list(words)
        self.values = list(values)
        self.keys = list(keys)
        self._word_ids = {t: i for i, t in enumerate(words)}
        self._value_ids = {t: i for i, t in enumerate(values)}
        self._key_ids = {t: i for i, t in enumerate(keys)}
        for name, table, ids in (
            ("word", self.words, self._word_ids),
            ("value", self.values, self._value_ids),
            ("key", self.keys, self._key_ids),
        ):
            if len(table) != len(ids):
                raise ValueError(f"{name} namespace is not a bijection (duplicate tokens)")

    def word_id(self, token: str) -> int:
        return self._word_ids.get(token, UNK_ID)

    def value_id(self, token: str) -> int:
        return self._value_ids.get(token, UNK_ID)

    def key_id(self, token: str) -> int:
        if token not in self._key_ids:
            raise KeyError(f"unknown record key {token!r}")
        return self._key_ids[token]

    def has_word(self, token: str) -> bool:
        return token in self._word_ids

    @property
    def num_words(self) -> int:
        return len(self.words)

    @property
    def num_values(self) -> int:
        return len(self.values)

    @property
    def num_keys(self) -> int:
        return len(self.keys)

    def to_json(self) -> dict:
        return {"words": self.words, "values": self.values, "keys": self.keys}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(words=obj["words"], values=obj["values"], keys=obj["keys"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def build_vocab(dataset: Dataset, min_freq: int = 1) -> Vocabulary:
    """Build the three namespaces from a training split.

    Description words below min_freq fall back to UNK; every record key and
    every record value seen in training is included.
    """
    if dataset.split != "train":
        raise ValueError(f"vocabulary must be built from the train split, got {dataset.split!r}")
    word_freq: Counter = Counter()
    value_set = set()
    key_set = set()
    for ex in dataset.examples:
        word_freq.update(ex.description.tokens)
        for entity in ex.entities:
            for record in entity.records:
                value_set.add(record.value)
                key_set.add(record.key)
    kept = [t for t, n in word_freq.items() if n >= min_freq]
    kept.sort(key=lambda t: (-word_freq[t], t))
    words = [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN] + kept
    values = [PAD_TOKEN, UNK_TOKEN] + sorted(value_set)
    keys = [ENT_KEY] + sorted(key_set)
    return Vocabulary(words=words, values=values, keys=keys)

"""Evaluation protocol: corpus BLEU plus extraction-based content metrics.

The content metrics run a rule-based relation extractor over descriptions:
an exact name-token match opens a fixed-size window, and any token inside
that window equal to one of the mentioned entity's record values yields an
(entity, value, key) triple. RG measures factual precision of the extracted
triples, CS compares them against triples extracted from the gold text, and
CO compares their order via a normalized edit distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from .datamodel import Entity, Example, NAME_KEY

DEFAULT_WINDOW = 20
BLEU_EPS = 1e-9


class RelationTuple(NamedTuple):
    entity: str
    value: str
    key: str


# ---------------------------------------------------------------- extraction


def _value_to_key(entity: Entity) -> Dict[str, str]:
    """Map each record value to its key; a value carried by several keys of
    the same entity resolves to the first key in canonical (sorted) order."""
    mapping: Dict[str, str] = {}
    for record in sorted(entity.records, key=lambda r: r.key):
        mapping.setdefault(record.value, record.key)
    return mapping


def extract_relations(
    tokens: Sequence[str],
    entities: Sequence[Entity],
    window: int = DEFAULT_WINDOW,
) -> List[RelationTuple]:
    """Scan a description and return its relation triples.

    A token equal to an entity's name opens a window over the next `window`
    tokens; any token in an open window that equals one of that entity's
    record values emits a triple. The returned list is deduplicated keeping
    first occurrences, so it is both the RG/CS set (as a set) and the CO
    sequence.
    """
    by_name: Dict[str, List[Tuple[str, Dict[str, str]]]] = {}
    for entity in entities:
        name = entity.name()
        if name is None:
            continue
        by_name.setdefault(name, []).append((name, _value_to_key(entity)))

    raw: List[RelationTuple] = []
    # open windows as (expiry position, entity name, value->key map), kept in
    # opening order
    open_windows: List[Tuple[int, str, Dict[str, str]]] = []
    for pos, token in enumerate(tokens):
        open_windows = [w for w in open_windows if w[0] >= pos]
        for _, name, vmap in open_windows:
            key = vmap.get(token)
            if key is not None:
                raw.append(RelationTuple(name, token, key))
        for name, vmap in by_name.get(token, ()):
            open_windows.append((pos + window, name, vmap))

    seen = set()
    ordered: List[RelationTuple] = []
    for triple in raw:
        if triple not in seen:
            seen.add(triple)
            ordered.append(triple)
    return ordered


def structure_facts(entities: Sequence[Entity]) -> set:
    """All (name, value, key) triples actually present in a structure."""
    facts = set()
    for entity in entities:
        name = entity.name()
        if name is None:
            continue
        for record in entity.records:
            facts.add(RelationTuple(name, record.value, record.key))
    return facts


# ---------------------------------------------------------------- BLEU


def _ngram_counts(tokens: Sequence[str], n: int) -> Dict[tuple, int]:
    counts: Dict[tuple, int] = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i : i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU with n-grams 1..4, one reference per candidate.

    Clipped modified precision per order, geometric mean, multiplied by the
    brevity penalty exp(1 - r/c) when c < r. A zero clipped-match count is
    replaced by 1e-9; nonzero counts are left exact.
    """
    if len(candidates) != len(references):
        raise ValueError(
            f"candidate/reference count mismatch: {len(candidates)} vs {len(references)}"
        )
    if not candidates:
        raise ValueError("empty corpus")
    matches = np.zeros(4)
    totals = np.zeros(4)
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            cand_counts = _ngram_counts(cand, n)
            if not cand_counts:
                continue
            ref_counts = _ngram_counts(ref, n)
            totals[n - 1] += sum(cand_counts.values())
            matches[n - 1] += sum(
                min(c, ref_counts.get(g, 0)) for g, c in cand_counts.items()
            )
    log_sum = 0.0
    for n in range(4):
        numer = matches[n] if matches[n] > 0 else BLEU_EPS
        denom = totals[n] if totals[n] > 0 else 1.0
        log_sum += np.log(numer / denom)
    geo = np.exp(log_sum / 4.0)
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len >= ref_len else float(np.exp(1.0 - ref_len / cand_len))
    return float(100.0 * bp * geo)


# ------------------------------------------------- content ordering (CO)


def damerau_levenshtein(a: Sequence, b: Sequence) -> int:
    """Restricted edit distance: insert, delete, substitute, and adjacent
    transposition, all unit cost."""
    n, m = len(a), len(b)
    if n == 0:
        return m
    if m == 0:
        return n
    prev2 = None
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
            if (
                i > 1
                and j > 1
                and a[i - 1] == b[j - 2]
                and a[i - 2] == b[j - 1]
            ):
                cur[j] = min(cur[j], prev2[j - 2] + 1)
        prev2, prev = prev, cur
    return prev[m]


def co_similarity(a: Sequence, b: Sequence) -> float:
    """100 * (1 - DL(a, b) / max(|a|, |b|)); 100 when both empty, 0 when
    exactly one is empty."""
    if not a and not b:
        return 100.0
    if not a or not b:
        return 0.0
    return 100.0 * (1.0 - damerau_levenshtein(a, b) / max(len(a), len(b)))


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    bleu: float
    rg_p: float
    rg_num: float
    cs_p: float
    cs_r: float
    cs_f1: float
    co: float
    num_examples: int
    zero_extraction_count: int
    empty_gold_count: int
    per_example: List[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "bleu": self.bleu,
            "rg_p": self.rg_p,
            "rg_num": self.rg_num,
            "cs_p": self.cs_p,
            "cs_r": self.cs_r,
            "cs_f1": self.cs_f1,
            "co": self.co,
            "num_examples": self.num_examples,
            "zero_extraction_count": self.zero_extraction_count,
            "empty_gold_count": self.empty_gold_count,
        }

    def to_json(self) -> dict:
        out = self.summary()
        out["per_example"] = self.per_example
        return out


def report(
    examples: Sequence[Example],
    generated: Sequence[Sequence[str]],
    window: int = DEFAULT_WINDOW,
) -> MetricsReport:
    """Score generated token sequences against gold examples."""
    if len(generated) != len(examples):
        raise ValueError(
            f"generation/dataset count mismatch: {len(generated)} vs {len(examples)}"
        )
    if not examples:
        raise ValueError("empty corpus")
    rg_ps: List[float] = []
    rg_nums: List[float] = []
    cs_ps: List[float] = []
    cs_rs: List[float] = []
    cos: List[float] = []
    per_example: List[dict] = []
    zero_extraction = 0
    empty_gold = 0
    for idx, (ex, tokens) in enumerate(zip(examples, generated)):
        gen_rel = extract_relations(tokens, ex.entities, window)
        gold_rel = extract_relations(ex.description.tokens, ex.entities, window)
        facts = structure_facts(ex.entities)
        if gen_rel:
            rg_p = 100.0 * sum(1 for t in gen_rel if t in facts) / len(gen_rel)
        else:
            rg_p = 0.0
            zero_extraction += 1
        rg_num = float(len(gen_rel))
        gen_set, gold_set = set(gen_rel), set(gold_rel)
        cs_p = 100.0 * len(gen_set & gold_set) / len(gen_set) if gen_set else 0.0
        if gold_set:
            cs_r = 100.0 * len(gen_set & gold_set) / len(gold_set)
        else:
            cs_r = 0.0
            empty_gold += 1
        co = co_similarity(gen_rel, gold_rel)
        rg_ps.append(rg_p)
        rg_nums.append(rg_num)
        cs_ps.append(cs_p)
        cs_rs.append(cs_r)
        cos.append(co)
        per_example.append(
            {
                "index": idx,
                "rg_p": rg_p,
                "rg_num": rg_num,
                "cs_p": cs_p,
                "cs_r": cs_r,
                "co": co,
                "extracted": len(gen_rel),
                "gold_extracted": len(gold_rel),
            }
        )
    bleu_score = bleu(generated, [ex.description.tokens for ex in examples])
    cs_p_mean = float(np.mean(cs_ps))
    cs_r_mean = float(np.mean(cs_rs))
    if cs_p_mean == 0.0 and cs_r_mean == 0.0:
        cs_f1 = 0.0
    else:
        cs_f1 = 2.0 * cs_p_mean * cs_r_mean / (cs_p_mean + cs_r_mean)
    return MetricsReport(
        bleu=bleu_score,
        rg_p=float(np.mean(rg_ps)),
        rg_num=float(np.mean(rg_nums)),
        cs_p=cs_p_mean,
        cs_r=cs_r_mean,
        cs_f1=cs_f1,
        co=float(np.mean(cos)),
        num_examples=len(examples),
        zero_extraction_count=zero_extraction,
        empty_gold_count=empty_gold,
        per_example=per_example,
    )


TABLE_COLUMNS = ("BLEU", "RG-P%", "RG-#", "CS-P%", "CS-R%", "CS-F1", "CO")


def format_table(rows: Dict[str, MetricsReport]) -> str:
    """Aligned comparison table, one row per labeled report."""
    label_width = max(len("system"), *(len(label) for label in rows)) if rows else 6
    header = "system".ljust(label_width) + "".join(f"{c:>9}" for c in TABLE_COLUMNS)
    lines = [header, "-" * len(header)]
    for label, rep in rows.items():
        cells = (rep.bleu, rep.rg_p, rep.rg_num, rep.cs_p, rep.cs_r, rep.cs_f1, rep.co)
        lines.append(label.ljust(label_width) + "".join(f"{v:>9.2f}" for v in cells))
    return "\n".join(lines)


def write_report(rep: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rep.to_json(), fh, indent=2)

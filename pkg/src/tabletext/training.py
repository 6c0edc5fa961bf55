"""Training loop and checkpoint utilities.

Adam with a step-halving schedule. Each epoch shuffles the corpus, cuts it
into pools, sorts every pool by (record count, description length) to bound
padding on both axes, and shuffles the resulting batch order. A checkpoint
is written before the first update and every checkpoint_every updates; the
trailing average_last_k checkpoints are averaged into the model that gets
evaluated. Everything is driven by named substreams of one seed, so a rerun
reproduces the checkpoints bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .datamodel import Dataset, Vocabulary
from .decoder import build_model_params, nll_loss
from .encoder import ModelConfig, pack_batch
from .tensorcore import (
    ParamStore,
    adam_step,
    config_digest,
    load_checkpoint,
    param_rng,
    save_checkpoint,
)

CURVE_HEADER = "update,lr,loss"
CHECKPOINT_PATTERN = "checkpoint-{:06d}.ckpt"
AVERAGED_NAME = "checkpoint-averaged.ckpt"


@dataclass
class TrainConfig:
    batch_size: int = 64
    total_updates: int = 25_000
    lr: float = 0.001
    lr_halving_period: int = 10_000
    dropout: float = 0.5
    checkpoint_every: int = 1_000
    average_last_k: int = 5
    seed: int = 0
    clip_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        for name in ("batch_size", "lr_halving_period", "checkpoint_every", "average_last_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_updates < 0:
            raise ValueError("total_updates must be >= 0")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.clip_norm < 0.0:
            raise ValueError("clip_norm must be >= 0")
        if self.total_updates > 0 and self.average_last_k > self.total_updates // self.checkpoint_every:
            raise ValueError(
                f"average_last_k={self.average_last_k} exceeds the "
                f"{self.total_updates // self.checkpoint_every} checkpoints the run will write"
            )


def lr_at(cfg: TrainConfig, update: int) -> float:
    """lr(u) = lr0 * 0.5^floor(u / period), with u counted from 0."""
    return cfg.lr * 0.5 ** (update // cfg.lr_halving_period)


# ---------------------------------------------------------------- config files


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_FIELD_TYPES = {}
for _f in fields(ModelConfig) + fields(TrainConfig):
    _FIELD_TYPES[_f.name] = {"int": int, "float": float, "str": str, "bool": _parse_bool}[_f.type]


def parse_config_text(text: str) -> Dict[str, str]:
    """Flat key=value lines; blank lines and # comments are skipped."""
    mapping: Dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in mapping:
            raise ValueError(f"config line {n}: duplicate key {key!r}")
        mapping[key] = value
    return mapping


def parse_config_file(path) -> Dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def build_configs(mapping: Dict[str, str]) -> Tuple[ModelConfig, TrainConfig]:
    """Typed configs from a flat mapping; unknown keys are an error.

    dropout is shared: it configures the encoder blocks and is recorded in
    the training config.
    """
    unknown = sorted(set(mapping) - set(_FIELD_TYPES))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    typed = {}
    for key, value in mapping.items():
        try:
            typed[key] = _FIELD_TYPES[key](value)
        except ValueError as err:
            raise ValueError(f"config key {key!r}: {err}") from None
    model_kwargs = {f.name: typed[f.name] for f in fields(ModelConfig) if f.name in typed}
    train_kwargs = {f.name: typed[f.name] for f in fields(TrainConfig) if f.name in typed}
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def flat_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Dict:
    """One flat mapping with every field of both configs, for headers."""
    merged = asdict(model_cfg)
    merged.update(asdict(train_cfg))
    return merged


# ---------------------------------------------------------------- batching


def batch_indices(
    examples: Sequence, batch_size: int, rng: np.random.Generator, pools: int = 8
) -> Iterator[List[int]]:
    """Endless stream of index batches: shuffle, sort pools by size, shuffle
    the batch order. Every epoch visits every example exactly once."""
    sizes = [(ex.num_records(), len(ex.description.tokens)) for ex in examples]
    n = len(examples)
    pool_size = batch_size * pools
    while True:
        perm = rng.permutation(n)
        batches = []
        for start in range(0, n, pool_size):
            pool = sorted(perm[start : start + pool_size], key=lambda i: sizes[i])
            for b in range(0, len(pool), batch_size):
                batches.append([int(i) for i in pool[b : b + batch_size]])
        for i in rng.permutation(len(batches)):
            yield batches[i]


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoints: List[str]
    final_path: str
    averaged_path: str
    curve_path: str
    vocab_path: str


def _global_norm(store: ParamStore) -> float:
    total = 0.0
    for _, p in store.items():
        total += float((p.tensor.grad * p.tensor.grad).sum())
    return float(np.sqrt(total))


def train(
    dataset: Dataset,
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir,
) -> TrainResult:
    """Run the optimization and write checkpoints plus the loss curve.

    Aborts with FloatingPointError naming the update index if the loss goes
    non-finite.
    """
    if not dataset.examples:
        raise ValueError("training split is empty")
    os.makedirs(out_dir, exist_ok=True)
    vocab_path = os.path.join(out_dir, "vocab.json")
    vocab.save(vocab_path)
    store = build_model_params(model_cfg, vocab, seed=train_cfg.seed)
    header = {
        "scenario": model_cfg.scenario,
        "config": flat_config(model_cfg, train_cfg),
    }
    header["config_digest"] = config_digest(header["config"])

    data_rng = param_rng(train_cfg.seed, "batch-order")
    drop_rng = param_rng(train_cfg.seed, "dropout")
    stream = batch_indices(dataset.examples, train_cfg.batch_size, data_rng)

    def write_checkpoint(count: int) -> str:
        path = os.path.join(out_dir, CHECKPOINT_PATTERN.format(count))
        save_checkpoint(path, store, {**header, "update": count})
        return path

    checkpoints = [write_checkpoint(0)]
    curve_path = os.path.join(out_dir, "loss_curve.csv")
    with open(curve_path, "w", encoding="utf-8") as curve:
        curve.write(CURVE_HEADER + "\n")
        for u in range(train_cfg.total_updates):
            idx = next(stream)
            batch = pack_batch([dataset.examples[i] for i in idx], vocab)
            store.zero_grads()
            loss = nll_loss(store, model_cfg, batch, training=True, rng=drop_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at update {u}")
            loss.backward()
            if train_cfg.clip_norm > 0.0:
                norm = _global_norm(store)
                if norm > train_cfg.clip_norm:
                    scale = train_cfg.clip_norm / norm
                    for _, p in store.items():
                        p.tensor.grad *= scale
            lr = lr_at(train_cfg, u)
            adam_step(store, lr=lr)
            curve.write(f"{u},{lr:.10g},{value:.10g}\n")
            done = u + 1
            if done % train_cfg.checkpoint_every == 0 or done == train_cfg.total_updates:
                checkpoints.append(write_checkpoint(done))

    tail = checkpoints[-train_cfg.average_last_k :]
    averaged_path = os.path.join(out_dir, AVERAGED_NAME)
    average_checkpoints(tail, averaged_path)
    return TrainResult(
        checkpoints=checkpoints,
        final_path=checkpoints[-1],
        averaged_path=averaged_path,
        curve_path=curve_path,
        vocab_path=vocab_path,
    )


# ---------------------------------------------------------------- averaging


def average_checkpoints(paths: Sequence, out_path) -> str:
    """Arithmetic per-parameter mean of k checkpoints.

    Values are accumulated in sorted order anchored at the smallest one, so
    the result is invariant to file order and averaging identical
    checkpoints reproduces them bit for bit. Adam state is dropped.
    """
    if not paths:
        raise ValueError("no checkpoints to average")
    header0, values0, _ = load_checkpoint(paths[0])
    names = sorted(values0)
    stacks = {name: [values0[name]] for name in names}
    for path in paths[1:]:
        _, values, _ = load_checkpoint(path)
        if sorted(values) != names:
            raise ValueError(f"{path}: parameter names do not match {paths[0]}")
        for name in names:
            if values[name].shape != values0[name].shape:
                raise ValueError(
                    f"{path}: shape mismatch for {name!r}: "
                    f"{values[name].shape} vs {values0[name].shape}"
                )
            stacks[name].append(values[name])

    store = ParamStore()
    k = len(paths)
    for name in names:
        stack = np.sort(np.stack(stacks[name]), axis=0)
        mean = stack[0] + (stack[1:] - stack[0]).sum(axis=0) / k
        store.add(name, mean)
    header = {key: header0[key] for key in header0 if key != "update"}
    header["averaged_of"] = k
    save_checkpoint(out_path, store, header)
    return str(out_path)


# ---------------------------------------------------------------- loading


def load_model(path) -> Tuple[Dict, ModelConfig, ParamStore]:
    """(header, model config, parameters) from a checkpoint file."""
    header, values, _ = load_checkpoint(path)
    kwargs = {f.name: header["config"][f.name] for f in fields(ModelConfig)}
    model_cfg = ModelConfig(**kwargs)
    store = ParamStore()
    for name in sorted(values):
        store.add(name, values[name])
    return header, model_cfg, store


def evaluate_loss(
    dataset: Dataset,
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    store: ParamStore,
    batch_size: int = 64,
) -> float:
    """Mean per-token NLL over a split, dropout off, file order."""
    if not dataset.examples:
        raise ValueError("cannot evaluate an empty split")
    total, tokens = 0.0, 0.0
    for start in range(0, len(dataset.examples), batch_size):
        chunk = dataset.examples[start : start + batch_size]
        batch = pack_batch(chunk, vocab)
        loss = nll_loss(store, model_cfg, batch)
        n = batch.num_tokens()
        total += float(loss.data) * n
        tokens += n
    return total / tokens

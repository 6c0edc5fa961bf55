"""Command-line pipeline: corpus generation, training, decoding, scoring.

Each command resolves its full configuration first, writes a manifest.json
with the resolved settings and input digests into the output directory
before any real work starts, and treats its inputs as read-only. Reports
come out three ways at once: an aligned table on stdout, delimited files,
and rendered figures next to them.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields

from .datamodel import Vocabulary, build_vocab, parse_dataset
from .decoder import beam_search
from .encoder import SCENARIOS, ModelConfig
from .evaluation import TABLE_COLUMNS, format_table, report, write_report
from .plots import attention_figures, loss_curve_figure, metrics_figure
from .toygen import ToyGenConfig, generate_corpus
from .training import (
    TrainConfig,
    build_configs,
    evaluate_loss,
    flat_config,
    load_model,
    parse_config_file,
    train,
)

CONFIG_KEYS = tuple(
    dict.fromkeys(f.name for cls in (ModelConfig, TrainConfig) for f in fields(cls))
)


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, command, config, inputs, outputs, seed=None, scenario=None):
    """Reproducibility record, written before the command does any work."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "scenario": scenario,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items()},
        "outputs": {name: str(p) for name, p in outputs.items()},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _split_path(data_dir, split):
    path = os.path.join(data_dir, f"{split}.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {split} split under {data_dir}: {path}")
    return path


def _load_vocab(args):
    path = args.vocab or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "vocab.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"vocabulary file not found: {path} (pass --vocab)")
    return Vocabulary.load(path)


def _read_generations(path):
    generations = []
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            if "tokens" not in row:
                raise ValueError(f"{path}:{n}: generation row without tokens")
            generations.append(list(row["tokens"]))
    return generations


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    cfg = ToyGenConfig(
        num_train=args.num_train,
        num_valid=args.num_valid,
        num_test=args.num_test,
        min_entities=args.min_entities,
        max_entities=args.max_entities,
        seed=args.seed,
    )
    planned = {
        f"{split}.{kind}": os.path.join(args.out, name)
        for split in ("train", "valid", "test")
        for kind, name in (("data", f"{split}.jsonl"), ("relations", f"{split}.relations.jsonl"))
    }
    write_manifest(args.out, "gen-data", asdict(cfg), {}, planned, seed=args.seed)
    paths = generate_corpus(cfg, args.out)
    total = cfg.num_train + cfg.num_valid + cfg.num_test
    print(f"wrote {total} examples across 3 splits under {args.out}")
    for split in ("train", "valid", "test"):
        print(f"  {split}: {paths[split]['data']}")
    return 0


def cmd_train(args):
    mapping = parse_config_file(args.config) if args.config else {}
    for key in CONFIG_KEYS:
        value = getattr(args, key)
        if value is not None:
            mapping[key] = value
    model_cfg, train_cfg = build_configs(mapping)

    train_path = _split_path(args.data, "train")
    valid_path = _split_path(args.data, "valid")
    config = flat_config(model_cfg, train_cfg)
    curve_png = os.path.join(args.out, "loss_curve.png")
    write_manifest(
        args.out,
        "train",
        config,
        {"train": train_path, "valid": valid_path},
        {
            "checkpoints": args.out,
            "loss_curve": os.path.join(args.out, "loss_curve.csv"),
            "loss_curve_plot": curve_png,
            "vocab": os.path.join(args.out, "vocab.json"),
        },
        seed=train_cfg.seed,
        scenario=model_cfg.scenario,
    )

    train_ds = parse_dataset(train_path, "train")
    valid_ds = parse_dataset(valid_path, "valid")
    vocab = build_vocab(train_ds)
    result = train(train_ds, vocab, model_cfg, train_cfg, args.out)
    loss_curve_figure(result.curve_path, curve_png)

    _, avg_cfg, avg_store = load_model(result.averaged_path)
    valid_loss = evaluate_loss(valid_ds, vocab, avg_cfg, avg_store)
    print(f"trained {model_cfg.scenario} for {train_cfg.total_updates} updates")
    print(f"  final checkpoint:    {result.final_path}")
    print(f"  averaged checkpoint: {result.averaged_path}")
    print(f"  loss curve:          {result.curve_path} (+ {curve_png})")
    print(f"  valid loss (averaged model): {valid_loss:.4f}")
    return 0


def cmd_generate(args):
    header, model_cfg, store = load_model(args.checkpoint)
    vocab = _load_vocab(args)
    data_path = _split_path(args.data, args.split)
    out_path = os.path.join(args.out, "generations.jsonl")
    outputs = {"generations": out_path}
    if args.attention_trace:
        outputs["attention_trace"] = args.attention_trace
    write_manifest(
        args.out,
        "generate",
        {"beam": args.beam, "max_len": args.max_len, "split": args.split, **header["config"]},
        {"checkpoint": args.checkpoint, "data": data_path},
        outputs,
        seed=header["config"].get("seed"),
        scenario=model_cfg.scenario,
    )

    dataset = parse_dataset(data_path, args.split)
    trace_fh = open(args.attention_trace, "w", encoding="utf-8") if args.attention_trace else None
    try:
        with open(out_path, "w", encoding="utf-8") as fh:
            for idx, example in enumerate(dataset.examples):
                gen = beam_search(
                    store, model_cfg, vocab, example, beam_size=args.beam, max_len=args.max_len
                )
                fh.write(
                    json.dumps({"index": idx, "tokens": gen.tokens, "logprob": gen.logprob}) + "\n"
                )
                if trace_fh is not None:
                    steps = [s.to_json() for s in gen.trace]
                    trace_fh.write(json.dumps({"index": idx, "steps": steps}) + "\n")
    finally:
        if trace_fh is not None:
            trace_fh.close()
    print(f"wrote {len(dataset.examples)} generations to {out_path}")
    return 0


def cmd_evaluate(args):
    if not args.generations and not args.include_gold:
        raise ValueError("nothing to evaluate: pass --generations LABEL=PATH or --include-gold")
    data_path = _split_path(args.data, args.split)
    systems = []
    for item in args.generations or []:
        if "=" not in item:
            raise ValueError(f"--generations expects LABEL=PATH, got {item!r}")
        label, path = item.split("=", 1)
        if not os.path.exists(path):
            raise FileNotFoundError(f"generations file not found: {path}")
        systems.append((label, path))

    csv_path = os.path.join(args.out, "metrics.csv")
    png_path = os.path.join(args.out, "metrics.png")
    outputs = {"metrics": csv_path, "metrics_plot": png_path}
    for label, _ in systems:
        outputs[f"report.{label}"] = os.path.join(args.out, f"{label}.report.json")
    write_manifest(
        args.out,
        "evaluate",
        {"split": args.split, "window": args.window, "include_gold": args.include_gold},
        {"data": data_path, **{f"generations.{label}": p for label, p in systems}},
        outputs,
    )

    dataset = parse_dataset(data_path, args.split)
    rows = {}
    if args.include_gold:
        gold = [ex.description.tokens for ex in dataset.examples]
        rows["gold"] = report(dataset.examples, gold, window=args.window)
    for label, path in systems:
        generations = _read_generations(path)
        rows[label] = report(dataset.examples, generations, window=args.window)
        write_report(rows[label], os.path.join(args.out, f"{label}.report.json"))

    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("system," + ",".join(TABLE_COLUMNS) + "\n")
        for label, rep in rows.items():
            cells = (rep.bleu, rep.rg_p, rep.rg_num, rep.cs_p, rep.cs_r, rep.cs_f1, rep.co)
            fh.write(label + "," + ",".join(f"{v:.4f}" for v in cells) + "\n")
    metrics_figure(rows, png_path)
    print(format_table(rows))
    print(f"\nwrote {csv_path} and {png_path}")
    return 0


def cmd_dump_attention(args):
    header, model_cfg, store = load_model(args.checkpoint)
    vocab = _load_vocab(args)
    data_path = _split_path(args.data, args.split)
    trace_path = os.path.join(args.out, "trace.json")
    steps_dir = os.path.join(args.out, "steps")
    write_manifest(
        args.out,
        "dump-attention",
        {"beam": args.beam, "max_len": args.max_len, "split": args.split, "index": args.index,
         **header["config"]},
        {"checkpoint": args.checkpoint, "data": data_path},
        {"trace": trace_path, "figures": steps_dir},
        seed=header["config"].get("seed"),
        scenario=model_cfg.scenario,
    )

    dataset = parse_dataset(data_path, args.split)
    if not 0 <= args.index < len(dataset.examples):
        raise IndexError(
            f"--index {args.index} out of range for {len(dataset.examples)} examples"
        )
    example = dataset.examples[args.index]
    gen = beam_search(
        store, model_cfg, vocab, example, beam_size=args.beam, max_len=args.max_len
    )
    with open(trace_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "index": args.index,
                "tokens": gen.tokens,
                "logprob": gen.logprob,
                "steps": [s.to_json() for s in gen.trace],
            },
            fh,
            indent=2,
        )

    if model_cfg.scenario == "flat":
        labels = [
            f"{entity.name() or entity.kind}:{record.key}"
            for entity in example.entities
            for record in entity.records
        ]
        record_labels = None
    else:
        labels = [entity.name() or entity.kind for entity in example.entities]
        record_labels = [[record.key for record in entity.records] for entity in example.entities]
    os.makedirs(steps_dir, exist_ok=True)
    paths = attention_figures(gen.trace, steps_dir, labels, record_labels)
    print(f"generated: {' '.join(gen.tokens)}")
    print(f"wrote {trace_path} and {len(paths)} step figures under {steps_dir}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tabletext",
        description="Hierarchical table-to-text: generate corpora, train, decode, score.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-train", type=int, default=2000)
    p.add_argument("--num-valid", type=int, default=300)
    p.add_argument("--num-test", type=int, default=300)
    p.add_argument("--min-entities", type=int, default=4)
    p.add_argument("--max-entities", type=int, default=8)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a model on a corpus directory")
    p.add_argument("--data", required=True, help="corpus directory with train/valid splits")
    p.add_argument("--out", required=True, help="run directory for checkpoints and curves")
    p.add_argument("--config", help="key=value config file; flags below override it")
    p.add_argument("--scenario", choices=SCENARIOS)
    for key in CONFIG_KEYS:
        if key == "scenario":
            continue
        p.add_argument(f"--{key.replace('_', '-')}", dest=key)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode a split with beam search")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", help="vocab.json (default: next to the checkpoint)")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=600)
    p.add_argument("--attention-trace", help="also write per-step attention rows to this JSONL")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generations against a split")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--out", required=True)
    p.add_argument(
        "--generations",
        action="append",
        metavar="LABEL=PATH",
        help="labeled generations JSONL; repeat for a multi-row table",
    )
    p.add_argument("--include-gold", action="store_true", help="add the references as a system row")
    p.add_argument("--window", type=int, default=20)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dump-attention", help="trace one example and render per-step charts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--index", type=int, default=0, help="example index within the split")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", help="vocab.json (default: next to the checkpoint)")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=600)
    p.set_defaults(func=cmd_dump_attention)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, IndexError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

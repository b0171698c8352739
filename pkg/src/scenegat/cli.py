"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/schema error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, NumericError, ScenegatError
from .explain import aggregate_importance, per_image_attribution, render_tables, tables_to_json
from .graph import ClassLabelSet, Vocabulary
from .ingest import (
    filter_manifest,
    infer_class_set,
    load_manifest,
    load_splits,
    parse_graph_record,
)
from .model import ModelConfig, forward
from .numerics import softmax
from .synthgen import GeneratorSpec, write_dataset
from .train import TrainConfig, cross_validate, evaluate, train

log = logging.getLogger("scenegat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _effective(args, **resolved) -> None:
    shown = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    shown.update(resolved)
    print("effective config: " + json.dumps(shown, sort_keys=True, default=str), file=sys.stderr)


def _vocab(args) -> Vocabulary:
    if args.vocab_objects or args.vocab_relations:
        if not (args.vocab_objects and args.vocab_relations):
            raise UsageError("--vocab-objects and --vocab-relations must be given together")
        return Vocabulary.from_files(args.vocab_objects, args.vocab_relations)
    return Vocabulary.vg150()


def _class_set(args, data_path) -> ClassLabelSet:
    if getattr(args, "classes", None):
        return ClassLabelSet.from_file(args.classes)
    sibling = Path(data_path).with_name("classes.txt")
    if sibling.exists():
        return ClassLabelSet.from_file(sibling)
    return infer_class_set(data_path)


def _train_config(args) -> TrainConfig:
    base = TrainConfig.rcpd() if args.preset == "rcpd" else TrainConfig.places8()
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read training config {args.config}: {exc}") from exc
        base = TrainConfig.from_dict({**base.to_dict(), **raw})
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "tau", None) is not None:
        over["confidence_tau"] = args.tau
    if getattr(args, "finetune", None) is not None:
        over["finetune_mode"] = args.finetune
    if getattr(args, "max_epochs", None) is not None:
        over["max_epochs"] = args.max_epochs
        over["patience"] = min(base.patience, args.max_epochs)
    return replace(base, **over) if over else base


def _model_config(args, vocab: Vocabulary, num_classes: int) -> ModelConfig:
    maker = ModelConfig.rcpd if args.preset == "rcpd" else ModelConfig.places8
    overrides = {}
    if args.model_config:
        try:
            overrides = json.loads(Path(args.model_config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read model config {args.model_config}: {exc}") from exc
        for key in ("num_object_labels", "num_relation_labels", "num_classes"):
            overrides.pop(key, None)
    try:
        return maker(vocab, num_classes=num_classes, **overrides)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid model config: {exc}") from None


def _positive(args, class_names) -> int | None:
    if not getattr(args, "positive_class", None):
        return None
    if args.positive_class not in class_names:
        raise DataError(f"positive class {args.positive_class!r} not in {class_names}")
    return list(class_names).index(args.positive_class)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    spec = GeneratorSpec.from_json(args.spec) if args.spec else GeneratorSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    _effective(args, generator=spec.to_dict())
    paths = write_dataset(spec, args.out, _vocab(args))
    for k, p in paths.items():
        print(f"{k}: {p}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.finetune in ("head", "full") and not args.init:
        raise UsageError(f"--finetune {args.finetune} requires --init")
    vocab = _vocab(args)
    cfg = _train_config(args)
    classes = _class_set(args, args.data)
    initial = None
    if args.init:
        initial = load_checkpoint(args.init)
        initial.check_vocabulary(vocab, override=args.allow_vocab_mismatch)
        base = replace(initial.model_config, num_classes=len(classes))
        model_cfg = base
    else:
        model_cfg = _model_config(args, vocab, len(classes))
    _effective(args, train_config=cfg.to_dict(), model_config=model_cfg.to_dict(), classes=list(classes.names))
    manifest = load_manifest(args.data, vocab, classes, strict=not args.lenient)
    splits = load_splits(args.splits)
    train_set, val_set = manifest.subset(splits["train"]), manifest.subset(splits["val"])
    if initial is not None and args.allow_vocab_mismatch:
        initial.object_vocab_hash, initial.relation_vocab_hash = vocab.object_hash(), vocab.relation_hash()
    ckpt = train(train_set, val_set, cfg, initial, model_config=model_cfg, vocab=vocab)
    save_checkpoint(ckpt, args.out)
    history_path = args.history or str(args.out) + ".history.json"
    _write_json(history_path, {
        "best_epoch": ckpt.best_epoch,
        "history": [dict(h, seconds=t) for h, t in zip(ckpt.history, ckpt.timings)],
    })
    best = next(h for h in ckpt.history if h["epoch"] == ckpt.best_epoch)
    print(f"best epoch {ckpt.best_epoch}: val loss {best['val_loss']:.4f}, "
          f"val balanced accuracy {best['val_balanced_accuracy']:.4f}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def _eval_manifest(args, vocab, ckpt):
    manifest = load_manifest(args.data, vocab, ckpt.class_set, strict=not getattr(args, "lenient", False))
    if args.splits:
        manifest = manifest.subset(load_splits(args.splits)[args.split])
    tau = args.tau if args.tau is not None else float(ckpt.train_config.get("confidence_tau", 0.0))
    manifest, _ = filter_manifest(manifest, tau)
    return manifest


def cmd_eval(args) -> int:
    vocab = _vocab(args)
    ckpt = load_checkpoint(args.ckpt)
    ckpt.check_vocabulary(vocab, override=args.allow_vocab_mismatch)
    _effective(args, classes=ckpt.class_names)
    manifest = _eval_manifest(args, vocab, ckpt)
    report = evaluate(ckpt, manifest, positive_class=_positive(args, ckpt.class_names))
    print(report.render())
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_crossval(args) -> int:
    vocab = _vocab(args)
    cfg = _train_config(args)
    classes = _class_set(args, args.data)
    model_cfg = _model_config(args, vocab, len(classes))
    _effective(args, train_config=cfg.to_dict(), model_config=model_cfg.to_dict(), classes=list(classes.names))
    manifest = load_manifest(args.data, vocab, classes, strict=not args.lenient)
    result = cross_validate(manifest, args.k, cfg, model_config=model_cfg, vocab=vocab,
                            positive_class=_positive(args, classes.names), jobs=args.jobs)
    for f in result["folds"]:
        rec = "" if f["recall"] is None else f"  recall {f['recall']:.4f}"
        print(f"fold {f['fold']}: balanced accuracy {f['balanced_accuracy']:.4f}{rec}")
    print(f"mean {result['balanced_accuracy_mean']:.4f} +/- {result['balanced_accuracy_std']:.4f}")
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_explain(args) -> int:
    vocab = _vocab(args)
    ckpt = load_checkpoint(args.ckpt)
    ckpt.check_vocabulary(vocab, override=args.allow_vocab_mismatch)
    _effective(args, classes=ckpt.class_names)
    manifest = _eval_manifest(args, vocab, ckpt)
    table = aggregate_importance(manifest.graphs, ckpt, vocab, only_correct=args.only_correct,
                                 layer=args.layer, mode=args.mode)
    text, payload = render_tables(table, args.top_objects, args.top_relations)
    print(text)
    if args.out:
        Path(args.out).write_text(tables_to_json(payload) + "\n", encoding="utf-8")
    return EXIT_OK


def _read_records(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    stripped = text.strip()
    if not stripped:
        raise DataError(f"{path} is empty")
    try:
        return [json.loads(stripped)]
    except json.JSONDecodeError:
        pass
    out = []
    for i, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"line {i}: malformed JSON ({exc.msg})") from None
    return out


def cmd_predict(args) -> int:
    vocab = _vocab(args)
    ckpt = load_checkpoint(args.ckpt)
    ckpt.check_vocabulary(vocab, override=args.allow_vocab_mismatch)
    _effective(args, classes=ckpt.class_names)
    classes = ckpt.class_set
    for rec in _read_records(args.graph):
        if isinstance(rec, dict) and rec.get("label") not in classes.names:
            rec = dict(rec, label=None)
        g = parse_graph_record(rec, vocab, classes)
        logits, record = forward(g, ckpt.params, ckpt.model_config, mode="eval")
        probs = softmax(logits)[0]
        pred = int(np.argmax(probs))
        attribution = per_image_attribution(record, g, vocab, layer=args.layer)
        if args.json:
            out = attribution.to_dict(ckpt.class_names)
            out["confidence"] = float(probs[pred])
            out["probabilities"] = dict(zip(ckpt.class_names, map(float, probs)))
            print(json.dumps(out, sort_keys=True))
            continue
        print(f"{g.graph_id}\t{ckpt.class_names[pred]}\t{probs[pred]:.4f}")
        for n in attribution.nodes[: args.top]:
            print(f"  node {n.node_id} {n.label}: {n.importance:.4f}")
        for e in attribution.edges[: args.top]:
            print(f"  edge ({e.subject}, {e.predicate}, {e.object}): {e.importance:.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    vocab = _vocab(args)
    _effective(args)
    for rec in _read_records(args.graph):
        label = rec.get("label") if isinstance(rec, dict) else None
        names = (label,) if label is not None else ()
        # any label is acceptable for display purposes
        classes = ClassLabelSet(tuple(names) + tuple(f"__{i}" for i in range(2)))
        g = parse_graph_record(rec, vocab, classes)
        print(f"{g.graph_id}: {g.num_nodes} nodes, {g.num_edges} edges, label={label}")
        labels = [vocab.object_label(n.label_index) for n in g.nodes]
        for e in g.edges:
            print(f"({labels[e.subject_id]}#{e.subject_id}, {vocab.relation_label(e.predicate_index)}, "
                  f"{labels[e.object_id]}#{e.object_id})  score={e.confidence:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_common(p):
    p.add_argument("--vocab-objects", help="object label file (one per line); default: bundled VG150 list")
    p.add_argument("--vocab-relations", help="relation label file (one per line); default: bundled VG150 list")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="logging verbosity (default WARNING)")


def _add_training(p):
    p.add_argument("--config", help="training config JSON using TrainConfig field names")
    p.add_argument("--preset", choices=["places8", "rcpd"], default="places8",
                   help="hyperparameter preset for model and training (default places8)")
    p.add_argument("--model-config", help="JSON overriding ModelConfig fields (dims, heads, layers, dropout)")
    p.add_argument("--classes", help="class names file, one per line (default: classes.txt beside --data, "
                                     "else sorted labels found in the data)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--max-epochs", type=int, help="override max_epochs")
    p.add_argument("--tau", type=float, help="confidence threshold for triplets (override confidence_tau)")
    p.add_argument("--lenient", action="store_true", help="skip malformed data lines instead of aborting")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scenegat", description="Scene-graph classification with GATv2 attention.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic scene-graph dataset")
    p.add_argument("--spec", help="generator spec JSON (default: built-in 8-class profile)")
    p.add_argument("--out", required=True, help="output directory for dataset.jsonl, splits.json, classes.txt")
    p.add_argument("--seed", type=int, help="override the spec seed")
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train or fine-tune a model")
    p.add_argument("--data", required=True, help="scene-graph .jsonl file")
    p.add_argument("--splits", required=True, help="splits JSON with train/val/test graph ids")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--init", help="checkpoint to start from (fine-tuning)")
    p.add_argument("--finetune", choices=["scratch", "head", "full"], help="training regime (default scratch)")
    p.add_argument("--history", help="history JSON path (default: <out>.history.json)")
    p.add_argument("--allow-vocab-mismatch", action="store_true",
                   help="accept an --init checkpoint trained with a different vocabulary")
    _add_training(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True, help="scene-graph .jsonl file")
    p.add_argument("--splits", help="splits JSON; without it the whole file is evaluated")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to evaluate (default test)")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--report", help="write the metrics report JSON here")
    p.add_argument("--tau", type=float, help="confidence threshold (default: the checkpoint's)")
    p.add_argument("--positive-class", help="positive class name for binary recall (default: first class)")
    p.add_argument("--allow-vocab-mismatch", action="store_true", help="evaluate despite a vocabulary hash mismatch")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    p.add_argument("--data", required=True, help="scene-graph .jsonl file")
    p.add_argument("--k", type=int, default=5, help="number of folds (default 5)")
    p.add_argument("--out", help="write per-fold and aggregate JSON here (default: stdout)")
    p.add_argument("--jobs", type=int, default=1, help="folds to run in parallel (default 1)")
    p.add_argument("--positive-class", help="positive class name for binary recall (default: first class)")
    _add_training(p)
    _add_common(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("explain", help="per-class top objects and relations from attention")
    p.add_argument("--data", required=True, help="scene-graph .jsonl file")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--splits", help="splits JSON; without it the whole file is used")
    p.add_argument("--split", default="val", choices=["train", "val", "test"], help="split to analyze (default val)")
    p.add_argument("--top-objects", type=int, default=10, help="object rows per class (default 10)")
    p.add_argument("--top-relations", type=int, default=5, help="relation rows per class (default 5)")
    p.add_argument("--layer", type=int, default=-1, help="GATv2 layer supplying edge attention (default: last)")
    p.add_argument("--only-correct", action=argparse.BooleanOptionalAction, default=True,
                   help="accumulate only correctly classified graphs (default on)")
    p.add_argument("--mode", choices=["sum", "mean"], default="sum",
                   help="accumulate sums, or means per contributing image (default sum)")
    p.add_argument("--tau", type=float, help="confidence threshold (default: the checkpoint's)")
    p.add_argument("--out", help="write the tables as JSON here")
    p.add_argument("--allow-vocab-mismatch", action="store_true", help="explain despite a vocabulary hash mismatch")
    _add_common(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("predict", help="classify single scene graphs")
    p.add_argument("--graph", required=True, help="a JSON record, or a .jsonl file of records")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--layer", type=int, default=-1, help="GATv2 layer supplying edge attention (default: last)")
    p.add_argument("--top", type=int, default=5, help="attribution rows to print (default 5)")
    p.add_argument("--json", action="store_true", help="print one JSON object per graph instead")
    p.add_argument("--allow-vocab-mismatch", action="store_true", help="predict despite a vocabulary hash mismatch")
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="list a graph's triplets")
    p.add_argument("--graph", required=True, help="a JSON record, or a .jsonl file of records")
    _add_common(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"scenegat {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"scenegat {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ScenegatError) as exc:
        print(f"scenegat {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``hyperssm {synth,train,eval,hyperbolicity,embed,pretrain}``.

Exit codes: 0 ok, 1 I/O or configuration problem, 2 usage error, 3 numeric
divergence. Machine-readable results go to stdout as JSON; progress and the
resolved configuration go to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import hierarchy as hier
from .encoder import ManifoldConfig
from .evaluation import calibrate_threshold, embed_entities, evaluate, export_embeddings, pair_scores
from .geometry import GeometryError, ManifoldKind
from .objectives import LossConfig
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    build_model,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    train,
)

log = logging.getLogger("hyperssm")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# -----------------------------------------------------------------------------
# configuration
# -----------------------------------------------------------------------------


def _merge(base, updates: dict, where: str):
    """Apply ``updates`` to a dataclass instance, rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(base)}
    unknown = set(updates) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    plain = {k: v for k, v in updates.items() if not isinstance(getattr(base, k), (ManifoldConfig, LossConfig))}
    out = dataclasses.replace(base, **plain)
    for k in ("manifold", "loss"):
        if k in updates and hasattr(base, k):
            sub = updates[k]
            if not isinstance(sub, dict):
                raise ConfigError(f"{where}.{k} must be an object")
            if k == "manifold" and "kind" in sub and "unit_normalize" not in sub:
                sub = {**sub, "unit_normalize": None}  # re-derive for the new kind
            setattr(out, k, _merge(getattr(base, k), sub, f"{where}.{k}"))
    return out


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Built-in desk defaults < JSON config file < command-line flags."""
    cfg = TrainConfig.desk()
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        try:
            cfg = _merge(cfg, data, "config")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    flags = {
        "epochs": "epochs", "batch_size": "batch_size", "lr": "lr_target",
        "warmup_steps": "warmup_steps", "weight_decay": "weight_decay",
        "dropout": "dropout", "seed": "seed", "hard_fraction": "hard_fraction",
        "stabilize_every": "stabilize_every",
    }
    over = {dst: getattr(args, src) for src, dst in flags.items() if getattr(args, src, None) is not None}
    man = {}
    if getattr(args, "manifold", None) is not None:
        man["kind"] = args.manifold
    if getattr(args, "fixed_curvature", None) is not None:
        K = args.fixed_curvature
        if not K < 0:
            raise ConfigError("--fixed-curvature takes a negative curvature K (c = -1/K)")
        man.update(c=-1.0 / K, learn_curvature=False)
    if man:
        over["manifold"] = man
    try:
        cfg = _merge(cfg, over, "flag")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# -----------------------------------------------------------------------------
# helpers
# -----------------------------------------------------------------------------


def _load_tax(args) -> hier.Taxonomy:
    data = Path(args.data)
    ent, edg = data / "entities.tsv", data / "edges.tsv"
    for f in (ent, edg):
        if not f.is_file():
            raise FileNotFoundError(f"missing dataset file {f}")
    return hier.load_taxonomy(ent, edg)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# -----------------------------------------------------------------------------
# subcommands
# -----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.depth < 2 or args.branching < 2:
        raise UsageError("--depth and --branching must be >= 2")
    tax = hier.generate_synthetic_tree(
        args.branching, args.depth, args.label_scheme, args.seed, args.min_branching
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hier.save_taxonomy(tax, out / "entities.tsv", out / "edges.tsv")
    print(f"wrote {len(tax)} entities, {len(tax.edges)} edges to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    tax = _load_tax(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    print(json.dumps({"resolved_config": cfg.to_dict(), "task": args.task}), file=sys.stderr)
    (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "task": args.task}, indent=2) + "\n")

    splits = hier.make_splits(tax, args.task, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    val = hier.build_eval_pairs(tax, splits.val, args.neg_ratio, rng)
    test = hier.build_eval_pairs(tax, splits.test, args.neg_ratio, rng)
    hier.save_pairs(val, out / "val.tsv")
    hier.save_pairs(test, out / "test.tsv")
    hier.save_pairs([hier.LabeledPair(c, a, True, tax.ancestors[c][a]) for c, a in splits.train],
                    out / "train.tsv")

    resume = None
    if args.resume:
        resume, _ = load_checkpoint(ckpt)
        model = resume.model
        print(f"resuming at epoch {resume.epoch}, step {resume.state.step}", file=sys.stderr)
    else:
        texts = [tax.label(i) for i in tax.ids]
        model = build_model(texts, cfg.manifold, seed=cfg.seed)
        if args.init:
            _init_from(model, args.init)
    metrics = out / "metrics.jsonl"
    if not args.resume and metrics.exists():
        metrics.unlink()
    try:
        train(model, tax, splits.train, cfg, val, metrics_path=metrics, checkpoint_path=ckpt, resume=resume)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last good state in {ckpt}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _init_from(model, path) -> None:
    """Copy encoder weights from a pretraining checkpoint (matching words only for the embedding)."""
    src, _ = load_checkpoint(path)
    shape = ("dim", "inner", "state", "n_blocks", "conv_kernel", "final_norm")
    a, b = src.model.encoder.config, model.encoder.config
    if any(getattr(a, k) != getattr(b, k) for k in shape):
        raise ConfigError("pretrained encoder shape does not match the training profile")
    for name, p in model.encoder.params.items():
        if name == "embed":
            src_vocab = src.model.encoder.vocab
            for i, tok in enumerate(model.encoder.vocab.tokens):
                j = src_vocab.index.get(tok)
                if j is not None:
                    p.data[i] = src.model.encoder.params["embed"].data[j]
        else:
            p.data = src.model.encoder.params[name].data.copy()


def cmd_eval(args) -> int:
    result, _ = load_checkpoint(args.checkpoint)
    model = result.model
    if args.manifold is not None and ManifoldKind(args.manifold) is not model.kind:
        raise ConfigError(f"checkpoint holds a {model.kind.value} model, not {args.manifold}")
    tax = _load_tax(args)
    test = hier.load_pairs(args.pairs)
    cache = embed_entities(model, tax)
    if args.threshold is not None:
        thr = args.threshold
    else:
        val = hier.load_pairs(args.val_pairs) if args.val_pairs else test
        thr, _ = calibrate_threshold(pair_scores(model, tax, val, cache), [p.label for p in val])
    report = evaluate(model, tax, test, thr, args.task, cache)
    _emit(dataclasses.asdict(report))
    return EXIT_OK


def cmd_hyperbolicity(args) -> int:
    tax = _load_tax(args)
    if args.exact:
        mean, norm = hier.delta_hyperbolicity_exact(tax)
        n = None
    else:
        mean, norm = hier.delta_hyperbolicity(tax, args.quadruples, np.random.default_rng(args.seed))
        n = args.quadruples
    _emit({"delta_mean": mean, "delta_normalized_mean": norm, "quadruples": n, "exact": bool(args.exact)})
    return EXIT_OK


def cmd_embed(args) -> int:
    result, _ = load_checkpoint(args.checkpoint)
    tax = _load_tax(args)
    n = export_embeddings(result.model, tax, args.out)
    print(f"wrote {n} rows to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    path = Path(args.corpus)
    if not path.is_file():
        raise FileNotFoundError(f"missing corpus {path}")
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    row = json.loads(line)
                    pairs.append((row["text_a"], row["text_b"]))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ConfigError(f"{path}:{lineno}: expected {{text_a, text_b}}") from exc
    texts = [t for p in pairs for t in p]
    if args.vocab_from:
        texts += [line.split("\t", 1)[1] for line in Path(args.vocab_from).read_text().splitlines()
                  if "\t" in line and not line.startswith("#")]
    model = build_model(texts, ManifoldConfig(kind=ManifoldKind.EUCLIDEAN), seed=cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics = out.with_suffix(".metrics.jsonl")
    if metrics.exists():
        metrics.unlink()
    history = pretrain(model.encoder, pairs, cfg, metrics_path=metrics)
    save_checkpoint(model, None, out, cfg)
    _emit({"epochs": len(history), "final_loss": history[-1]["train_loss"] if history else None})
    return EXIT_OK


# -----------------------------------------------------------------------------
# parser
# -----------------------------------------------------------------------------


class UsageError(Exception):
    pass


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (override the config file)")
    g.add_argument("--config", help="JSON file with TrainConfig fields (nested 'manifold', 'loss')")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float, help="target learning rate after warmup")
    g.add_argument("--warmup-steps", type=int)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--dropout", type=float)
    g.add_argument("--hard-fraction", type=float, help="share of sibling/cousin negatives")
    g.add_argument("--stabilize-every", type=int)
    g.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperssm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic tree dataset")
    p.add_argument("--branching", type=int, default=3, help="maximum children per node")
    p.add_argument("--min-branching", type=int, default=1, help="minimum children per inner node")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--label-scheme", choices=["path", "word"], default="path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a hierarchy encoder")
    p.add_argument("--data", required=True, help="directory with entities.tsv and edges.tsv")
    p.add_argument("--out", required=True, help="run directory (checkpoint, metrics, splits)")
    p.add_argument("--manifold", choices=[k.value for k in ManifoldKind])
    p.add_argument("--task", choices=["mixed", "multi"], default="mixed")
    p.add_argument("--fixed-curvature", type=float, metavar="K",
                   help="freeze curvature at K < 0 (c = -1/K)")
    p.add_argument("--neg-ratio", type=int, default=10, help="negatives per positive in val/test")
    p.add_argument("--resume", action="store_true", help="continue from OUT/model.ckpt")
    p.add_argument("--init", help="pretraining checkpoint to initialise the encoder from")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score labelled pairs; JSON report on stdout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", required=True, help="TSV child, candidate, label, hops")
    p.add_argument("--val-pairs", help="pairs used to calibrate the threshold (default: --pairs)")
    p.add_argument("--threshold", type=float, help="use this threshold instead of calibrating")
    p.add_argument("--manifold", choices=[k.value for k in ManifoldKind],
                   help="expected manifold; a mismatch is an error")
    p.add_argument("--task", choices=["mixed", "multi"], default="mixed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hyperbolicity", help="four-point delta of the taxonomy graph")
    p.add_argument("--data", required=True)
    p.add_argument("--quadruples", type=int, default=100_000)
    p.add_argument("--exact", action="store_true", help="enumerate every 4-subset (small graphs)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_hyperbolicity)

    p = sub.add_parser("embed", help="export embeddings as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("pretrain", help="contrastive pretraining on sentence pairs")
    p.add_argument("--corpus", required=True, help="JSON lines with text_a and text_b")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--vocab-from", help="entities.tsv whose labels join the vocabulary")
    _train_flags(p)
    p.set_defaults(func=cmd_pretrain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hyperssm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"hyperssm: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ConfigError, CheckpointError, hier.TaxonomyError, GeometryError, KeyError, ValueError) as exc:
        print(f"hyperssm: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

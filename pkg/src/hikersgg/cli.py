"""Command-line front end.

Exit codes: 0 success, 2 validation error (bad flags, files, hashes), 3 numeric failure.
Every command accepts ``--config FILE``: a JSON object whose keys are the
command's flag names (dashes or underscores); explicit flags win over it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .corruption import IMPLEMENTED, corrupt_dataset
from .evaluation import evaluate, load_predictions, predict, save_predictions
from .graph import build_commonsense_graph, load_bundles, load_relation_edges, save_graph
from .hierarchy import DEFAULT_GROUPS, ConfusionMatrix, EmbeddingTable, Hierarchy, discover, load_manual_hierarchy
from .model import HikerModel, ModelConfig, projection_params
from .synth import SyntheticSpec, add_feature_noise, collapsed, generate, write_dataset
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("hikersgg")

# flags that never change output bytes; left out of the config hash
UNHASHED = ("config", "jobs", "out", "output", "csv", "verbose")


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def config_hash(command: str, args: argparse.Namespace) -> str:
    doc = {k: v for k, v in vars(args).items() if k not in UNHASHED and k != "func"}
    doc["command"] = command
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise ValidationError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _exists(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _dump(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _groups(text) -> tuple[int, int] | None:
    if text is None:
        return None
    try:
        g = tuple(int(x) for x in str(text).split(","))
    except ValueError:
        raise ValidationError(f"group counts must look like '4,2', got {text!r}") from None
    if len(g) != 2:
        raise ValidationError(f"group counts must look like '4,2', got {text!r}")
    return g


def _classes(path, target: str | None = None):
    """Class lists from a JSON list or a ``{"entities": [...], "predicates": [...]}`` object."""
    doc = json.loads(_exists(path, "classes file").read_text())
    if isinstance(doc, list):
        return [str(c) for c in doc]
    if target is None:
        return [str(c) for c in doc["entities"]], [str(c) for c in doc["predicates"]]
    return [str(c) for c in doc["entities" if target == "entity" else "predicates"]]


def _hier(path, n: int):
    return load_manual_hierarchy(_exists(path, "hierarchy file"), n) if path else None


# ---------------------------------------------------------------- commands

def cmd_discover(args, h: str) -> int:
    _require(args, "embeddings", "classes", "out")
    names = _classes(args.classes, args.target)
    vectors = EmbeddingTable.load(_exists(args.embeddings, "embeddings file")).lookup(names)
    conf = None
    if args.lam < 1.0:
        _require(args, "confusion")
        conf = ConfusionMatrix.load(_exists(args.confusion, "confusion file"))
        if conf.labels != names:
            raise ValidationError("confusion labels do not match the class list")
    n_l2, n_l1 = _groups(args.groups) or DEFAULT_GROUPS[args.target]
    if not len(names) >= n_l2 >= n_l1 >= 1:
        raise ValidationError(f"need classes >= level-2 groups >= level-1 groups, got {len(names)}, {n_l2}, {n_l1}")
    hier = discover(vectors, conf, args.lam, n_l2, n_l1, args.target, names)
    _dump(args.out, {**hier.to_json(), "config_hash": h})
    return 0


def cmd_build_kg(args, h: str) -> int:
    _require(args, "classes", "embeddings", "out")
    ents, preds = _classes(args.classes)
    edges = load_relation_edges(_exists(args.relations, "relations file")) if args.relations else []
    emb = EmbeddingTable.load(_exists(args.embeddings, "embeddings file"))
    cfg = ModelConfig(dim=args.dim, emb_dim=emb.dim, precision=args.precision, seed=args.seed)
    proj = projection_params(cfg)
    g = build_commonsense_graph(ents, preds, _hier(args.ent_hierarchy, len(ents)),
                                _hier(args.pred_hierarchy, len(preds)), edges, emb, proj["proj_w"], proj["proj_b"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_graph(g, args.out, config_hash=h)
    return 0


SPEC_FLAGS = ("n_images", "n_test", "min_objects", "max_objects", "n_entities", "n_predicates", "dim", "emb_dim",
              "separation", "noise", "surrogate_noise", "relation_prob", "preferred_prob")


def cmd_synth(args, h: str) -> int:
    _require(args, "out")
    kw = {k: getattr(args, k) for k in SPEC_FLAGS}
    kw["ent_groups"] = _groups(args.ent_groups)
    kw["pred_groups"] = _groups(args.pred_groups)
    spec = SyntheticSpec(seed=args.seed, **kw)
    write_dataset(generate(spec), args.out, h)
    return 0


def _data_groups(data: Path, kind: str, override):
    g = _groups(override)
    if g:
        return g
    path = data / f"{kind}_hierarchy.json"
    if path.exists():
        hh = Hierarchy.from_json(json.loads(path.read_text()))
        return hh.n_l2, hh.n_l1
    return DEFAULT_GROUPS["entity" if kind == "ent" else "predicate"]


def _train_hierarchies(args, data: Path, ents, preds, emb):
    out = {}
    for kind, names, target in (("ent", ents, "entity"), ("pred", preds, "predicate")):
        explicit = getattr(args, f"{kind}_hierarchy")
        if explicit:
            out[kind] = _hier(explicit, len(names))
        elif args.hierarchy_source == "discovered":
            conf = None
            if args.lam < 1.0:
                conf = ConfusionMatrix.load(_exists(data / f"{kind}_confusion.json", "confusion file"))
            n_l2, n_l1 = _data_groups(data, kind, getattr(args, f"{kind}_groups"))
            out[kind] = discover(emb.lookup(names), conf, args.lam, n_l2, n_l1, target, names)
        elif args.hierarchy_source == "manual":
            path = data / f"{kind}_hierarchy.manual.json"
            if path.exists():
                out[kind] = _hier(path, len(names))
            else:
                out[kind] = collapsed(_hier(data / f"{kind}_hierarchy.json", len(names)))
        else:
            out[kind] = _hier(data / f"{kind}_hierarchy.json", len(names))
    return out["ent"], out["pred"]


def cmd_train(args, h: str) -> int:
    _require(args, "data", "out")
    data = _exists(args.data, "data directory")
    ents, preds = _classes(data / "classes.json")
    emb = EmbeddingTable.load(_exists(data / "embeddings.txt", "embeddings file"))
    edges = load_relation_edges(_exists(data / "relations.json", "relations file"))
    bundles = load_bundles(_exists(data / "train.jsonl", "training bundles"))
    if not bundles:
        raise ValidationError("training set is empty")
    eh, ph = _train_hierarchies(args, data, ents, preds, emb)
    cfg = ModelConfig(dim=args.dim, steps=args.steps, feat_dim=bundles[0].ent_features.shape[1], emb_dim=emb.dim,
                      mode=args.mode, pred_hierarchy=not args.no_ph, ent_hierarchy=not args.no_eh,
                      adaptive_refinement=not args.no_ar, ent_losses=not args.no_ent_losses, greedy=args.greedy,
                      precision=args.precision, seed=args.seed)
    tc = TrainConfig(epochs=args.epochs, lr=args.lr, lr_decay=args.lr_decay, lr_step=args.lr_step, alpha=args.alpha,
                     optimizer=args.optimizer, batch_size=args.batch_size, seed=args.seed)
    model = HikerModel.create(cfg, ents, preds, eh, ph, edges, emb.lookup(ents + preds))
    report = train(model, bundles, tc, on_epoch=lambda e: log.info("epoch %d loss %.4f", e.epoch, e.total))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt", {"config_hash": h, "train": tc.to_json()})
    doc = report.to_json()
    doc["run_hash"], doc["config_hash"] = doc["config_hash"], h
    _dump(out / "train_report.json", doc)
    for kind, hh in (("ent", eh), ("pred", ph)):
        if hh is not None:
            _dump(out / f"{kind}_hierarchy.json", {**hh.to_json(), "config_hash": h})
    return 0


def _check_hierarchy(model: HikerModel, kind: str, path):
    if not path:
        return
    given = load_manual_hierarchy(_exists(path, "hierarchy file"))
    stored = model.ent_hierarchy if kind == "ent" else model.pred_hierarchy
    if stored is None or stored.digest() != given.digest():
        raise ValidationError(f"{path}: hierarchy does not match the one stored in the checkpoint")


def cmd_predict(args, h: str) -> int:
    _require(args, "checkpoint", "bundles", "out")
    bundles = load_bundles(_exists(args.bundles, "bundles file"))
    feat_dim = bundles[0].ent_features.shape[1] if bundles else None
    model = load_checkpoint(_exists(args.checkpoint, "checkpoint"), feat_dim)
    _check_hierarchy(model, "ent", args.ent_hierarchy)
    _check_hierarchy(model, "pred", args.pred_hierarchy)
    if args.feature_noise < 0:
        raise ValidationError("--feature-noise must be >= 0")
    if args.feature_noise > 0:
        bundles = add_feature_noise(bundles, args.feature_noise, args.seed)
    preds = predict(model, bundles, args.batch_size, args.max_triplets)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_predictions(preds, args.out, h)
    return 0


def cmd_eval(args, h: str) -> int:
    _require(args, "predictions", "bundles", "out")
    preds = load_predictions(_exists(args.predictions, "predictions file"))
    bundles = load_bundles(_exists(args.bundles, "bundles file"))
    if [p.image_id for p in preds] != [b.image_id for b in bundles]:
        raise ValidationError("predictions and bundles do not cover the same images in the same order")
    hier, mode = None, args.mode
    if args.checkpoint:
        model = load_checkpoint(_exists(args.checkpoint, "checkpoint"))
        classes, hier = model.predicate_classes, model.active_pred_hierarchy
        mode = mode or model.config.mode
        if args.hierarchy:
            _check_hierarchy(model, "pred", args.hierarchy)
    else:
        _require(args, "classes")
        classes = _classes(args.classes, "predicate")
    if args.hierarchy:
        hier = load_manual_hierarchy(_exists(args.hierarchy, "hierarchy file"), len(classes))
    report = evaluate(preds, bundles, classes, hier, mode or "predcls", args.label, h)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.save(args.out)
    if args.csv:
        Path(args.csv).write_text(f"# config_hash {h}\n" + report.to_csv())
    return 0


def cmd_corrupt(args, h: str) -> int:
    _require(args, "input", "output")
    types = IMPLEMENTED if args.types == "all" else tuple(t.strip() for t in args.types.split(","))
    try:
        sevs = [int(s) for s in args.severities.split(",")]
    except ValueError:
        raise ValidationError(f"bad severity list {args.severities!r}") from None
    specs = [(t, s) for t in types for s in sevs]
    _exists(args.input, "input directory")
    entries = corrupt_dataset(args.input, args.output, specs, args.seed, args.jobs, h)
    failed = [e for e in entries if "error" in e]
    for e in failed:
        log.error("%s: %s", e["src"], e["error"])
    return 2 if failed else 0


# ---------------------------------------------------------------- parser

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    g = p.add_argument_group("shared options")
    g.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    g.add_argument("--config", help="JSON file of flag defaults for this command")
    g.add_argument("--jobs", type=int, default=1, help="parallel workers; never changes outputs (default 1)")
    g.add_argument("--precision", type=int, choices=(32, 64), default=64, help="float width (default 64)")
    g.add_argument("--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="hikersgg", allow_abbrev=False,
                                     description="Hierarchical commonsense scene graph generation at desk scale.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_, allow_abbrev=False)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("discover-hierarchy", cmd_discover, "Discover a 3-level class hierarchy from embeddings and confusion.")
    p.add_argument("--embeddings", help="word-embedding text file")
    p.add_argument("--classes", help="JSON class list, or classes.json with entities/predicates")
    p.add_argument("--target", choices=("entity", "predicate"), default="predicate")
    p.add_argument("--confusion", help="confusion matrix JSON (not needed with --lambda 1)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5, help="semantic weight in [0, 1] (default 0.5)")
    p.add_argument("--groups", help="level-2,level-1 group counts, e.g. 10,3")
    p.add_argument("--out", help="output hierarchy JSON")

    p = add("build-kg", cmd_build_kg, "Build the commonsense graph with projected initial features.")
    p.add_argument("--classes", help="classes.json with entities/predicates")
    p.add_argument("--embeddings", help="word-embedding text file")
    p.add_argument("--relations", help="relation edge JSON")
    p.add_argument("--ent-hierarchy", help="entity hierarchy JSON")
    p.add_argument("--pred-hierarchy", help="predicate hierarchy JSON")
    p.add_argument("--dim", type=int, default=32, help="node feature width (default 32)")
    p.add_argument("--out", help="output graph JSON")

    p = add("synth", cmd_synth, "Generate a synthetic dataset with a known hierarchy.")
    d = SyntheticSpec()
    for k in SPEC_FLAGS:
        v = getattr(d, k)
        p.add_argument("--" + k.replace("_", "-"), type=type(v), default=v, help=f"(default {v})")
    p.add_argument("--ent-groups", default="4,2", help="entity level-2,level-1 groups (default 4,2)")
    p.add_argument("--pred-groups", default="4,2", help="predicate level-2,level-1 groups (default 4,2)")
    p.add_argument("--out", help="output directory")

    p = add("train", cmd_train, "Train on a dataset directory written by synth.")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--hierarchy-source", choices=("file", "manual", "discovered"), default="discovered",
                   help="hierarchy files, collapsed manual ones, or discovery at train time (default discovered)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5, help="discovery semantic weight (default 0.5)")
    p.add_argument("--ent-groups", help="entity group counts for discovery")
    p.add_argument("--pred-groups", help="predicate group counts for discovery")
    p.add_argument("--ent-hierarchy", help="explicit entity hierarchy JSON (overrides the source)")
    p.add_argument("--pred-hierarchy", help="explicit predicate hierarchy JSON (overrides the source)")
    p.add_argument("--no-ph", action="store_true", help="flat predicate head")
    p.add_argument("--no-eh", action="store_true", help="flat entity head")
    p.add_argument("--no-ar", action="store_true", help="disable adaptive refinement")
    p.add_argument("--no-ent-losses", action="store_true", help="drop entity losses in sgcls")
    p.add_argument("--greedy", action="store_true", help="greedy top-down decoding")
    p.add_argument("--mode", choices=("predcls", "sgcls"), default="predcls")
    p.add_argument("--dim", type=int, default=32, help="hidden width (default 32)")
    p.add_argument("--steps", type=int, default=3, help="propagation steps (default 3)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--lr-decay", type=float, default=0.1)
    p.add_argument("--lr-step", type=int, default=10)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--alpha", type=float, default=0.9, help="transition blend weight (default 0.9)")
    p.add_argument("--out", help="output directory")

    p = add("predict", cmd_predict, "Rank triplets for every image in a bundle file.")
    p.add_argument("--checkpoint", help="model.ckpt from train")
    p.add_argument("--bundles", help="detection bundle JSONL")
    p.add_argument("--feature-noise", type=float, default=0.0, help="Gaussian feature noise sigma (default 0)")
    p.add_argument("--ent-hierarchy", help="refuse unless the checkpoint holds this entity hierarchy")
    p.add_argument("--pred-hierarchy", help="refuse unless the checkpoint holds this predicate hierarchy")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-triplets", type=int, default=100)
    p.add_argument("--out", help="output predictions JSONL")

    p = add("eval", cmd_eval, "Score predictions: per-class recall, mR@k, multi-hop recall.")
    p.add_argument("--predictions", help="predictions JSONL")
    p.add_argument("--bundles", help="detection bundle JSONL with ground truth")
    p.add_argument("--checkpoint", help="checkpoint supplying classes, hierarchy and mode")
    p.add_argument("--classes", help="classes file when no checkpoint is given")
    p.add_argument("--hierarchy", help="predicate hierarchy for multi-hop recall")
    p.add_argument("--mode", choices=("predcls", "sgcls"))
    p.add_argument("--label", default="clean", help="report label (default clean)")
    p.add_argument("--out", help="output report JSON")
    p.add_argument("--csv", help="optional per-class CSV")

    p = add("corrupt", cmd_corrupt, "Write corrupted copies of every PPM image in a directory.")
    p.add_argument("--input", help="directory of .ppm images")
    p.add_argument("--output", help="output directory")
    p.add_argument("--types", default="all", help="comma list of corruption codes (default all)")
    p.add_argument("--severities", default="1,2,3,4,5", help="comma list (default 1,2,3,4,5)")
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = subs[args.command]
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            sub.error(f"cannot read --config {args.config}: {exc}")
        if not isinstance(doc, dict):
            sub.error("--config must hold a JSON object")
        known = {a.dest for a in sub._actions} - {"help", "config", "func"}
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = sorted(set(doc) - known)
        if unknown:
            sub.error("unknown keys in --config: " + ", ".join(unknown))
        sub.set_defaults(**doc)
        args = parser.parse_args(argv)
    if args.jobs < 1:
        subs[args.command].error("--jobs must be >= 1")
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    h = config_hash(args.command, args)
    try:
        return args.func(args, h)
    except (FloatingPointError, np.linalg.LinAlgError, OverflowError) as exc:
        print(f"hikersgg: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError) as exc:
        print(f"hikersgg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

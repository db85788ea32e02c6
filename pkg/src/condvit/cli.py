"""Command-line pipeline: gen-synthetic, train, embed, build-index, evaluate,
query and grad-check.

Stages talk through files only.  Settings resolve as built-in defaults, then
an optional JSON ``--config`` file, then explicit flags; the result is written
to ``resolved-config.json`` in the output directory, and feeding that file
back through ``--config`` repeats the run.

Exit status: 0 success, 2 usage or configuration error, 3 data error
(missing or malformed input, protocol violation), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from condvit import __version__
from condvit.errors import (
    CapacityError,
    ConfigError,
    DataError,
    IndexStateError,
    NumericError,
    NumericFailure,
    ProtocolError,
)

log = logging.getLogger("condvit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RESOLVED_CONFIG = "resolved-config.json"


# ---------------------------------------------------------------------------
# settings resolution
# ---------------------------------------------------------------------------


def _defaults(command: str) -> dict:
    from condvit.benchmark import BootstrapSpec
    from condvit.trainer import TrainConfig

    base = {"command": command, "seed": 0, "threads": 1}
    train_defaults = TrainConfig().to_dict()
    train_defaults.pop("seed")
    extra = {
        "gen-synthetic": {
            "out": None,
            "synthetic": {
                "products": 40,
                "distractors": 400,
                "categories_per_scene": 2,
                "train_products": None,
                "val_products": None,
                "val_distractors": None,
                "train_scenes_per_product": 4,
                "force": False,
            },
        },
        "train": {
            "data": None,
            "out": None,
            "captions": None,
            "val_split": "val",
            "model": {"preset": "tiny"},
            "train": train_defaults,
        },
        "embed": {
            "data": None,
            "out": None,
            "checkpoint": None,
            "captions": None,
            "split": "test",
            "condition_mode": None,
            "include_partial": False,
            "batch_size": 64,
        },
        "build-index": {"stores": [], "out": None, "num_categories": None},
        "evaluate": {
            "queries": None,
            "targets": None,
            "distractors": None,
            "out": None,
            "filtered": False,
            "formats": ["table", "json"],
            "bootstrap": {**BootstrapSpec().to_dict(), "seed": None},
        },
        "query": {
            "checkpoint": None,
            "index": None,
            "image": None,
            "category": None,
            "cond_vector": None,
            "k": 5,
            "out": None,
        },
        "grad-check": {"out": None, "precision": "float32", "model_entries": 4, "skip_model": False},
    }[command]
    base.update(copy.deepcopy(extra))
    return base


def _merge(into: dict, update: dict, where: str = "") -> None:
    for key, value in update.items():
        if key not in into:
            raise ConfigError(f"unknown setting {where}{key!r}")
        if isinstance(into[key], dict) and key != "model":
            if not isinstance(value, dict):
                raise ConfigError(f"setting {where}{key!r} must be a table")
            _merge(into[key], value, f"{where}{key}.")
        elif key == "model":
            if not isinstance(value, dict):
                raise ConfigError("setting 'model' must be a table")
            into[key].update(value)
        else:
            into[key] = value


def _flag_settings(ns: argparse.Namespace) -> dict:
    """Explicit flags as a nested dict; dests use dotted paths."""
    out: dict = {}
    for dest, value in vars(ns).items():
        if dest in ("config", "verbose") or value is None:
            continue
        node = out
        *parents, leaf = dest.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def resolve(ns: argparse.Namespace) -> dict:
    settings = _defaults(ns.command)
    if getattr(ns, "config", None):
        path = Path(ns.config)
        if not path.is_file():
            raise DataError(f"config file {path} not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        doc = dict(doc)
        file_cmd = doc.pop("command", ns.command)
        if file_cmd != ns.command:
            raise ConfigError(f"{path} was written for {file_cmd!r}, not {ns.command!r}")
        _merge(settings, doc)
    flags = _flag_settings(ns)
    flags.pop("command", None)
    _merge(settings, flags)
    return settings


def _write_resolved(out: Path, settings: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_CONFIG).write_text(json.dumps(settings, indent=2, sort_keys=True) + "\n")


def _require(settings: dict, *keys: str) -> None:
    missing = [k for k in keys if settings.get(k) in (None, [], "")]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} {p} not found")
    return p


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(s: dict) -> int:
    from condvit.synthetic import gen_dataset

    _require(s, "out")
    g = s["synthetic"]
    ds = gen_dataset(
        g["products"],
        g["distractors"],
        g["categories_per_scene"],
        s["seed"],
        s["out"],
        n_train_products=g["train_products"],
        n_val_products=g["val_products"],
        n_val_distractors=g["val_distractors"],
        train_scenes_per_product=g["train_scenes_per_product"],
        force=g["force"],
    )
    _write_resolved(Path(s["out"]), s)
    log.info("wrote %s (%s), manifest sha256 %s", ds.manifest_path, ds.counts, ds.checksum)
    return EXIT_OK


def _num_categories(manifest) -> int:
    cats = [r.category_id for r in manifest.records if r.category_id is not None]
    return max(cats) + 1 if cats else 0


def cmd_train(s: dict) -> int:
    from condvit.data import load_condition_vectors, load_manifest
    from condvit.datasets import EvalSplit, PairDataset
    from condvit.model import CondViT, ModelConfig, preset, save_checkpoint
    from condvit.trainer import TrainConfig, train

    _require(s, "data", "out")
    out = Path(s["out"])
    manifest = load_manifest(_existing(s["data"], "manifest"))
    tcfg = TrainConfig(**{**s["train"], "seed": s["seed"]})
    mode = tcfg.condition_mode
    captions = None
    if mode == "caption":
        _require(s, "captions")
        captions = load_condition_vectors(_existing(s["captions"], "condition-vector file"))

    model_settings = dict(s["model"])
    name = model_settings.pop("preset", "tiny")
    unknown = set(model_settings) - {f.name for f in dataclasses.fields(ModelConfig)}
    if unknown:
        raise ConfigError(f"unknown model setting(s) {sorted(unknown)}")
    model_settings.setdefault("num_categories", _num_categories(manifest) if mode == "category" else 0)
    if mode == "caption":
        model_settings.setdefault("external_cond_dim", captions.dim)
    mcfg = preset(name, **model_settings)
    if mode == "caption" and mcfg.external_cond_dim != captions.dim:
        raise ConfigError(
            f"caption vectors have dimension {captions.dim}, model expects {mcfg.external_cond_dim}"
        )
    s["model"] = {"preset": name, **mcfg.to_dict()}
    _write_resolved(out, s)

    size = mcfg.image_size
    dataset = PairDataset.from_manifest(manifest, "train", size, captions, tcfg.include_partial)
    val = None
    if s["val_split"] and manifest.split(s["val_split"]):
        val = EvalSplit.from_manifest(manifest, s["val_split"], size, captions, tcfg.include_partial)
    model = CondViT(mcfg, seed=s["seed"])

    with open(out / "train.log", "w") as fh:
        def on_epoch(rec):
            fh.write(rec.line() + "\n")
            fh.flush()

        result = train(model, dataset, tcfg, validation=val, on_epoch=on_epoch)
    save_checkpoint(
        result.model,
        out / "model.ckpt",
        extra={"condition_mode": mode, "train": tcfg.to_dict(), "tau": result.temperature.value},
    )
    metrics = result.metrics()
    with open(out / "metrics.txt", "w") as fh:
        for key in sorted(metrics):
            fh.write(f"{key}={metrics[key]}\n")
    log.info("saved %s (best epoch %d)", out / "model.ckpt", result.best_epoch)
    return EXIT_OK


def cmd_embed(s: dict) -> int:
    from condvit.benchmark import embed_gallery, embed_queries
    from condvit.data import load_condition_vectors, load_manifest
    from condvit.datasets import CONDITION_MODES, EvalSplit
    from condvit.index import EmbeddingStore, write_store
    from condvit.model import load_checkpoint

    _require(s, "data", "checkpoint", "out")
    model = load_checkpoint(_existing(s["checkpoint"], "checkpoint"))
    mode = s["condition_mode"] or model.metadata.get("condition_mode", "category")
    if mode not in CONDITION_MODES:
        raise ConfigError(f"condition mode {mode!r} not in {CONDITION_MODES}")
    s["condition_mode"] = mode
    manifest = load_manifest(_existing(s["data"], "manifest"))
    captions = None
    if mode == "caption":
        _require(s, "captions")
        captions = load_condition_vectors(_existing(s["captions"], "condition-vector file"))
    split = EvalSplit.from_manifest(manifest, s["split"], model.config.image_size, captions, s["include_partial"])
    if not split.target_ids:
        raise DataError(f"split {s['split']!r} has no products")
    out = Path(s["out"])
    _write_resolved(out, s)
    bs, th = s["batch_size"], s["threads"]
    q = embed_queries(model, split.query_images, split.conditions(mode), bs, th)
    write_store(out / "queries.cvem", EmbeddingStore(q, split.query_ids, split.query_targets, split.query_categories))
    t = embed_gallery(model, split.target_images, bs, th)
    write_store(out / "targets.cvem", EmbeddingStore(t, split.target_ids, split.target_products, split.target_categories))
    d = embed_gallery(model, split.distractor_images, bs, th)
    d = d.reshape(len(split.distractor_ids), model.config.output_dim)
    write_store(
        out / "distractors.cvem",
        EmbeddingStore(d, split.distractor_ids, [None] * len(d), split.distractor_categories),
    )
    log.info("embedded %d queries, %d targets, %d distractors", len(q), len(t), len(d))
    return EXIT_OK


def cmd_build_index(s: dict) -> int:
    from condvit.index import EmbeddingStore, GalleryIndex, read_store, write_store

    _require(s, "stores", "out")
    stores = [read_store(_existing(p, "embedding store")) for p in s["stores"]]
    index = GalleryIndex.from_store(EmbeddingStore.concat(stores), s["num_categories"])
    s["num_categories"] = index.num_categories
    out = Path(s["out"])
    _write_resolved(out, s)
    write_store(out / "gallery.cvem", index.to_store())
    meta = {"items": len(index), "dim": index.dim, "num_categories": index.num_categories}
    (out / "index.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("indexed %d items of dimension %d", len(index), index.dim)
    return EXIT_OK


def cmd_evaluate(s: dict) -> int:
    from condvit.benchmark import BootstrapSpec, bootstrap_eval
    from condvit.index import EmbeddingStore, read_store

    _require(s, "queries", "targets", "out")
    queries = read_store(_existing(s["queries"], "query store"))
    targets = read_store(_existing(s["targets"], "target store"))
    if s["distractors"]:
        distractors = read_store(_existing(s["distractors"], "distractor store"))
    else:
        distractors = EmbeddingStore(np.zeros((0, targets.dim), np.float32), [], [], [])
    b = dict(s["bootstrap"])
    if b["seed"] is None:
        b["seed"] = s["seed"]
    spec = BootstrapSpec(**b)
    if spec.distractor_levels == BootstrapSpec().distractor_levels:
        # the default levels apply where the pool can serve them; levels
        # asked for explicitly must fit or the run fails
        spec = spec.available(len(distractors))
    s["bootstrap"] = spec.to_dict()
    bad = [f for f in s["formats"] if f not in ("table", "json")]
    if bad:
        raise ConfigError(f"unknown report format(s) {bad}; choose from table, json")
    out = Path(s["out"])
    _write_resolved(out, s)
    report = bootstrap_eval(queries, targets, distractors, spec, filtered=s["filtered"], threads=s["threads"])
    if "json" in s["formats"]:
        (out / "report.json").write_text(report.to_json())
    if "table" in s["formats"]:
        table = report.to_table()
        (out / "report.txt").write_text(table)
        sys.stdout.write(table)
    return EXIT_OK


def _parse_cond_vector(spec: str):
    from condvit.data import load_condition_vectors

    path, sep, image_id = spec.rpartition(":")
    if not sep or not path or not image_id:
        raise ConfigError(f"--cond-vector expects FILE:ID, got {spec!r}")
    vectors = load_condition_vectors(_existing(path, "condition-vector file"))
    if image_id not in vectors:
        raise DataError(f"{path} has no vector for id {image_id!r}")
    return vectors.first(image_id)


def cmd_query(s: dict) -> int:
    from condvit.data import load_image
    from condvit.index import GalleryIndex, read_store
    from condvit.model import Categorical, ExternalVector, encode, load_checkpoint

    _require(s, "checkpoint", "index", "image")
    if (s["category"] is None) == (s["cond_vector"] is None):
        raise ConfigError("query needs exactly one of --category or --cond-vector")
    if s["k"] < 1:
        raise ConfigError("--k must be >= 1")
    model = load_checkpoint(_existing(s["checkpoint"], "checkpoint"))
    index_path = _existing(s["index"], "index")
    if index_path.is_dir():
        meta = json.loads((index_path / "index.json").read_text()) if (index_path / "index.json").exists() else {}
        store = read_store(_existing(index_path / "gallery.cvem", "gallery store"))
        num_categories = meta.get("num_categories")
    else:
        store, num_categories = read_store(index_path), None
    index = GalleryIndex.from_store(store, num_categories)
    image = load_image(_existing(s["image"], "image"), model.config.image_size)
    if s["category"] is not None:
        cond = Categorical(int(s["category"]))
        if not 0 <= cond.id < model.config.num_categories:
            raise ConfigError(
                f"category {cond.id} outside the model's 0..{model.config.num_categories - 1}"
            )
    else:
        cond = ExternalVector(_parse_cond_vector(s["cond_vector"]))
    result = index.search(encode(model, image, cond), s["k"])
    rows = [
        {
            "rank": r + 1,
            "item": result.ids[r],
            "product": index.product_ids[p],
            "category": index.categories[p],
            "score": result.scores[r],
        }
        for r, p in enumerate(result.positions)
    ]
    width = max(4, *(len(row["item"]) for row in rows))
    lines = [f"rank  {'item'.ljust(width)}  category  score"]
    for row in rows:
        cat = "-" if row["category"] is None else str(row["category"])
        lines.append(f"{row['rank']:>4}  {row['item'].ljust(width)}  {cat:>8}  {row['score']:.6f}")
    sys.stdout.write("\n".join(lines) + "\n")
    if s["out"]:
        out = Path(s["out"])
        _write_resolved(out, s)
        (out / "query.json").write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


def cmd_grad_check(s: dict) -> int:
    from condvit.gradsuite import TOLERANCE, format_results, run_suite

    if s["precision"] not in TOLERANCE:
        raise ConfigError(f"--precision must be one of {sorted(TOLERANCE)}")
    tol = TOLERANCE[s["precision"]]
    results = run_suite(s["precision"], s["seed"], s["model_entries"], not s["skip_model"])
    text = format_results(results, tol)
    sys.stdout.write(text)
    if s["out"]:
        out = Path(s["out"])
        _write_resolved(out, s)
        (out / "grad-check.txt").write_text(text)
    worst = max(r.max_rel_error for r in results)
    if worst > tol:
        log.error("max relative error %.3e exceeds %.0e", worst, tol)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "embed": cmd_embed,
    "build-index": cmd_build_index,
    "evaluate": cmd_evaluate,
    "query": cmd_query,
    "grad-check": cmd_grad_check,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _levels(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _formats(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condvit", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="JSON settings file (flags override it)")
        p.add_argument("--seed", type=int, help="random seed (default 0)")
        p.add_argument("--threads", type=int, help="worker threads (default 1)")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        return p

    p = command("gen-synthetic", "write a seeded synthetic dataset (manifest, PPM images, caption vectors)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--products", dest="synthetic.products", type=int, help="test products (default 40)")
    p.add_argument("--distractors", dest="synthetic.distractors", type=int, help="test distractors (default 400)")
    p.add_argument("--categories-per-scene", dest="synthetic.categories_per_scene", type=int)
    p.add_argument("--train-products", dest="synthetic.train_products", type=int)
    p.add_argument("--val-products", dest="synthetic.val_products", type=int)
    p.add_argument("--val-distractors", dest="synthetic.val_distractors", type=int)
    p.add_argument("--train-scenes-per-product", dest="synthetic.train_scenes_per_product", type=int)
    p.add_argument("--force", dest="synthetic.force", action="store_const", const=True,
                   help="replace an existing output directory")

    p = command("train", "train a CondViT on the manifest's train split")
    p.add_argument("--data", help="manifest file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--captions", help="condition-vector file (caption mode)")
    p.add_argument("--val-split", help="split used for checkpoint selection (default val)")
    p.add_argument("--preset", dest="model.preset", choices=["tiny", "b32", "b16"])
    p.add_argument("--insertion-depth", dest="model.insertion_depth", type=int)
    p.add_argument("--empty-token", dest="model.empty_token_mode", action="store_const", const=True,
                   help="embed the gallery with the learned empty condition")
    p.add_argument("--epochs", dest="train.epochs", type=int)
    p.add_argument("--lr", dest="train.max_lr", type=float, help="peak learning rate")
    p.add_argument("--warmup-epochs", dest="train.warmup_epochs", type=int)
    p.add_argument("--batch-size", dest="train.batch_size", type=int)
    p.add_argument("--weight-decay", dest="train.weight_decay", type=float)
    p.add_argument("--crop-min-area", dest="train.crop_min_area", type=float)
    p.add_argument("--hflip-prob", dest="train.hflip_prob", type=float)
    p.add_argument("--condition-mode", dest="train.condition_mode", choices=["category", "caption", "none"])
    p.add_argument("--include-partial", dest="train.include_partial", action="store_const", const=True)

    p = command("embed", "embed a split: conditional queries, unconditional targets and distractors")
    p.add_argument("--data", help="manifest file")
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--out", help="output directory")
    p.add_argument("--split", help="manifest split (default test)")
    p.add_argument("--captions", help="condition-vector file (caption mode)")
    p.add_argument("--condition-mode", choices=["category", "caption", "none"],
                   help="default: the mode the checkpoint was trained with")
    p.add_argument("--include-partial", action="store_const", const=True)
    p.add_argument("--batch-size", type=int)

    p = command("build-index", "merge embedding stores into one exact-search gallery")
    p.add_argument("--store", dest="stores", action="append", help="embedding store (repeatable, in order)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--num-categories", type=int, help="category label space (default: max label + 1)")

    p = command("evaluate", "bootstrapped R@1 / Cat@1 report from embedding stores")
    p.add_argument("--queries", help="query embedding store")
    p.add_argument("--targets", help="target embedding store")
    p.add_argument("--distractors", help="distractor embedding store")
    p.add_argument("--out", help="output directory")
    p.add_argument("--filtered", action="store_const", const=True, help="restrict search to the query category")
    p.add_argument("--format", dest="formats", type=_formats, help="table,json (default both)")
    p.add_argument("--levels", dest="bootstrap.distractor_levels", type=_levels,
                   help="comma-separated distractor counts")
    p.add_argument("--subsets", dest="bootstrap.n_query_subsets", type=int,
                   help="query (and paired distractor) subsets")
    p.add_argument("--queries-per-subset", dest="bootstrap.queries_per_subset", type=int)
    p.add_argument("--bootstrap-seed", dest="bootstrap.seed", type=int, help="default: --seed")

    p = command("query", "top-k gallery items for one image and condition")
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--index", help="build-index output directory or a gallery store")
    p.add_argument("--image", help="query image")
    p.add_argument("--category", type=int, help="categorical condition")
    p.add_argument("--cond-vector", help="FILE:ID external condition vector")
    p.add_argument("--k", type=int, help="results to return (default 5)")
    p.add_argument("--out", help="optional directory for query.json")

    p = command("grad-check", "finite-difference check of every op and the full training loss")
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--model-entries", type=int, help="entries differenced per model tensor (default 4)")
    p.add_argument("--skip-model", action="store_const", const=True)
    p.add_argument("--out", help="optional directory for grad-check.txt")
    parser.commands = sub.choices
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns, extra = parser.parse_known_args(argv)
    if extra:
        # report against the subcommand so its usage line lists the valid flags
        parser.commands[ns.command].error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(
        level=logging.DEBUG if ns.verbose else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
        force=True,
    )
    settings = resolve(ns)
    if settings["threads"] < 1:
        raise ConfigError("--threads must be >= 1")
    return COMMANDS[ns.command](settings)


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (ConfigError, CapacityError) as exc:
        print(f"condvit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ProtocolError, IndexStateError, FileNotFoundError, FileExistsError) as exc:
        print(f"condvit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NumericError) as exc:
        print(f"condvit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

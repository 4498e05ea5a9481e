"""``geovalue`` command line: pipeline stages driven by an INI config file.

Stages, in dependency order::

    preprocess -> fetch -> encode -> train -> eval -> rank

``run-all`` walks the chain and skips a stage when every output exists and is
at least as new as every input. Flags override the matching config keys; the
effective config is written to ``<out>/effective_config.ini``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import encoder as enc
from . import evaluation as ev
from . import extratrees as et
from . import imagery as im
from . import neural as nn
from . import tabular as tb

logger = logging.getLogger("geovalue")

STAGES = ("preprocess", "fetch", "encode", "train", "eval", "rank")
NEURAL_KINDS = nn.TOPOLOGIES
MODEL_KINDS = ("extratrees", *NEURAL_KINDS)
SPLIT_FILES = {"train": "train.gvfm", "val": "val.gvfm", "test": "test.gvfm"}

DEFAULTS = {
    "paths": {"csv": "", "schema": "", "cache": "cache", "store": "", "out": "out"},
    "tabular": {"seed": "0", "fractions": "0.90,0.05,0.05", "delimiter": ","},
    "imagery": {"zoom": str(im.DEFAULT_ZOOM), "size": str(im.DEFAULT_SIZE),
                "daily_limit": str(im.DEFAULT_DAILY_LIMIT), "concurrency": "8",
                "maptype": "satellite", "template": im.DEFAULT_TEMPLATE,
                "retry_backoff": "1,2,4"},
    "encoder": {"backend": "hash", "model_path": "", "layer": "", "layout": "NHWC",
                "scaling": "none", "batch_size": "32", "seed": "0"},
    "train": {"models": ",".join(MODEL_KINDS), "seed": "0", "epochs": "200",
              "batch_size": "1024", "lr0": "0.0005", "alpha": "0.0001", "beta1": "0.9",
              "beta2": "0.999", "epsilon": "1e-8", "l2": "0.1", "dropout": "0.3,0.2",
              "feature_hidden": "128,64", "image_hidden": "512,128", "head_hidden": "64",
              "trees": "100", "k_features": "", "min_samples_split": "2", "max_depth": ""},
    "eval": {"k": "5", "rank_split": "test"},
}

# flag dest -> (section, key)
FLAG_KEYS = {
    "csv": ("paths", "csv"), "schema": ("paths", "schema"), "cache_dir": ("paths", "cache"),
    "store": ("paths", "store"), "out": ("paths", "out"),
    "split_seed": ("tabular", "seed"), "fractions": ("tabular", "fractions"),
    "zoom": ("imagery", "zoom"), "size": ("imagery", "size"),
    "daily_limit": ("imagery", "daily_limit"), "concurrency": ("imagery", "concurrency"),
    "template": ("imagery", "template"), "maptype": ("imagery", "maptype"),
    "backend": ("encoder", "backend"), "model_path": ("encoder", "model_path"),
    "model": ("train", "models"), "trees": ("train", "trees"), "seed": ("train", "seed"),
    "epochs": ("train", "epochs"), "k": ("eval", "k"),
}


class PipelineError(Exception):
    def __init__(self, message: str, code: str = "error", **fields):
        super().__init__(message)
        self.code = code
        self.fields = fields

    def line(self) -> str:
        return json.dumps({"error": self.code, "message": str(self), **self.fields}, sort_keys=True)


class MissingArtifact(PipelineError):
    def __init__(self, stage: str, path: Path, producer: str):
        super().__init__(f"{stage} needs {path}; run the '{producer}' stage first",
                         "missing_artifact", stage=stage, missing_stage=producer, path=str(path))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "usage", "message": message}) + "\n")
        sys.exit(2)


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


@dataclass
class Pipeline:
    cfg: configparser.ConfigParser
    base: Path

    def get(self, section: str, key: str) -> str:
        return self.cfg.get(section, key)

    def path(self, key: str) -> Path | None:
        value = self.get("paths", key)
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    @property
    def out(self) -> Path:
        return self.path("out")

    @property
    def features_dir(self) -> Path:
        return self.out / "features"

    def split_path(self, split: str) -> Path:
        return self.features_dir / SPLIT_FILES[split]

    @property
    def meta_path(self) -> Path:
        return self.features_dir / "meta.json"

    @property
    def tiles_manifest(self) -> Path:
        return self.out / "tiles.tsv"

    @property
    def store_path(self) -> Path:
        return self.path("store") or self.out / "embeddings.gves"

    def model_path(self, kind: str) -> Path:
        suffix = "gvet" if kind == "extratrees" else "gvnn"
        return self.out / "models" / f"{kind}.{suffix}"

    @property
    def models(self) -> list[str]:
        kinds = [k.strip() for k in self.get("train", "models").split(",") if k.strip()]
        bad = [k for k in kinds if k not in MODEL_KINDS]
        if bad:
            raise PipelineError(f"unknown model kind(s) {bad}; choose from {MODEL_KINDS}",
                                "invalid_config")
        return kinds

    def needs_images(self) -> bool:
        return any(k in ("I", "FI") for k in self.models)

    def train_section(self, kind: str) -> dict[str, str]:
        """``[train]`` overlaid with ``[train.<kind>]`` when present."""
        merged = dict(self.cfg["train"])
        name = f"train.{kind}"
        if self.cfg.has_section(name):
            merged.update(self.cfg[name])
        return merged

    def train_config(self, kind: str) -> nn.TrainConfig:
        s = self.train_section(kind)
        return nn.TrainConfig(
            lr0=float(s["lr0"]), alpha=float(s["alpha"]), beta1=float(s["beta1"]),
            beta2=float(s["beta2"]), epsilon=float(s["epsilon"]), l2=float(s["l2"]),
            dropout=_floats(s["dropout"]), batch_size=int(s["batch_size"]),
            epochs=int(s["epochs"]), seed=int(s["seed"]))

    def arch(self, kind: str, n_features: int, image_dim: int) -> nn.ArchConfig:
        s = self.train_section(kind)
        return nn.ArchConfig((n_features, *_ints(s["feature_hidden"])),
                             (image_dim, *_ints(s["image_hidden"])),
                             _ints(s["head_hidden"]))

    def forest_params(self) -> et.ForestParams:
        s = self.cfg["train"]
        return et.ForestParams(
            n_trees=s.getint("trees"),
            k_features=int(s.get("k_features")) if s.get("k_features") else None,
            min_samples_split=s.getint("min_samples_split"),
            max_depth=int(s.get("max_depth")) if s.get("max_depth") else None,
            seed=s.getint("seed"))


@dataclass
class Stage:
    name: str
    inputs: Callable[[Pipeline], list[tuple[Path, str]]]  # (path, producing stage)
    outputs: Callable[[Pipeline], list[Path]]
    run: Callable[[Pipeline], None]


def _features(p: Pipeline) -> list[tuple[Path, str]]:
    return [(p.split_path(s), "preprocess") for s in SPLIT_FILES] + [(p.meta_path, "preprocess")]


def _require(stage: str, inputs: list[tuple[Path, str]]) -> None:
    for path, producer in inputs:
        if not path.exists():
            if producer == "config":
                raise PipelineError(f"{stage}: configured input {path} does not exist",
                                    "invalid_config", stage=stage, path=str(path))
            raise MissingArtifact(stage, path, producer)


def _load_splits(p: Pipeline) -> dict[str, tb.FeatureMatrix]:
    return {s: tb.read_feature_matrix(p.split_path(s)) for s in SPLIT_FILES}


# preprocess ---------------------------------------------------------------

def _preprocess_inputs(p):
    csv_path, schema_path = p.path("csv"), p.path("schema")
    if csv_path is None or schema_path is None:
        raise PipelineError("paths.csv and paths.schema must be set", "invalid_config")
    return [(csv_path, "config"), (schema_path, "config")]


def _preprocess_outputs(p):
    return [p.split_path(s) for s in SPLIT_FILES] + [p.meta_path]


def run_preprocess(p: Pipeline) -> None:
    schema = tb.load_schema(p.path("schema"))
    raw = tb.load_csv(p.path("csv"), delimiter=p.get("tabular", "delimiter"))
    stats: dict = {}
    cleaned = tb.clean(raw, schema, stats)
    data = tb.preprocess(cleaned, schema, seed=int(p.get("tabular", "seed")),
                         fractions=_floats(p.get("tabular", "fractions")))
    p.features_dir.mkdir(parents=True, exist_ok=True)
    for split in SPLIT_FILES:
        tb.write_feature_matrix(getattr(data, split), p.split_path(split))
    meta = data.metadata()
    meta["clean"] = {k: int(v) for k, v in sorted(stats.items())}
    p.meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True))
    logger.info("preprocess: %s", meta["sizes"])


# fetch --------------------------------------------------------------------

def _budget_file(p: Pipeline) -> Path:
    return p.path("cache") / "budget.json"


def run_fetch(p: Pipeline) -> None:
    splits = _load_splits(p)
    zoom, size = int(p.get("imagery", "zoom")), int(p.get("imagery", "size"))
    maptype = p.get("imagery", "maptype")
    cache = p.path("cache")
    cache.mkdir(parents=True, exist_ok=True)
    budget = im.RateBudget(int(p.get("imagery", "daily_limit")))
    bf = _budget_file(p)
    if bf.exists():
        saved = json.loads(bf.read_text())
        budget.window_start, budget.consumed = saved["window_start"], saved["consumed"]
    fetcher = im.TileFetcher(cache, budget, p.get("imagery", "template"),
                             backoff=_floats(p.get("imagery", "retry_backoff")))
    ids, reqs = [], []
    for split in SPLIT_FILES:
        fm = splits[split]
        for rid, lat, lon in zip(fm.ids, fm.lat, fm.lon):
            ids.append(rid)
            reqs.append(im.TileRequest(float(lat), float(lon), zoom, size, size, maptype))
    results = fetcher.fetch_many(reqs, int(p.get("imagery", "concurrency")))
    bf.write_text(json.dumps({"window_start": budget.window_start, "consumed": budget.consumed}))
    failures = [(rid, r) for rid, r in zip(ids, results) if isinstance(r, Exception)]
    lines = [f"{rid}\t{fetcher.cached_path(req)}\n"
             for rid, req, r in zip(ids, reqs, results) if not isinstance(r, Exception)]
    if failures:
        rid, exc = failures[0]
        raise PipelineError(f"{len(failures)} of {len(ids)} tiles failed; first {rid}: {exc}",
                            "fetch_failed", stage="fetch", failed=len(failures))
    p.tiles_manifest.write_text("".join(lines))
    logger.info("fetch: %d tiles ready, %d requests left in window", len(lines), budget.remaining)


def _read_manifest(path: Path) -> dict[str, Path]:
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            rid, tile = line.split("\t")
            out[rid] = Path(tile)
    return out


# encode -------------------------------------------------------------------

def _backend(p: Pipeline) -> enc.EmbeddingBackend:
    s = p.cfg["encoder"]
    model_path = s.get("model_path")
    if model_path and not Path(model_path).is_absolute():
        model_path = str(p.base / model_path)
    return enc.make_backend(s.get("backend"), model_path=model_path, layer=s.get("layer"),
                            layout=s.get("layout"), scaling=s.get("scaling"),
                            seed=s.get("seed"))


def run_encode(p: Pipeline) -> None:
    tiles = _read_manifest(p.tiles_manifest)
    backend = _backend(p)
    batch_size = int(p.get("encoder", "batch_size"))
    with enc.EmbeddingStore.open_or_create(p.store_path, backend.output_dim) as store:
        todo = [rid for rid in tiles if rid not in store]
        for start in range(0, len(todo), batch_size):
            chunk = todo[start:start + batch_size]
            tensors = [im.decode_preprocess(tiles[rid].read_bytes()) for rid in chunk]
            vecs = enc.encode_batch(backend, tensors, batch_size)
            store.write(enc.Embedding(rid, v) for rid, v in zip(chunk, vecs))
        logger.info("encode: %d new embeddings, %d total", len(todo), len(store))


# train --------------------------------------------------------------------

def _train_inputs(p):
    inputs = _features(p)
    if p.needs_images():
        inputs.append((p.store_path, "encode"))
    return inputs


def _dataset(kind: str, fm: tb.FeatureMatrix, store) -> nn.Dataset:
    return nn.make_dataset(kind, fm.ids, fm.X, fm.y, store.vector if store else None)


def _open_store(p: Pipeline, kinds) -> enc.EmbeddingStore | None:
    if not any(k in ("I", "FI") for k in kinds):
        return None
    if not p.store_path.exists():
        raise MissingArtifact("train", p.store_path, "encode")
    return enc.EmbeddingStore.open(p.store_path)


def run_train(p: Pipeline) -> None:
    splits = _load_splits(p)
    kinds = p.models
    store = _open_store(p, kinds)
    (p.out / "models").mkdir(parents=True, exist_ok=True)
    try:
        for kind in kinds:
            t0 = time.perf_counter()
            if kind == "extratrees":
                forest = et.fit(splits["train"].X, splits["train"].y, p.forest_params())
                et.save_forest(forest, p.model_path(kind))
            else:
                try:
                    train_set = _dataset(kind, splits["train"], store)
                    val_set = _dataset(kind, splits["val"], store)
                except nn.MissingEmbeddingError as exc:
                    raise PipelineError(f"train: {exc.args[0]}; rerun 'encode'", "missing_artifact",
                                        stage="train", missing_stage="encode") from exc
                image_dim = store.dim if store else enc.EMBEDDING_DIM
                cfg = p.train_config(kind)
                model = nn.build_model(kind, p.arch(kind, splits["train"].X.shape[1], image_dim),
                                       seed=cfg.seed, dropout=cfg.dropout)
                result = nn.train(model, train_set, val_set, cfg)
                nn.save_model(result.model, p.model_path(kind), result.steps)
                nn.write_history(result.history, p.out / "models" / f"{kind}_history.csv")
            logger.info("train: %s done in %.1fs", kind, time.perf_counter() - t0)
    finally:
        if store is not None:
            store.close()


# eval / rank --------------------------------------------------------------

def _predict(p: Pipeline, kind: str, fm: tb.FeatureMatrix, store) -> np.ndarray:
    if kind == "extratrees":
        return et.load_forest(p.model_path(kind)).predict(fm.X)
    model, _ = nn.load_model(p.model_path(kind))
    data = _dataset(kind, fm, store)
    return model.predict(data.X_feat, data.X_img)


def _eval_inputs(p):
    inputs = _features(p) + [(p.model_path(k), "train") for k in p.models]
    if p.needs_images():
        inputs.append((p.store_path, "encode"))
    return inputs


def run_eval(p: Pipeline) -> None:
    splits = _load_splits(p)
    kinds = p.models
    store = _open_store(p, kinds)
    try:
        reports = []
        for kind in kinds:
            preds = {s: _predict(p, kind, fm, store) for s, fm in splits.items()}
            reports.append(ev.evaluate(kind, preds, {s: fm.y for s, fm in splits.items()}))
    finally:
        if store is not None:
            store.close()
    ev.write_results_table(reports, p.out)
    sys.stdout.write(ev.format_table(reports))


def _rank_inputs(p):
    return _features(p) + [(p.model_path("F"), "train"), (p.model_path("FI"), "train"),
                           (p.store_path, "encode")]


def run_rank(p: Pipeline) -> None:
    split = p.get("eval", "rank_split")
    fm = tb.read_feature_matrix(p.split_path(split))
    with enc.EmbeddingStore.open(p.store_path) as store:
        pred_f = _predict(p, "F", fm, store)
        pred_fi = _predict(p, "FI", fm, store)
    improvements = ev.rank_improvements(fm.ids, pred_f, pred_fi, fm.y, int(p.get("eval", "k")))
    tiles = _read_manifest(p.tiles_manifest) if p.tiles_manifest.exists() else None
    ev.write_improvements(improvements, p.out, tiles)


STAGE_TABLE = {
    "preprocess": Stage("preprocess", _preprocess_inputs, _preprocess_outputs, run_preprocess),
    "fetch": Stage("fetch", _features, lambda p: [p.tiles_manifest], run_fetch),
    "encode": Stage("encode", lambda p: [(p.tiles_manifest, "fetch")],
                    lambda p: [p.store_path], run_encode),
    "train": Stage("train", _train_inputs, lambda p: [p.model_path(k) for k in p.models], run_train),
    "eval": Stage("eval", _eval_inputs, lambda p: [p.out / "report.csv", p.out / "report.txt"],
                  run_eval),
    "rank": Stage("rank", _rank_inputs, lambda p: [p.out / "improvements.csv"], run_rank),
}


def is_fresh(stage: Stage, p: Pipeline) -> bool:
    """True when all outputs exist and none is older than any input."""
    outputs = stage.outputs(p)
    if not all(o.exists() for o in outputs):
        return False
    inputs = [path for path, _ in stage.inputs(p)]
    if not all(i.exists() for i in inputs):
        return False
    newest_in = max((i.stat().st_mtime_ns for i in inputs), default=0)
    return min(o.stat().st_mtime_ns for o in outputs) >= newest_in


def stages_for_run_all(p: Pipeline) -> list[str]:
    names = list(STAGES)
    if not p.needs_images():
        names = [n for n in names if n not in ("fetch", "encode", "rank")]
    elif not {"F", "FI"} <= set(p.models):
        names.remove("rank")
    return names


def run_stage(name: str, p: Pipeline) -> None:
    stage = STAGE_TABLE[name]
    _require(name, stage.inputs(p))
    stage.run(p)


def run_all(p: Pipeline) -> list[str]:
    """Run the stage chain; returns the names of stages that actually ran."""
    ran = []
    for name in stages_for_run_all(p):
        stage = STAGE_TABLE[name]
        if is_fresh(stage, p):
            logger.info("%s: up to date, skipped", name)
            continue
        run_stage(name, p)
        ran.append(name)
    return ran


def load_config(path: str | None, args: argparse.Namespace) -> Pipeline:
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(DEFAULTS)
    base = Path.cwd()
    if path:
        cfg_path = Path(path)
        if not cfg_path.is_file():
            raise PipelineError(f"config file {path} not found", "invalid_config")
        try:
            cfg.read(cfg_path)
        except configparser.Error as exc:
            raise PipelineError(f"cannot parse {path}: {exc}", "invalid_config") from exc
        base = cfg_path.resolve().parent
    for dest, (section, key) in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg.set(section, key, str(value))
    return Pipeline(cfg, base)


def _echo_config(p: Pipeline) -> None:
    p.out.mkdir(parents=True, exist_ok=True)
    with open(p.out / "effective_config.ini", "w") as f:
        p.cfg.write(f)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    g = common.add_argument_group("overrides")
    g.add_argument("--out")
    g.add_argument("--csv")
    g.add_argument("--schema")
    g.add_argument("--split-seed", type=int)
    g.add_argument("--fractions")
    g.add_argument("--zoom", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--concurrency", type=int)
    g.add_argument("--daily-limit", type=int)
    g.add_argument("--cache-dir")
    g.add_argument("--template", help="tile URL template; the key comes from $" + im.KEY_ENV)
    g.add_argument("--maptype")
    g.add_argument("--backend", choices=["hash", "onnx"])
    g.add_argument("--model-path")
    g.add_argument("--store")
    g.add_argument("--model", help="model kind(s), comma separated: " + ",".join(MODEL_KINDS))
    g.add_argument("--trees", type=int)
    g.add_argument("--seed", type=int, help="training seed")
    g.add_argument("--epochs", type=int)
    g.add_argument("--k", type=int, help="records per improvement group")

    parser = _Parser(prog="geovalue", description="House-price estimation from tabular "
                     "features and satellite-image embeddings.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "preprocess": "clean, encode, normalize and split the assessor CSV",
        "fetch": "download satellite tiles into the cache",
        "encode": "embed cached tiles into the embedding store",
        "train": "train extra-trees and F / I / F+I networks",
        "eval": "write report.csv / report.txt",
        "rank": "rank records by how much F+I improves on F",
        "run-all": "run every stage whose outputs are stale",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def execute(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        p = load_config(args.config, args)
        p.models  # validates the model list early
        _echo_config(p)
        if args.command == "run-all":
            run_all(p)
        else:
            run_stage(args.command, p)
    except PipelineError as exc:
        sys.stderr.write(exc.line() + "\n")
        return 2 if isinstance(exc, MissingArtifact) or exc.code == "invalid_config" else 1
    except (tb.TableError, ValueError, im.ImageryError, enc.EncoderError, OSError,
            FloatingPointError, KeyError) as exc:
        err = PipelineError(str(exc), type(exc).__name__, stage=args.command)
        sys.stderr.write(err.line() + "\n")
        return 1
    return 0


def main() -> None:
    sys.exit(execute())


if __name__ == "__main__":
    main()

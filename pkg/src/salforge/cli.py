"""Command-line entry point.

    salforge gen-data      --config gen.json   --out DIR
    salforge train         --config train.json --data DATA --out DIR
    salforge saliency      --model M.ckpt --data DATA --method ID [--method ID ...] --out DIR
    salforge pointing-game --model M.ckpt --data DATA --method ID --tau 15 --out DIR
    salforge experiment    --config grid.json  --out DIR [--workers N]
    salforge report        --input report.json --out DIR [--model M.ckpt --data DATA --method ID]

Exit codes: 0 success, 1 usage or validation error, 2 runtime error.
Seed precedence: ``--seed`` flag, then ``SALFORGE_SEED``, then the config's ``seed``.
Every run leaves ``run-manifest.json`` and the effective ``config.json`` in
its output directory; ``salforge <cmd> --config DIR/config.json`` reruns it.
"""

import argparse
import csv
import hashlib
import io
import itertools
import json
import os
import platform
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

import salforge
from salforge import evalharness, kernels
from salforge.errors import ConfigError, ParseError, ValidationError
from salforge.micronet import STOCK_VARIANTS, ModelConfig, build_model, load_checkpoint
from salforge.saliency import SaliencyOptions, compute_saliency_batch, write_map_pgm, write_map_raw
from salforge.synthdata import PRESETS as DATA_PRESETS
from salforge.synthdata import GenSpec, generate_dataset, load_split, read_manifest
from salforge.train import PRESETS as TRAIN_PRESETS
from salforge.train import TrainConfig, evaluate_classifier, train_loop

COMMANDS = ("gen-data", "train", "saliency", "pointing-game", "experiment", "report")
METHOD_IDS = ("ixg", "gbp", "gradcam", "guided-gradcam") + tuple(
    f"normgrad-{k}-{c}" for k in ("bias", "scaling", "conv1x1", "conv3x3") for c in ("single", "combined"))
SEED_ENV = "SALFORGE_SEED"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config schemas (unknown keys rejected everywhere)
# --------------------------------------------------------------------------

_seed = {"type": "integer", "minimum": 0}
_pair_int = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}
_fractions = {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3}

GEN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": sorted(DATA_PRESETS)},
        "name": {"type": "string"},
        "n_per_class": {"type": "integer", "minimum": 1},
        "image_size": {"type": "integer", "minimum": 16},
        "objects_per_image": _pair_int,
        "object_size_range": _pair_int,
        "contrast_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "contrast_floor": {"type": "number", "minimum": 0},
        "group_size": {"type": "integer", "minimum": 1},
        "seed": _seed,
        "fractions": _fractions,
        "split_seed": _seed,
    },
}

TRAIN_FIELDS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "lr_decay_factor": {"type": "number", "exclusiveMinimum": 0},
        "lr_decay_every": {"type": "integer", "minimum": 1},
        "augment": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "boolean"} for k in ("hflip", "intensity_jitter", "affine")},
        },
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "arch": {"enum": sorted(STOCK_VARIANTS)},
        "input_size": {"type": "integer", "minimum": 16},
        "preset": {"enum": sorted(TRAIN_PRESETS)},
        "train": TRAIN_FIELDS_SCHEMA,
        "seed": _seed,
    },
}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["archs", "methods"],
    "properties": {
        "dataset": GEN_SCHEMA,
        "data": {"type": "string"},
        "archs": {"type": "array", "items": {"enum": sorted(STOCK_VARIANTS)}, "minItems": 1, "uniqueItems": True},
        "methods": {"type": "array", "items": {"enum": list(METHOD_IDS)}, "minItems": 1, "uniqueItems": True},
        "conditions": {"type": "array", "items": {"enum": list(evalharness.CONDITIONS)}, "minItems": 1,
                       "uniqueItems": True},
        "n_seeds": {"type": "integer", "minimum": 1},
        "seed": _seed,
        "preset": {"enum": sorted(TRAIN_PRESETS)},
        "train": TRAIN_FIELDS_SCHEMA,
        "donor": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_per_class": {"type": "integer", "minimum": 2},
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "tau": {"type": "integer", "minimum": 0},
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "smoothed": {"type": "boolean"},
        "split": {"enum": ["train", "val", "test", "all"]},
        "input_size": {"type": "integer", "minimum": 16},
        "workers": {"type": "integer", "minimum": 1},
    },
}

EXPERIMENT_DEFAULTS = {
    "conditions": list(evalharness.CONDITIONS),
    "n_seeds": 3,
    "seed": 0,
    "preset": "desk",
    "train": {},
    "donor": {},
    "tau": 15,
    "sigma": 1.0,
    "smoothed": False,
    "split": "test",
    "input_size": 64,
}

SCHEMAS = {"gen-data": GEN_SCHEMA, "train": TRAIN_SCHEMA, "experiment": EXPERIMENT_SCHEMA}


def validate_config(command, config):
    try:
        jsonschema.validate(config, SCHEMAS[command])
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValidationError(f"{command} config invalid at {where}: {e.message}") from None
    if command == "experiment" and ("data" in config) == ("dataset" in config):
        raise ValidationError("experiment config needs exactly one of 'data' (a dataset directory) or 'dataset'")
    if "fractions" in config and abs(sum(config["fractions"]) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must sum to 1, got {config['fractions']}")
    return config


def read_config(path):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: top level must be a JSON object")
    return doc


def resolve_seed(flag, config, default=0):
    """Flag beats ``SALFORGE_SEED`` beats the config's ``seed``."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            value = int(env)
        except ValueError:
            raise ValidationError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        if value < 0:
            raise ValidationError(f"{SEED_ENV} must be >= 0, got {value}")
        return value
    return int(config.get("seed", default))


# execution knobs that cannot change results; left out of the config hash
EXECUTION_KEYS = ("workers",)


def config_hash(config):
    config = {k: v for k, v in config.items() if k not in EXECUTION_KEYS}
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def versions():
    import numba

    return {
        "salforge": salforge.__version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "jsonschema": metadata.version("jsonschema"),
        "kernel_backend": kernels.BACKEND,
    }


def write_run_manifest(out, command, config, seeds, inputs=None, status="ok", error=None):
    """``run-manifest.json`` plus the effective ``config.json``; no timestamps, so reruns match."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    doc = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "inputs": inputs or {},
        "versions": versions(),
        "rerun": f"salforge {command} --config {out / 'config.json'} --out {out}",
        "status": status,
    }
    if error is not None:
        doc["error"] = error
    path = out / "run-manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _merge_flag(config, key, value):
    if value is not None:
        config[key] = value


def _data_dir(path):
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise ValidationError(f"{path} is not a dataset directory (no manifest.json)")
    return path


def cmd_gen_data(args):
    config = validate_config("gen-data", read_config(args.config))
    config["seed"] = resolve_seed(args.seed, config)
    _merge_flag(config, "n_per_class", args.n_per_class)
    validate_config("gen-data", config)
    fractions = config.get("fractions", [0.8, 0.1, 0.1])
    config["fractions"] = fractions
    spec_keys = set(GenSpec.__dataclass_fields__)
    spec = GenSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in config.items() if k in spec_keys})
    out = Path(args.out)

    def work():
        manifest = generate_dataset(spec, out, fractions=fractions, split_seed=config.get("split_seed"))
        return {"n_samples": len(manifest.records),
                "split_sizes": {k: len(v) for k, v in (manifest.splits or {}).items()}}

    return _run(out, "gen-data", config, {"data": config["seed"]}, work)


def train_config_from(config, seed):
    fields = dict(TRAIN_PRESETS[config.get("preset", "desk")])
    fields.update(config.get("train", {}))
    fields["seed"] = seed
    return TrainConfig(**fields)


def cmd_train(args):
    config = validate_config("train", read_config(args.config))
    config["seed"] = resolve_seed(args.seed, config)
    config.setdefault("arch", "micro-res")
    data = _data_dir(args.data)
    tc = train_config_from(config, config["seed"])
    out = Path(args.out)

    def work():
        dataset = {s: load_split(data, s) for s in ("train", "val", "test")}
        model = build_model(ModelConfig(config["arch"], input_size=config.get("input_size", 64), seed=config["seed"]))
        report = train_loop(model, dataset, tc, checkpoint_path=out / "model.ckpt")
        doc = report.to_dict()
        if dataset["test"]:
            acc, auc = evaluate_classifier(model, dataset["test"])
            doc["test_accuracy"], doc["test_auc"] = acc, auc
        (out / "train_report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return {"best_epoch": report.best_epoch, "best_val_accuracy": report.best_val_accuracy}

    inputs = {"data": str(data), "data_manifest_sha256": _manifest_hash(data)}
    return _run(out, "train", config, {"model": config["seed"], "train": tc.seed}, work, inputs)


def _manifest_hash(data):
    return hashlib.sha256((Path(data) / "manifest.json").read_bytes()).hexdigest()


def _flag_config(args, keys):
    """Config for flag-driven commands, optionally seeded from ``--config``."""
    config = read_config(args.config) if args.config else {}
    for k in keys:
        v = getattr(args, k.replace("-", "_"), None)
        if v is not None:
            config[k] = v
    return config


def _check_methods(methods):
    bad = [m for m in methods if m not in METHOD_IDS]
    if bad:
        raise ValidationError(f"unknown saliency method(s) {bad}; expected one of {list(METHOD_IDS)}")


def _require(config, keys, command):
    missing = [k for k in keys if not config.get(k)]
    if missing:
        raise UsageError(f"{command}: missing required option(s) {', '.join('--' + k for k in missing)}")


def cmd_saliency(args):
    config = _flag_config(args, ["model", "data", "method", "split", "smoothed", "sigma", "format", "limit",
                                 "target_policy"])
    _require(config, ["model", "data", "method"], "saliency")
    _check_methods(config["method"])
    config.setdefault("split", "test")
    config.setdefault("format", "pgm")
    config.setdefault("sigma", 1.0)
    data = _data_dir(config["data"])
    if not Path(config["model"]).is_file():
        raise ValidationError(f"checkpoint {config['model']} not found")
    out = Path(args.out)

    def work():
        model, _ = load_checkpoint(config["model"])
        model.eval()
        samples = load_split(data, config["split"])[: config.get("limit")]
        opts = SaliencyOptions(sigma=config["sigma"], target_policy=config.get("target_policy") or "ground-truth")
        variants = (bool(config.get("smoothed")),)
        maps = compute_saliency_batch(model, np.stack([s.image for s in samples]), [s.label for s in samples],
                                      config["method"], variants, options=opts)
        rows = []
        for (mid, _), smaps in sorted(maps.items()):
            d = out / "maps" / mid
            d.mkdir(parents=True, exist_ok=True)
            for s, m in zip(samples, smaps):
                if config["format"] in ("pgm", "both"):
                    write_map_pgm(m, d / f"{s.id}.pgm")
                if config["format"] in ("raw", "both"):
                    write_map_raw(m, d / f"{s.id}.f64")
                x, y = evalharness.argmax_xy(m.values)
                rows.append([mid, s.id, s.label, x, y])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method", "id", "label", "argmax_x", "argmax_y"))
        w.writerows(rows)
        (out / "maps.csv").write_text(buf.getvalue())
        return {"n_maps": len(rows)}

    inputs = {"model_sha256": _file_hash(config["model"]), "data_manifest_sha256": _manifest_hash(data)}
    return _run(out, "saliency", config, {}, work, inputs)


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_pointing_game(args):
    config = _flag_config(args, ["model", "data", "method", "tau", "split", "smoothed", "sigma", "target_policy"])
    _require(config, ["model", "data", "method"], "pointing-game")
    _check_methods(config["method"])
    config.setdefault("tau", 15)
    config.setdefault("split", "test")
    config.setdefault("sigma", 1.0)
    config.setdefault("smoothed", False)
    if config["tau"] < 0:
        raise ValidationError(f"--tau must be >= 0, got {config['tau']}")
    data = _data_dir(config["data"])
    if not Path(config["model"]).is_file():
        raise ValidationError(f"checkpoint {config['model']} not found")
    out = Path(args.out)

    def work():
        model, _ = load_checkpoint(config["model"])
        model.eval()
        samples = load_split(data, config["split"])
        pc = evalharness.PointingConfig(tau=config["tau"], sigma=config["sigma"],
                                        smoothed=bool(config["smoothed"]),
                                        target_class_policy=config.get("target_policy") or "ground-truth")
        res = evalharness.evaluate_pointing(model, samples, config["method"], pc)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method", "arch", "split", "tau", "smoothed", "hits", "misses", "accuracy"))
        for mid in config["method"]:
            r = res[(mid, pc.smoothed)]
            w.writerow([mid, model.name, config["split"], pc.tau, int(pc.smoothed), r.hits, r.misses,
                        evalharness.fmt(r.accuracy)])
        (out / "pointing.csv").write_text(buf.getvalue())
        detail = {mid: res[(mid, pc.smoothed)].records for mid in config["method"]}
        (out / "pointing.json").write_text(json.dumps(detail, indent=2, sort_keys=True) + "\n")
        return {mid: res[(mid, pc.smoothed)].accuracy for mid in config["method"]}

    inputs = {"model_sha256": _file_hash(config["model"]), "data_manifest_sha256": _manifest_hash(data)}
    return _run(out, "pointing-game", config, {}, work, inputs)


def cmd_experiment(args):
    config = validate_config("experiment", read_config(args.config))
    config = {**EXPERIMENT_DEFAULTS, **config}
    config["seed"] = resolve_seed(args.seed, config)
    _merge_flag(config, "workers", args.workers)
    validate_config("experiment", config)
    if "data" in config:
        _data_dir(config["data"])
    out = Path(args.out)
    seeds = list(range(config["seed"], config["seed"] + config["n_seeds"]))
    result = {}

    def work():
        result.update(experiment_grid(config, out))
        return {"failures": len(result["failures"])}

    code = _run(out, "experiment", config, {"cells": seeds}, work)
    if code == 0 and result.get("failures"):
        write_run_manifest(out, "experiment", config, {"cells": seeds}, status="partial",
                           error=f"{len(result['failures'])} grid cell(s) failed")
        print(f"experiment: {len(result['failures'])} cell(s) failed; see {out / 'report.json'}", file=sys.stderr)
        return 2
    return code


def cmd_report(args):
    config = _flag_config(args, ["input", "model", "data", "method", "split", "limit"])
    _require(config, ["input"], "report")
    if not Path(config["input"]).is_file():
        raise ValidationError(f"report file {config['input']} not found")
    out = Path(args.out)

    def work():
        doc = json.loads(Path(config["input"]).read_text())
        evalharness.validate_report_json(doc)
        reports = [evalharness.ExperimentReport(**r) for r in doc["reports"]]
        write_tables(out, reports, smoothed=False)
        if config.get("model") and config.get("data") and config.get("method"):
            _check_methods(config["method"])
            model, _ = load_checkpoint(config["model"])
            model.eval()
            samples = [s for s in load_split(_data_dir(config["data"]), config.get("split", "test")) if s.label == 1]
            samples = samples[: config.get("limit") or 8]
            maps = compute_saliency_batch(model, np.stack([s.image for s in samples]), [s.label for s in samples],
                                          config["method"], (False,))
            for mid in config["method"]:
                d = out / "overlays" / mid
                d.mkdir(parents=True, exist_ok=True)
                for s, m in zip(samples, maps[(mid, False)]):
                    evalharness.write_overlay(d / f"{s.id}.pgm", s.image, m, s.boxes)
        return {"n_reports": len(reports)}

    return _run(out, "report", config, {}, work, {"input_sha256": _file_hash(config["input"])})


# --------------------------------------------------------------------------
# experiment grid
# --------------------------------------------------------------------------


def cell_key(arch, condition, seed):
    return f"{arch}__{condition}__{seed}"


@lru_cache(maxsize=4)
def _load_dataset(root):
    return {s: load_split(root, s) for s in ("train", "val", "test")}


def _cell_job(job):
    """Run one grid cell; never raises, so one bad cell cannot sink the pool."""
    key = cell_key(job["arch"], job["condition"], job["seed"])
    try:
        dataset = _load_dataset(job["data"])
        if job["split"] == "all":
            dataset = {**dataset, "all": dataset["train"] + dataset["val"] + dataset["test"]}
        ckpt = Path(job["cells_dir"]) / f"{key}.ckpt" if job["condition"] == "Repeated" else None
        result = evalharness.run_cell(job["arch"], job["condition"], job["seed"], dataset, job["methods"],
                                      TrainConfig(**job["train"]), tau=job["tau"], sigma=job["sigma"],
                                      split=job["split"], donor=job["donor"], checkpoint_path=ckpt,
                                      input_size=job["input_size"])
        doc = {"cell": key, "ok": True, "result": result}
    except Exception as e:  # noqa: BLE001 - recorded, reported, exit 2
        doc = {"cell": key, "ok": False, "error": f"{type(e).__name__}: {e}",
               "traceback": traceback.format_exc()}
    Path(job["cells_dir"], f"{key}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _donor_job(job):
    return evalharness.train_donor(job["arch"], seed=job["seed"], input_size=job["input_size"], **job["kw"])


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def default_workers():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def experiment_grid(config, out):
    """Run every (arch, condition, seed) cell and write the table analogues.

    Cells run on a bounded process pool; each writes ``cells/<cell>.json``
    and the merge below walks cells in config order, so outputs do not
    depend on scheduling. Failed cells are recorded and skipped.

    Writes ``randomization_<arch>.csv`` (per method x condition),
    ``smoothing.csv`` (trained runs, unsmoothed vs smoothed), ``dom.csv``
    (every architecture pair, trained runs) and ``report.csv`` /
    ``report.json`` with every report and per-run detail.
    """
    config = {**EXPERIMENT_DEFAULTS, **config}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cells_dir = out / "cells"
    cells_dir.mkdir(exist_ok=True)
    workers = config.get("workers") or default_workers()
    seeds = list(range(config["seed"], config["seed"] + config["n_seeds"]))
    methods = list(config["methods"])

    if "data" in config:
        data = str(Path(config["data"]).resolve())
    else:
        ds = dict(config["dataset"])
        fractions = ds.pop("fractions", [4 / 6, 1 / 6, 1 / 6])
        split_seed = ds.pop("split_seed", None)
        spec = GenSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in ds.items()})
        generate_dataset(spec, out / "data", fractions=fractions, split_seed=split_seed)
        data = str((out / "data").resolve())
    if not read_manifest(data).splits:
        raise ConfigError(f"dataset {data} has no train/val/test splits")

    donors = {}
    if "SR" in config["conditions"]:
        djobs = [{"arch": a, "seed": config["seed"], "input_size": config["input_size"], "kw": config["donor"]}
                 for a in config["archs"]]
        donors = dict(zip(config["archs"], _map(_donor_job, djobs, workers)))

    train_fields = train_config_from(config, config["seed"]).to_dict()
    jobs = [{"arch": a, "condition": c, "seed": s, "data": data, "methods": methods, "train": train_fields,
             "tau": config["tau"], "sigma": config["sigma"], "split": config["split"],
             "donor": donors.get(a) if c == "SR" else None, "cells_dir": str(cells_dir),
             "input_size": config["input_size"]}
            for a, c, s in itertools.product(config["archs"], config["conditions"], seeds)]
    docs = _map(_cell_job, jobs, workers)

    reports, failures = [], []
    by_cell = {d["cell"]: d for d in docs}
    for arch, condition in itertools.product(config["archs"], config["conditions"]):
        cells = []
        for s in seeds:
            d = by_cell[cell_key(arch, condition, s)]
            if d["ok"]:
                cells.append(d["result"])
            else:
                failures.append({"cell": d["cell"], "error": d["error"]})
        if cells:
            reports += evalharness.reports_from_cells(arch, condition, cells, methods, config["split"])

    train_runs = {k: d["result"]["train"] for k, d in sorted(by_cell.items()) if d["ok"] and d["result"]["train"]}
    doms = write_tables(out, reports, smoothed=config["smoothed"], archs=config["archs"], methods=methods)
    evalharness.emit_report(reports, out, "report",
                            extra={"dom": [vars(d) for d in doms], "failures": failures, "train_runs": train_runs})
    return {"reports": reports, "dom": doms, "failures": failures}


def write_tables(out, reports, smoothed=False, archs=None, methods=None):
    """Per-arch randomization CSVs, the smoothing table and the DoM table."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    archs = archs or list(dict.fromkeys(r.arch for r in reports))
    methods = methods or list(dict.fromkeys(r.method for r in reports))
    for arch in archs:
        rows = [r for r in reports if r.arch == arch and r.smoothed == smoothed]
        (out / f"randomization_{arch}.csv").write_text(evalharness.reports_csv(rows))

    def trained(arch, method, sm):
        for r in reports:
            if (r.arch, r.method, r.condition, r.smoothed) == (arch, method, "Repeated", sm):
                return r
        return None

    srows = []
    for arch in archs:
        for m in methods:
            raw, sm = trained(arch, m, False), trained(arch, m, True)
            if raw and sm:
                srows.append((m, arch, raw.mean, sm.mean))
    if srows:
        (out / "smoothing.csv").write_text(evalharness.smoothing_csv(srows))

    doms = []
    for a, b in itertools.combinations(archs, 2):
        for m in methods:
            ra, rb = trained(a, m, smoothed), trained(b, m, smoothed)
            if ra and rb:
                doms.append(evalharness.dom(ra, rb))
    if len(archs) > 1:
        (out / "dom.csv").write_text(evalharness.dom_csv(doms))
    return doms


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def _run(out, command, config, seeds, work, inputs=None):
    """Run ``work`` and always leave a run manifest behind; map failures to exit codes."""
    Path(out).mkdir(parents=True, exist_ok=True)
    try:
        summary = work()
    except (ConfigError, ValidationError, ParseError) as e:
        write_run_manifest(out, command, config, seeds, inputs, status="failed", error=str(e))
        print(f"{command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        write_run_manifest(out, command, config, seeds, inputs, status="failed", error=f"{type(e).__name__}: {e}")
        print(f"{command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    write_run_manifest(out, command, config, seeds, inputs)
    if summary:
        print(json.dumps(summary, sort_keys=True))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="salforge", description="Saliency-map benchmarking on synthetic localized-defect data.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-per-class", type=int)

    t = sub.add_parser("train", help="train a classifier on a generated dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)

    for name in ("saliency", "pointing-game"):
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--model")
        s.add_argument("--data")
        s.add_argument("--method", action="append")
        s.add_argument("--split")
        s.add_argument("--smoothed", action="store_true", default=None)
        s.add_argument("--sigma", type=float)
        s.add_argument("--target-policy", choices=("ground-truth", "predicted"))
        s.add_argument("--out", required=True)
        if name == "saliency":
            s.add_argument("--format", choices=("pgm", "raw", "both"))
            s.add_argument("--limit", type=int)
        else:
            s.add_argument("--tau", type=int)

    e = sub.add_parser("experiment", help="run a randomization / repeatability grid")
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--workers", type=int)

    r = sub.add_parser("report", help="re-emit tables (and overlays) from a report JSON")
    r.add_argument("--config")
    r.add_argument("--input")
    r.add_argument("--out", required=True)
    r.add_argument("--model")
    r.add_argument("--data")
    r.add_argument("--method", action="append")
    r.add_argument("--split")
    r.add_argument("--limit", type=int)
    return p


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "saliency": cmd_saliency,
    "pointing-game": cmd_pointing_game,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no subcommand given")
        return HANDLERS[args.command](args)
    except UsageError as e:
        print(f"{e}\n\n{parser.format_usage()}", file=sys.stderr)
        return 1
    except (ConfigError, ValidationError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main(argv=None):
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())

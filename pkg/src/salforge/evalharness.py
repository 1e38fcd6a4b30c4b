"""Pointing Game scoring and the randomization / repeatability / smoothing
/ cross-architecture protocols built on it."""

import csv
import io
import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from salforge.micronet import ModelConfig, build_model, randomize_model
from salforge.saliency import SaliencyMap, SaliencyOptions, compute_saliency_batch, parse_method
from salforge.synthdata import texture_samples, write_image
from salforge.train import TrainConfig, train_loop

CONDITIONS = ("SR", "FR", "Repeated")
CSV_FIELDS = ("method", "arch", "condition", "smoothed", "split", "n", "mean", "std")


@dataclass
class PointingConfig:
    tau: int = 15
    target_class_policy: str = "ground-truth"
    smoothed: bool = False
    sigma: float = 1.0

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass
class PointingResult:
    hits: int
    misses: int
    accuracy: float
    records: list = field(default_factory=list)


@dataclass
class ExperimentReport:
    method: str
    condition: str
    accuracies: list
    mean: float
    std: float
    n_runs: int
    arch: str = ""
    smoothed: bool = False
    split: str = "test"
    argmax: list = None

    def to_dict(self):
        return asdict(self)


@dataclass
class DoMRecord:
    method: str
    arch_a: str
    arch_b: str
    mean_a: float
    mean_b: float
    dom: float


# --------------------------------------------------------------------------
# Pointing Game
# --------------------------------------------------------------------------


def argmax_xy(values):
    """First maximum in row-major order, as ``(x, y)``."""
    flat = int(np.argmax(values))
    y, x = divmod(flat, values.shape[1])
    return x, y


def pointing_hit(smap, boxes, tau):
    """Hit if the map's peak lies within ``tau`` px of any box (box dilated on all sides)."""
    if not boxes:
        raise ValueError("pointing_hit needs at least one ground-truth box")
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap)
    x, y = argmax_xy(values)
    h, w = values.shape
    for b in boxes:
        x0, y0 = max(b.x0 - tau, 0), max(b.y0 - tau, 0)
        x1, y1 = min(b.x1 - 1 + tau, w - 1), min(b.y1 - 1 + tau, h - 1)
        if x0 <= x <= x1 and y0 <= y <= y1:
            return True, (x, y)
    return False, (x, y)


def pointing_accuracy(flags):
    flags = [bool(f) for f in flags]
    if not flags:
        raise ValueError("pointing accuracy of an empty result list is undefined")
    t = sum(flags)
    f = len(flags) - t
    return PointingResult(t, f, t / (t + f))


def evaluate_pointing(model, samples, methods, config=None, smoothed_variants=None):
    """Score every method on the defect (label 1) samples.

    Returns ``{(method_id, smoothed): PointingResult}``; each result's
    records hold ``{"id", "argmax", "hit"}`` per sample.
    """
    config = config or PointingConfig()
    if smoothed_variants is None:
        smoothed_variants = (config.smoothed,)
    scored = [s for s in samples if s.label == 1]
    if not scored:
        raise ValueError("no defect samples to score")
    opts = SaliencyOptions(sigma=config.sigma, target_policy=config.target_class_policy)
    maps = compute_saliency_batch(model, np.stack([s.image for s in scored]), [s.label for s in scored],
                                  list(methods), tuple(smoothed_variants), options=opts)
    out = {}
    for key, smaps in maps.items():
        flags, records = [], []
        for s, m in zip(scored, smaps):
            hit, xy = pointing_hit(m, s.boxes, config.tau)
            flags.append(hit)
            records.append({"id": s.id, "argmax": list(xy), "hit": hit})
        res = pointing_accuracy(flags)
        res.records = records
        out[key] = res
    return out


def smoothing_study(model, samples, methods, tau=15, sigma=1.0):
    """Rows ``(method, unsmoothed A, smoothed A)`` on identical samples."""
    res = evaluate_pointing(model, samples, methods, PointingConfig(tau=tau, sigma=sigma),
                            smoothed_variants=(False, True))
    return [(m, res[(m, False)].accuracy, res[(m, True)].accuracy) for m in methods]


# --------------------------------------------------------------------------
# randomization / repeatability
# --------------------------------------------------------------------------


def make_report(method, condition, accuracies, **kw):
    acc = [float(a) for a in accuracies]
    if not acc:
        raise ValueError("a report needs at least one run")
    # exact rational arithmetic: identical runs give std 0 and the quoted mean
    return ExperimentReport(method, condition, acc, float(statistics.mean(acc)), float(statistics.pstdev(acc)),
                            len(acc), **kw)


def train_donor(arch, seed=0, n_per_class=100, epochs=5, input_size=64, lr=0.05):
    """Pretrain a feature extractor on the stripe-orientation texture task.

    Stands in for ImageNet weights in the semi-randomized (SR) condition.
    """
    data = texture_samples(n_per_class, input_size, seed=10_000 + seed)
    split = {"train": data[: len(data) * 3 // 4], "val": data[len(data) * 3 // 4:]}
    model = build_model(ModelConfig(arch, input_size=input_size, seed=10_000 + seed))
    cfg = TrainConfig(epochs=epochs, lr=lr, seed=10_000 + seed)
    train_loop(model, split, cfg)
    return model


def run_cell(arch, condition, seed, dataset, methods, train_config, tau=15, sigma=1.0, split="test",
             donor=None, checkpoint_path=None, input_size=64):
    """One (architecture, condition, seed) run scored on ``dataset[split]``.

    Returns ``{"accuracy": {method: {"raw": A, "smoothed": A}}, "argmax": {...},
    "train": TrainReport dict or None}``.
    """
    base = build_model(ModelConfig(arch, input_size=input_size, seed=seed))
    train_report = None
    if condition == "FR":
        model = randomize_model(base, "FR", seed)
    elif condition == "SR":
        model = randomize_model(base, "SR", seed, donor=donor)
    elif condition == "Repeated":
        model = base
        cfg = TrainConfig(**{**train_config.to_dict(), "seed": seed})
        train_report = train_loop(model, dataset, cfg, checkpoint_path=checkpoint_path).to_dict()
    else:
        raise ValueError(f"unknown condition {condition!r}")
    model.eval()
    res = evaluate_pointing(model, dataset[split], methods, PointingConfig(tau=tau, sigma=sigma),
                            smoothed_variants=(False, True))
    accuracy = {m: {"raw": res[(m, False)].accuracy, "smoothed": res[(m, True)].accuracy} for m in methods}
    argmax = {m: [r["argmax"] for r in res[(m, False)].records] for m in methods}
    return {"accuracy": accuracy, "argmax": argmax, "train": train_report}


def reports_from_cells(arch, condition, cells, methods, split="test"):
    """Aggregate per-seed cell results into raw and smoothed ExperimentReports."""
    out = []
    for m in methods:
        for smoothed in (False, True):
            key = "smoothed" if smoothed else "raw"
            accs = [c["accuracy"][m][key] for c in cells]
            out.append(make_report(m, condition, accs, arch=arch, smoothed=smoothed, split=split,
                                   argmax=None if smoothed else [c["argmax"][m] for c in cells]))
    return out


def randomization_experiment(arch, dataset, methods, n_repeats=3, seeds=None, train_config=None, tau=15,
                             sigma=1.0, donor=None, split="test", input_size=64):
    """SR, FR and Repeated reports for one architecture (serial).

    FR/SR models are randomized per seed without training; Repeated models
    are trained from scratch per seed.
    """
    seeds = list(range(n_repeats)) if seeds is None else list(seeds)[:n_repeats]
    train_config = train_config or TrainConfig()
    if donor is None:
        donor = train_donor(arch, input_size=input_size)
    reports = []
    for condition in CONDITIONS:
        cells = [run_cell(arch, condition, s, dataset, methods, train_config, tau, sigma, split,
                          donor=donor, input_size=input_size) for s in seeds]
        reports += reports_from_cells(arch, condition, cells, methods, split)
    return reports


def dom(report_a, report_b):
    """Difference of Means: ``|mean_a - mean_b|`` for one method on two architectures.

    Rounded to 12 decimals so that means quoted to a few decimals give the
    exact decimal difference.
    """
    if report_a.method != report_b.method:
        raise ValueError(f"DoM needs the same method, got {report_a.method!r} and {report_b.method!r}")
    value = round(abs(report_a.mean - report_b.mean), 12)
    return DoMRecord(report_a.method, report_a.arch, report_b.arch, report_a.mean, report_b.mean, value)


# --------------------------------------------------------------------------
# report emission
# --------------------------------------------------------------------------


def fmt(x):
    return f"{x:.9f}"


def reports_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in reports:
        w.writerow([r.method, r.arch, r.condition, int(r.smoothed), r.split, r.n_runs, fmt(r.mean), fmt(r.std)])
    return buf.getvalue()


def read_reports_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["n"] = int(r["n"])
        r["mean"] = float(r["mean"])
        r["std"] = float(r["std"])
        r["smoothed"] = bool(int(r["smoothed"]))
    return rows


def dom_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "arch_a", "arch_b", "mean_a", "mean_b", "dom"))
    for d in records:
        w.writerow([d.method, d.arch_a, d.arch_b, fmt(d.mean_a), fmt(d.mean_b), fmt(d.dom)])
    return buf.getvalue()


def smoothing_csv(rows):
    """``rows``: iterables of (method, arch, unsmoothed, smoothed)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "arch", "unsmoothed", "smoothed", "delta"))
    for method, arch, raw, sm in rows:
        w.writerow([method, arch, fmt(raw), fmt(sm), fmt(sm - raw)])
    return buf.getvalue()


def schema_path():
    return Path(__file__).parent / "schemas" / "report.schema.json"


def validate_report_json(doc):
    import jsonschema

    jsonschema.validate(doc, json.loads(schema_path().read_text()))


def emit_report(reports, out_dir, stem="report", extra=None):
    """Write ``<stem>.csv`` (one row per method x condition) and ``<stem>.json`` (per-run detail)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    csv_path.write_text(reports_csv(reports))
    doc = {"reports": [r.to_dict() for r in reports]}
    if extra:
        doc.update(extra)
    validate_report_json(doc)
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def load_report_json(path):
    doc = json.loads(Path(path).read_text())
    validate_report_json(doc)
    return [ExperimentReport(**r) for r in doc["reports"]]


def overlay(image, smap, boxes, alpha=0.5):
    """Grayscale qualitative figure: image blended with the min-max scaled map,
    box outlines burned in white and a black cross at the map's peak."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    v = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    lo, hi = v.min(), v.max()
    norm = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    out = (1 - alpha) * img + alpha * norm
    h, w = out.shape
    for b in boxes:
        out[b.y0, b.x0:b.x1] = 1.0
        out[b.y1 - 1, b.x0:b.x1] = 1.0
        out[b.y0:b.y1, b.x0] = 1.0
        out[b.y0:b.y1, b.x1 - 1] = 1.0
    x, y = argmax_xy(v)
    for d in range(-2, 3):
        if 0 <= x + d < w:
            out[y, x + d] = 0.0
        if 0 <= y + d < h:
            out[y + d, x] = 0.0
    return np.clip(out, 0.0, 1.0)


def write_overlay(path, image, smap, boxes):
    return write_image(path, overlay(image, smap, boxes))


def method_label(method_id):
    name, kind, combined = parse_method(method_id)
    if name != "NormGrad":
        return name
    return f"NormGrad {kind} {'combined' if combined else 'single'}"

"""Synthetic localized-defect datasets and their on-disk format.

Images are grayscale blob textures; defect samples carry 1-3 small
high-contrast planted objects with tight bounding boxes. On disk a dataset
is a directory holding ``images/*.pgm`` (binary P5, 8 bit),
``annotations.jsonl`` (one record per sample) and ``manifest.json``
(generator spec, image size, splits).
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from salforge.errors import ConfigError, ParseError, ValidationError
from salforge.tensor import gaussian_smooth

PRESETS = {
    # Object-CXR analogue: 1-3 small bright objects anywhere
    "fobj": {"objects_per_image": (1, 3), "object_size_range": (3, 7), "center_fraction": 1.0, "anatomy": True},
    # LVOT analogue: one small object near the image centre
    "lvot": {"objects_per_image": (1, 1), "object_size_range": (3, 5), "center_fraction": 0.5, "anatomy": True},
    # plain planted squares on blob texture, no anatomical distractors
    "squares": {"objects_per_image": (1, 1), "object_size_range": (4, 7), "center_fraction": 1.0, "anatomy": False},
}


@dataclass(frozen=True)
class BoundingBox:
    """Pixel box, inclusive-exclusive: columns ``x0..x1-1``, rows ``y0..y1-1``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def to_list(self):
        return [self.x0, self.y0, self.x1, self.y1]

    def valid_for(self, width, height):
        return 0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height

    def hflip(self, width):
        return BoundingBox(width - self.x1, self.y0, width - self.x0, self.y1)

    def shift(self, dx, dy):
        return BoundingBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)


@dataclass
class Sample:
    id: str
    image: np.ndarray
    label: int
    boxes: list = field(default_factory=list)
    group: str = None
    path: str = None


@dataclass
class GenSpec:
    preset: str = "fobj"
    n_per_class: int = 300
    image_size: int = 64
    objects_per_image: tuple = None
    object_size_range: tuple = None
    contrast_range: tuple = (0.35, 0.6)
    contrast_floor: float = 0.2
    group_size: int = 2
    seed: int = 0
    name: str = None

    def resolved(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        p = PRESETS[self.preset]
        return GenSpec(
            preset=self.preset,
            n_per_class=self.n_per_class,
            image_size=self.image_size,
            objects_per_image=tuple(self.objects_per_image or p["objects_per_image"]),
            object_size_range=tuple(self.object_size_range or p["object_size_range"]),
            contrast_range=tuple(self.contrast_range),
            contrast_floor=self.contrast_floor,
            group_size=self.group_size,
            seed=self.seed,
            name=self.name or self.preset,
        )

    def to_dict(self):
        d = asdict(self.resolved())
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class DatasetManifest:
    name: str
    image_size: int
    records: list
    spec: dict = None
    splits: dict = None
    root: Path = None

    def record(self, sample_id):
        for r in self.records:
            if r["id"] == sample_id:
                return r
        raise KeyError(sample_id)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def blob_background(rng, size, with_anatomy=True):
    """Multi-scale smoothed noise (mean 0.5) plus optional rib-like arcs, clipped to [0, 1]."""
    acc = np.zeros((size, size))
    for sigma, weight in ((size / 10, 1.0), (size / 20, 0.5), (size / 40, 0.25)):
        layer = gaussian_smooth(rng.standard_normal((size, size)), max(sigma, 0.5))
        acc += weight * layer / (layer.std() + 1e-12)
    acc = (acc - acc.mean()) / (acc.std() + 1e-12)
    img = 0.5 + 0.15 * acc
    if with_anatomy:
        img += anatomy(rng, size)
    img += rng.normal(0.0, 0.02, size=(size, size))
    return np.clip(img, 0.0, 1.0)


def anatomy(rng, size, n_range=(3, 6)):
    """Long thin bright arcs (rib-like structures) shared by both classes."""
    out = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(n_range[0], n_range[1] + 1))):
        y0 = rng.uniform(0.1, 0.9) * size
        amp = rng.uniform(0.05, 0.2) * size
        period = rng.uniform(1.0, 2.5) * size
        phase = rng.uniform(0, 2 * math.pi)
        x_lo = rng.uniform(0.0, 0.4) * size
        x_hi = x_lo + rng.uniform(0.4, 0.6) * size
        width = rng.uniform(1.0, 1.8)
        centre = y0 + amp * np.sin(2 * math.pi * xx / period + phase)
        band = np.exp(-0.5 * ((yy - centre) / width) ** 2) * ((xx >= x_lo) & (xx <= x_hi))
        out += rng.uniform(0.5, 0.8) * band
    return out


def ring_mean(img, box, width=2):
    h, w = img.shape
    y0, y1 = max(box.y0 - width, 0), min(box.y1 + width, h)
    x0, x1 = max(box.x0 - width, 0), min(box.x1 + width, w)
    outer = img[y0:y1, x0:x1]
    inner = img[box.y0:box.y1, box.x0:box.x1]
    n = outer.size - inner.size
    return (outer.sum() - inner.sum()) / n if n > 0 else inner.mean()


def box_contrast(img, box):
    return img[box.y0:box.y1, box.x0:box.x1].mean() - ring_mean(img, box)


def _overlaps(a, b, margin):
    return not (a.x1 + margin <= b.x0 or b.x1 + margin <= a.x0 or a.y1 + margin <= b.y0 or b.y1 + margin <= a.y0)


def plant_object(rng, img, spec, existing, max_tries=200):
    """Add one ellipse or rectangle; returns its tight box or None if no fit."""
    size = img.shape[0]
    lo, hi = spec.object_size_range
    for _ in range(max_tries):
        ow, oh = rng.integers(lo, hi + 1, size=2)
        center = PRESETS[spec.preset]["center_fraction"]
        if center < 1.0:
            span = int(size * center)
            start = (size - span) // 2
            x0 = int(rng.integers(start, start + span - ow + 1))
            y0 = int(rng.integers(start, start + span - oh + 1))
        else:
            x0 = int(rng.integers(1, size - ow))
            y0 = int(rng.integers(1, size - oh))
        yy, xx = np.mgrid[0:oh, 0:ow]
        if rng.random() < 0.5:
            cy, cx = (oh - 1) / 2, (ow - 1) / 2
            mask = ((yy - cy) / (oh / 2)) ** 2 + ((xx - cx) / (ow / 2)) ** 2 <= 1.0
        else:
            mask = np.ones((oh, ow), dtype=bool)
        rows = np.where(mask.any(axis=1))[0]
        cols = np.where(mask.any(axis=0))[0]
        box = BoundingBox(x0 + int(cols[0]), y0 + int(rows[0]), x0 + int(cols[-1]) + 1, y0 + int(rows[-1]) + 1)
        if box.area < 9 or any(_overlaps(box, b, 3) for b in existing):
            continue
        contrast = rng.uniform(*spec.contrast_range)
        trial = img.copy()
        region = trial[y0:y0 + oh, x0:x0 + ow]
        region[mask] = np.clip(region[mask] + contrast, 0.0, 1.0)
        if box_contrast(trial, box) >= spec.contrast_floor:
            img[...] = trial
            return box
    return None


def generate_samples(spec):
    """Deterministically generate the samples described by ``spec`` (in memory)."""
    spec = spec.resolved()
    if spec.image_size < 16:
        raise ConfigError(f"image_size must be >= 16, got {spec.image_size}")
    if spec.n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {spec.n_per_class}")
    if spec.object_size_range[0] < 3 or spec.object_size_range[1] + 2 > spec.image_size:
        raise ConfigError(f"object_size_range {spec.object_size_range} does not fit a {spec.image_size}px image")
    lo, hi = spec.objects_per_image
    if not 1 <= lo <= hi <= 3:
        raise ConfigError(f"objects_per_image must lie within 1..3, got {spec.objects_per_image}")
    rng = np.random.default_rng(spec.seed)
    gsize = max(1, spec.group_size)
    samples = []
    counts = [0, 0]
    group_idx = 0
    while counts[0] < spec.n_per_class or counts[1] < spec.n_per_class:
        for label in (0, 1):
            n = min(gsize, spec.n_per_class - counts[label])
            group = f"g{group_idx:05d}"
            for _ in range(n):
                img = blob_background(rng, spec.image_size, PRESETS[spec.preset]["anatomy"])
                boxes = []
                if label == 1:
                    k = int(rng.integers(lo, hi + 1))
                    for _ in range(k):
                        box = plant_object(rng, img, spec, boxes)
                        if box is not None:
                            boxes.append(box)
                    if not boxes:
                        raise ConfigError("could not place any object; widen contrast or size ranges")
                sid = f"s{len(samples):05d}"
                samples.append(Sample(sid, img[None], label, boxes, group))
                counts[label] += 1
            if n:
                group_idx += 1
    return samples


def texture_samples(n_per_class, image_size=64, seed=0):
    """Oriented-stripe texture task (horizontal vs vertical) used to pretrain SR donors."""
    rng = np.random.default_rng(seed)
    out = []
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    for i in range(2 * n_per_class):
        label = i % 2
        period = rng.uniform(4.0, 10.0)
        phase = rng.uniform(0, 2 * math.pi)
        coord = yy if label == 0 else xx
        stripes = np.sin(2 * math.pi * coord / period + phase)
        img = 0.5 + 0.2 * stripes + 0.1 * blob_background(rng, image_size, False) - 0.05
        img = np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1)
        out.append(Sample(f"t{i:05d}", img[None], label, [], f"t{i:05d}"))
    return out


# --------------------------------------------------------------------------
# PGM I/O
# --------------------------------------------------------------------------


def quantize(values):
    v = np.asarray(values, dtype=np.float64)
    return np.floor(np.clip(v, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)


def encode_pgm(values):
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3:
        v = v[0]
    if v.min() < 0 or v.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    h, w = v.shape
    return f"P5 {w} {h} 255\n".encode("ascii") + quantize(v).tobytes()


def write_image(path, values):
    path = Path(path)
    path.write_bytes(encode_pgm(values))
    return path


def decode_pgm(raw):
    """Parse binary PGM bytes into a ``1 x H x W`` float array in [0, 1]."""
    pos = 0
    tokens = []
    if raw[:2] != b"P5":
        raise ParseError("not a binary PGM (missing P5 magic)", 0)
    pos = 2
    while len(tokens) < 3:
        if pos >= len(raw):
            raise ParseError("truncated header", pos)
        c = raw[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise ParseError("unterminated comment in header", pos)
            pos = end + 1
        else:
            start = pos
            while pos < len(raw) and raw[pos:pos + 1].isdigit():
                pos += 1
            if pos == start:
                raise ParseError(f"unexpected byte {c!r} in header", pos)
            tokens.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after header", pos)
    pos += 1
    w, h, maxval = tokens
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise ParseError(f"unsupported dimensions/maxval {w}x{h}/{maxval}", pos)
    need = w * h
    if len(raw) - pos < need:
        raise ParseError(f"truncated pixel data: need {need} bytes, have {len(raw) - pos}", len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return (data.astype(np.float64) / maxval).reshape(1, h, w)


def read_image(path):
    return decode_pgm(Path(path).read_bytes())


# --------------------------------------------------------------------------
# annotations / manifests
# --------------------------------------------------------------------------


def validate_record(rec, image_size, where="record"):
    for key in ("id", "path", "label", "boxes"):
        if key not in rec:
            raise ValidationError(f"{where} is missing {key!r}")
    rid = rec["id"]
    if rec["label"] not in (0, 1):
        raise ValidationError(f"record {rid!r}: label must be 0 or 1, got {rec['label']!r}")
    if (rec["label"] == 1) != bool(rec["boxes"]):
        raise ValidationError(f"record {rid!r}: label {rec['label']} but {len(rec['boxes'])} boxes")
    for b in rec["boxes"]:
        if len(b) != 4:
            raise ValidationError(f"record {rid!r}: box {b} must have 4 coordinates")
        box = BoundingBox(*[int(v) for v in b])
        if not box.valid_for(image_size, image_size):
            raise ValidationError(f"record {rid!r}: box {b} outside {image_size}x{image_size} image")
        if box.area < 9:
            raise ValidationError(f"record {rid!r}: box {b} smaller than 9 px")


def write_annotations(path, records, image_size):
    seen = set()
    lines = []
    for i, rec in enumerate(records):
        validate_record(rec, image_size, where=f"record #{i}")
        if rec["id"] in seen:
            raise ValidationError(f"record {rec['id']!r}: duplicate id")
        seen.add(rec["id"])
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    Path(path).write_text("".join(line + "\n" for line in lines))
    return path


def read_annotations(path, image_size):
    records = []
    seen = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        validate_record(rec, image_size, where=f"{path}:{lineno}")
        if rec["id"] in seen:
            raise ValidationError(f"record {rec['id']!r}: duplicate id ({path}:{lineno})")
        seen.add(rec["id"])
        records.append(rec)
    return records


def sample_record(sample, rel_path):
    rec = {"id": sample.id, "path": rel_path, "label": int(sample.label),
           "boxes": [b.to_list() for b in sample.boxes]}
    if sample.group is not None:
        rec["group"] = sample.group
    return rec


def generate_dataset(spec, out_dir, fractions=None, split_seed=None):
    """Generate samples, write PGMs + JSONL + manifest.json under ``out_dir``."""
    out_dir = Path(out_dir)
    samples = generate_samples(spec)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        rel = f"images/{s.id}.pgm"
        write_image(out_dir / rel, s.image)
        records.append(sample_record(s, rel))
    resolved = spec.resolved()
    write_annotations(out_dir / "annotations.jsonl", records, resolved.image_size)
    manifest = DatasetManifest(resolved.name, resolved.image_size, records, spec=spec.to_dict(), root=out_dir)
    if fractions is not None:
        parts = split_dataset(manifest, fractions, resolved.seed if split_seed is None else split_seed)
        manifest.splits = {k: [r["id"] for r in v] for k, v in parts.items()}
    write_manifest(manifest, out_dir)
    return manifest


def write_manifest(manifest, out_dir):
    doc = {
        "name": manifest.name,
        "image_size": manifest.image_size,
        "generator": manifest.spec,
        "annotations": "annotations.jsonl",
        "n_samples": len(manifest.records),
        "splits": manifest.splits,
        "split_sizes": None if manifest.splits is None else {k: len(v) for k, v in manifest.splits.items()},
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(root):
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text())
    records = read_annotations(root / doc.get("annotations", "annotations.jsonl"), doc["image_size"])
    splits = doc.get("splits")
    if splits:
        ids = [i for v in splits.values() for i in v]
        if len(ids) != len(set(ids)):
            raise ValidationError(f"{root}: splits are not disjoint")
    return DatasetManifest(doc["name"], doc["image_size"], records, spec=doc.get("generator"),
                           splits=splits, root=root)


def load_samples(manifest, ids=None):
    wanted = None if ids is None else set(ids)
    out = []
    for rec in manifest.records:
        if wanted is not None and rec["id"] not in wanted:
            continue
        img = read_image(Path(manifest.root) / rec["path"])
        out.append(Sample(rec["id"], img, rec["label"], [BoundingBox(*b) for b in rec["boxes"]],
                          rec.get("group"), rec["path"]))
    return out


def load_split(root, split):
    manifest = read_manifest(root)
    if split == "all" or not manifest.splits:
        return load_samples(manifest)
    if split not in manifest.splits:
        raise ConfigError(f"dataset {root} has no split {split!r}")
    return load_samples(manifest, manifest.splits[split])


def dataset_hash(root):
    """SHA-256 over manifest, annotations and image bytes (sorted by path)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


def _allocate(n, fractions):
    """Largest-remainder apportionment of ``n`` items over ``fractions``."""
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(manifest, fractions, seed):
    """Seeded, class-stratified, group-preserving train/val/test split.

    ``manifest`` may be a :class:`DatasetManifest` or a list of records/samples.
    Groups (synthetic patients) are assigned whole; every group holds a
    single class.
    """
    names = ("train", "val", "test")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    items = manifest.records if isinstance(manifest, DatasetManifest) else list(manifest)

    def get(item, key):
        return item.get(key) if isinstance(item, dict) else getattr(item, key, None)

    rng = np.random.default_rng(seed)
    parts = {k: [] for k in names}
    for label in (0, 1):
        groups = {}
        for item in items:
            if get(item, "label") != label:
                continue
            gid = get(item, "group") if get(item, "group") is not None else get(item, "id")
            groups.setdefault(gid, []).append(item)
        keys = sorted(groups)
        perm = rng.permutation(len(keys))
        counts = _allocate(len(keys), fractions)
        start = 0
        for name, c in zip(names, counts):
            for idx in perm[start:start + c]:
                parts[name].extend(groups[keys[idx]])
            start += c
    for name, f in zip(names, fractions):
        if f > 0 and not parts[name]:
            raise ConfigError(f"fraction {f} leaves split {name!r} empty")
    order = {get(item, "id"): i for i, item in enumerate(items)}
    for name in names:
        parts[name].sort(key=lambda it: order[get(it, "id")])
    return parts

"""Saliency detectors built on hooked activations and gradients.

Input x Grad, guided backpropagation, Grad-CAM, guided Grad-CAM and
NormGrad (bias / scaling / conv NxN virtual identity layers, single layer
or geometric-mean combination over several layers).
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from salforge.errors import DimensionError, StateError
from salforge.micronet import BLOCK_OUTPUTS, LAST_CONV, backward, forward
from salforge.tensor import bilinear_upsample, frobenius_map, gaussian_smooth, unfold

METHODS = ("IxG", "GBP", "GradCAM", "GuidedGradCAM", "NormGrad")
VIL_KINDS = ("bias", "scaling", "conv1x1", "conv3x3")

# method ids used on the command line and in reports
BASELINE_IDS = {"ixg": "IxG", "gbp": "GBP", "gradcam": "GradCAM", "guided-gradcam": "GuidedGradCAM"}
BENCHMARK_METHODS = (
    "ixg", "gbp", "guided-gradcam", "gradcam",
    "normgrad-scaling-single", "normgrad-scaling-combined",
    "normgrad-conv1x1-single", "normgrad-conv1x1-combined",
    "normgrad-conv3x3-single", "normgrad-conv3x3-combined",
)


@dataclass
class SaliencyMap:
    values: np.ndarray
    method: str
    vil_kind: str = "none"
    hook_layers: list = field(default_factory=list)
    smoothed: bool = False
    combined: bool = False

    @property
    def shape(self):
        return self.values.shape

    def metadata(self):
        return {"method": self.method, "vil_kind": self.vil_kind, "hook_layers": list(self.hook_layers),
                "smoothed": self.smoothed, "combined": self.combined, "shape": list(self.values.shape)}


def parse_method(method_id):
    """``"normgrad-conv3x3-combined"`` -> ``("NormGrad", "conv3x3", True)``."""
    mid = method_id.lower()
    if mid in BASELINE_IDS:
        return BASELINE_IDS[mid], "none", False
    parts = mid.split("-")
    if len(parts) == 3 and parts[0] == "normgrad" and parts[1] in VIL_KINDS and parts[2] in ("single", "combined"):
        return "NormGrad", parts[1], parts[2] == "combined"
    raise ValueError(f"unknown saliency method {method_id!r}")


def _kernel_size(kind):
    return {"conv1x1": 1, "conv3x3": 3}[kind]


# --------------------------------------------------------------------------
# detectors
# --------------------------------------------------------------------------


def input_x_grad(x, g):
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != g.shape:
        raise DimensionError(f"input {x.shape} and gradient {g.shape} differ")
    return SaliencyMap((x * g).sum(axis=0), "IxG")


def gbp_from_gradient(g):
    return SaliencyMap(np.maximum(np.asarray(g, dtype=np.float64), 0.0).sum(axis=0), "GBP")


def guided_backprop_map(model, x, target_class):
    _, record = forward(model, x)
    g, _ = backward(model, target_class, "guided", record)
    return gbp_from_gradient(g)


def grad_cam_raw(x_out, g_out):
    """ReLU of the alpha-weighted channel sum, at the hooked layer's resolution."""
    alpha = g_out.mean(axis=(1, 2))
    s = np.tensordot(alpha, x_out, axes=(0, 0))
    return np.maximum(s, 0.0)


def grad_cam(record, input_size, layer=LAST_CONV):
    x_out, g_out = record.pair(layer)
    m = bilinear_upsample(grad_cam_raw(x_out, g_out), input_size)
    return SaliencyMap(m, "GradCAM", hook_layers=[layer])


def guided_grad_cam(gc, gbp):
    if gc.values.shape != gbp.values.shape:
        raise DimensionError(f"Grad-CAM map {gc.values.shape} and GBP map {gbp.values.shape} differ")
    return SaliencyMap(gc.values * gbp.values, "GuidedGradCAM",
                       hook_layers=list(gc.hook_layers), smoothed=gc.smoothed and gbp.smoothed)


def normgrad_raw(x_out, g_out, kind):
    """Per-position Frobenius norm of the virtual identity layer's parameter gradient.

    bias:     ||g_u||
    scaling:  ||g_u * x_u||
    convNxN:  ||g_u|| * ||unfolded NxN patch of x around u||
    """
    if x_out.shape != g_out.shape:
        raise DimensionError(f"activation {x_out.shape} and gradient {g_out.shape} differ")
    if kind == "bias":
        return frobenius_map(g_out)
    if kind == "scaling":
        return frobenius_map(g_out * x_out)
    if kind in ("conv1x1", "conv3x3"):
        n = _kernel_size(kind)
        cols = unfold(x_out, n)
        patch_norm = np.sqrt(np.einsum("pu,pu->u", cols, cols)).reshape(x_out.shape[1:])
        return frobenius_map(g_out) * patch_norm
    raise ValueError(f"unknown virtual identity layer kind {kind!r}")


def normgrad_single(record, kind, input_size, layer=LAST_CONV):
    x_out, g_out = record.pair(layer)
    m = bilinear_upsample(normgrad_raw(x_out, g_out, kind), input_size)
    return SaliencyMap(m, "NormGrad", vil_kind=kind, hook_layers=[layer])


def normgrad_oracle(record, n, layer=LAST_CONV):
    """Brute force: Frobenius norm of the explicit outer product at each position."""
    x_out, g_out = record.pair(layer)
    k, h, w = x_out.shape
    r = (n - 1) // 2
    padded = np.pad(x_out, ((0, 0), (r, r), (r, r)))
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            patch = padded[:, i:i + n, j:j + n].reshape(-1)
            outer = np.outer(g_out[:, i, j], patch)
            out[i, j] = np.sqrt((outer ** 2).sum())
    return out


def normgrad_combine(maps):
    """Geometric mean of max-normalized maps that share one VIL kind."""
    if not maps:
        raise ValueError("need at least one map to combine")
    kinds = {m.vil_kind for m in maps}
    if len(kinds) > 1:
        raise ValueError(f"cannot combine maps with different virtual identity layers: {sorted(kinds)}")
    shapes = {m.values.shape for m in maps}
    if len(shapes) > 1:
        raise DimensionError(f"cannot combine maps of different sizes: {sorted(shapes)}")
    j = len(maps)
    out = np.ones(maps[0].values.shape)
    for m in maps:
        peak = m.values.max()
        norm = m.values / peak if peak > 0 else np.zeros_like(m.values)
        out *= norm ** (1.0 / j)
    layers = [name for m in maps for name in m.hook_layers]
    return SaliencyMap(out, "NormGrad", vil_kind=maps[0].vil_kind, hook_layers=layers,
                       smoothed=all(m.smoothed for m in maps), combined=True)


def smooth(smap, sigma=1.0):
    return replace(smap, values=gaussian_smooth(smap.values, sigma), smoothed=True)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


@dataclass
class SaliencyOptions:
    layers: list = None
    smoothed: bool = False
    sigma: float = 1.0
    target_class: int = None
    target_policy: str = "ground-truth"


def _needs(method, options):
    """(hook layers for the standard pass, whether a guided pass is needed)."""
    name, kind, combined = method
    if name in ("IxG", "GBP"):
        layers = []
    elif name in ("GradCAM", "GuidedGradCAM"):
        layers = list(options.layers or [LAST_CONV])
    else:
        layers = list(options.layers or (BLOCK_OUTPUTS if combined else [LAST_CONV]))
    return layers, name in ("GBP", "GuidedGradCAM")


def _from_records(method, options, std, guided_grad, input_size):
    name, kind, combined = method
    layers, _ = _needs(method, options)
    if name == "IxG":
        smap = input_x_grad(std.input, std.input_grad)
    elif name == "GBP":
        smap = gbp_from_gradient(guided_grad)
    elif name == "GradCAM":
        smap = grad_cam(std, input_size, layer=layers[0])
    elif name == "GuidedGradCAM":
        smap = guided_grad_cam(grad_cam(std, input_size, layer=layers[0]), gbp_from_gradient(guided_grad))
    elif combined:
        smap = normgrad_combine([normgrad_single(std, kind, input_size, layer=lay) for lay in layers])
    else:
        smap = normgrad_single(std, kind, input_size, layer=layers[0])
    if options.smoothed:
        smap = smooth(smap, options.sigma)
    return smap


def resolve_target(model, logits, label, options):
    if options.target_class is not None:
        return int(options.target_class)
    if options.target_policy == "predicted":
        return int(np.argmax(logits))
    if options.target_policy != "ground-truth":
        raise ValueError(f"unknown target class policy {options.target_policy!r}")
    if label is None:
        raise ValueError("ground-truth target policy needs a labelled sample or an explicit target_class")
    return int(label)


def compute_saliency(model, sample, method, options=None):
    """Run the forward/backward passes ``method`` needs and build its map.

    ``sample`` is a :class:`salforge.synthdata.Sample` or a bare
    ``1 x H x W`` image (then ``options.target_class`` or the predicted
    policy picks the class).
    """
    options = options or SaliencyOptions()
    parsed = parse_method(method) if isinstance(method, str) else method
    image = getattr(sample, "image", sample)
    label = getattr(sample, "label", None)
    layers, need_guided = _needs(parsed, options)
    missing = [lay for lay in layers if lay not in model.hookable]
    if missing:
        raise StateError(f"hook layers {missing} are not hookable on this model")
    logits, std = forward(model, image, hooks=layers)
    target = resolve_target(model, logits, label, options)
    backward(model, target, "standard", std)
    guided_grad = None
    if need_guided:
        guided_grad, _ = backward(model, target, "guided", forward(model, image)[1])
    input_size = image.shape[-2:]
    return _from_records(parsed, options, std, guided_grad, input_size)


def compute_saliency_batch(model, images, labels, methods, smoothed_variants=(False,), options=None,
                           batch_size=32):
    """Maps for many images and methods with two backward passes per batch.

    Returns ``{(method_id, smoothed): [SaliencyMap, ...]}`` in input order.
    Each image's maps are identical to :func:`compute_saliency` on that image
    (eval-mode BatchNorm keeps batch items independent).
    """
    options = options or SaliencyOptions()
    parsed = {mid: parse_method(mid) for mid in methods}
    hooks, need_guided = [], False
    for p in parsed.values():
        lay, g = _needs(p, options)
        hooks += [h for h in lay if h not in hooks]
        need_guided |= g
    images = np.asarray(images, dtype=np.float64)
    out = {(mid, s): [] for mid in methods for s in smoothed_variants}
    input_size = images.shape[-2:]
    for start in range(0, len(images), batch_size):
        xb = images[start:start + batch_size]
        logits, std = forward(model, xb, hooks=hooks)
        targets = [resolve_target(model, logits[i], None if labels is None else labels[start + i], options)
                   for i in range(len(xb))]
        backward(model, targets, "standard", std)
        guided = None
        if need_guided:
            guided, _ = backward(model, targets, "guided", forward(model, xb)[1])
        for i, rec in enumerate(std.split()):
            g_i = None if guided is None else guided[i]
            for mid, p in parsed.items():
                base = _from_records(p, replace(options, smoothed=False), rec, g_i, input_size)
                for s in smoothed_variants:
                    out[(mid, s)].append(smooth(base, options.sigma) if s else base)
    return out


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------


def to_uint8(values):
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi > lo:
        v = (v - lo) / (hi - lo)
    else:
        v = np.zeros_like(v)
    return np.round(v * 255).astype(np.uint8)


def write_map_pgm(smap, path):
    """8-bit binary PGM, values min-max scaled per map."""
    data = to_uint8(smap.values)
    h, w = data.shape
    path = Path(path)
    path.write_bytes(f"P5 {w} {h} 255\n".encode("ascii") + data.tobytes())
    return path


def write_map_raw(smap, path):
    """Raw little-endian float64 dump plus a ``.json`` sidecar with metadata."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(smap.values, dtype="<f8").tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(smap.metadata(), indent=2, sort_keys=True))
    return path, sidecar


def read_map_raw(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    values = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(meta["shape"]).astype(np.float64)
    return SaliencyMap(values, meta["method"], meta["vil_kind"], meta["hook_layers"],
                       meta["smoothed"], meta["combined"])

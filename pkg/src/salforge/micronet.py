"""A small hand-differentiated convolutional classifier with hook points.

The network is an ordered list of :class:`LayerSpec` entries. ``forward``
records every layer's output on a tape held by the returned
:class:`HookRecord`; ``backward`` walks that tape in reverse, optionally
rewriting activation gradients (guided backpropagation / deconvolution),
and fills in the upstream gradient at each hooked layer. Because the
activation and gradient of a hook are taken at the output of the same
layer, the hook behaves as a virtual identity layer placed right after it.

A model in eval mode is never mutated by forward/backward, so it can be
shared between workers; all per-call state lives in the HookRecord.
"""

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from salforge import kernels
from salforge.errors import ConfigError, DimensionError, MissingResourceError, StateError
from salforge.tensor import conv2d_backward, conv2d_forward

LAYER_KINDS = ("conv", "batchnorm", "activation", "maxpool", "gap", "fc")
GRAD_MODES = ("standard", "guided", "deconv")
FAMILIES = ("relu", "silu")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

STOCK_VARIANTS = {"micro-res": "relu", "micro-eff": "silu"}
# post-activation outputs of the four conv blocks
BLOCK_OUTPUTS = ("block1.act", "block2.act", "block3.act", "block4.act")
LAST_CONV = "block4.act"


@dataclass
class LayerSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    hookable: bool = False

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "params": dict(self.params), "hookable": self.hookable}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["kind"], dict(d.get("params", {})), bool(d.get("hookable", False)))


@dataclass
class ModelConfig:
    variant: str = "micro-res"
    input_size: int = 64
    seed: int = 0
    layers: list = None
    activation_family: str = None


def stock_layers(family):
    chans = [(1, 8), (8, 16), (16, 32), (32, 32)]
    layers = []
    for i, (k_in, k_out) in enumerate(chans, start=1):
        layers += [
            LayerSpec(f"block{i}.conv", "conv", {"in_channels": k_in, "out_channels": k_out, "kernel": 3}),
            LayerSpec(f"block{i}.bn", "batchnorm", {"channels": k_out}),
            LayerSpec(f"block{i}.act", "activation", {"family": family}, hookable=True),
        ]
        if i <= 2:
            layers.append(LayerSpec(f"pool{i}", "maxpool", {"size": 2}, hookable=True))
    layers += [
        LayerSpec("gap", "gap"),
        LayerSpec("fc", "fc", {"in_features": 32, "out_features": 2}),
    ]
    return layers


class Model:
    def __init__(self, layers, activation_family, input_size, name="custom"):
        self.layers = list(layers)
        self.activation_family = activation_family
        self.input_size = int(input_size)
        self.name = name
        self.mode = "eval"
        self.params = {}
        self.bn_stats = {}
        _validate_layers(self.layers)
        self._allocate()

    def _allocate(self):
        for layer in self.layers:
            p = layer.params
            if layer.kind == "conv":
                n = p["kernel"]
                self.params[layer.name + ".weight"] = np.zeros((p["out_channels"], p["in_channels"], n, n))
                self.params[layer.name + ".bias"] = np.zeros(p["out_channels"])
            elif layer.kind == "batchnorm":
                c = p["channels"]
                self.params[layer.name + ".weight"] = np.ones(c)
                self.params[layer.name + ".bias"] = np.zeros(c)
                self.bn_stats[layer.name + ".running_mean"] = np.zeros(c)
                self.bn_stats[layer.name + ".running_var"] = np.ones(c)
            elif layer.kind == "fc":
                self.params[layer.name + ".weight"] = np.zeros((p["out_features"], p["in_features"]))
                self.params[layer.name + ".bias"] = np.zeros(p["out_features"])

    @property
    def hookable(self):
        return [layer.name for layer in self.layers if layer.hookable]

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def copy(self):
        return copy.deepcopy(self)

    def n_parameters(self):
        return sum(v.size for v in self.params.values())


def _validate_layers(layers):
    seen = set()
    for layer in layers:
        if layer.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
        if layer.name in seen:
            raise ConfigError(f"duplicate layer name {layer.name!r}")
        seen.add(layer.name)
        if layer.kind == "activation" and layer.params.get("family") not in FAMILIES:
            raise ConfigError(f"layer {layer.name!r}: activation family must be one of {FAMILIES}")
        if layer.kind == "conv" and layer.params.get("kernel", 0) % 2 != 1:
            raise ConfigError(f"layer {layer.name!r}: conv kernel must be odd")


def build_model(config="micro-res"):
    """Construct a model from a stock variant name or a :class:`ModelConfig`."""
    if isinstance(config, str):
        config = ModelConfig(variant=config)
    elif isinstance(config, dict):
        config = ModelConfig(**config)
    if config.layers is not None:
        layers = [lay if isinstance(lay, LayerSpec) else LayerSpec.from_dict(lay) for lay in config.layers]
        families = {lay.params.get("family") for lay in layers if lay.kind == "activation"}
        family = config.activation_family or (families.pop() if len(families) == 1 else "relu")
        name = config.variant or "custom"
    else:
        if config.variant not in STOCK_VARIANTS:
            raise ConfigError(f"unknown model variant {config.variant!r}; expected one of {sorted(STOCK_VARIANTS)}")
        family = config.activation_family or STOCK_VARIANTS[config.variant]
        layers = stock_layers(family)
        name = config.variant
    model = Model(layers, family, config.input_size, name=name)
    he_initialize(model, np.random.default_rng(config.seed))
    return model


def he_initialize(model, rng, only=None):
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases, identity BN."""
    for layer in model.layers:
        if only is not None and layer.kind not in only:
            continue
        p = layer.params
        if layer.kind == "conv":
            fan_in = p["in_channels"] * p["kernel"] ** 2
            w = model.params[layer.name + ".weight"]
            model.params[layer.name + ".weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
            model.params[layer.name + ".bias"] = np.zeros(p["out_channels"])
        elif layer.kind == "fc":
            w = model.params[layer.name + ".weight"]
            model.params[layer.name + ".weight"] = rng.normal(0.0, np.sqrt(2.0 / p["in_features"]), size=w.shape)
            model.params[layer.name + ".bias"] = np.zeros(p["out_features"])
        elif layer.kind == "batchnorm":
            c = p["channels"]
            model.params[layer.name + ".weight"] = np.ones(c)
            model.params[layer.name + ".bias"] = np.zeros(c)
            model.bn_stats[layer.name + ".running_mean"] = np.zeros(c)
            model.bn_stats[layer.name + ".running_var"] = np.ones(c)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s + x * s * (1.0 - s)


def activation_forward(family, x):
    if family == "relu":
        return np.maximum(x, 0.0)
    return silu(x)


def activation_backward(family, mode, h_t, g_t, pre=None):
    """Gradient w.r.t. an activation's input given its output ``h_t``.

    ``g_t`` is the upstream gradient at the activation output and ``pre`` the
    activation input (needed for the exact SiLU derivative in standard mode).
    ReLU:  standard (h>0) g; deconv (g>0) g; guided (h>0)(g>0) g.
    SiLU:  standard a'(pre) g; deconv a'(g) g; guided a'(h) a'(g) g,
    with a'(x) = s(x) + x s(x) (1 - s(x)) applied verbatim to h_t and g_t.
    """
    if mode not in GRAD_MODES:
        raise ValueError(f"unknown gradient mode {mode!r}")
    h_t = np.asarray(h_t, dtype=np.float64)
    g_t = np.asarray(g_t, dtype=np.float64)
    if h_t.shape != g_t.shape:
        raise DimensionError(f"activation output {h_t.shape} and gradient {g_t.shape} differ")
    if family == "relu":
        if mode == "standard":
            return (h_t > 0) * g_t
        if mode == "deconv":
            return (g_t > 0) * g_t
        return (h_t > 0) * (g_t > 0) * g_t
    if family == "silu":
        if mode == "standard":
            if pre is None:
                raise ValueError("SiLU standard backward needs the pre-activation input")
            return silu_grad(np.asarray(pre, dtype=np.float64)) * g_t
        if mode == "deconv":
            return silu_grad(g_t) * g_t
        return silu_grad(h_t) * silu_grad(g_t) * g_t
    raise ValueError(f"unknown activation family {family!r}")


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


@dataclass
class HookRecord:
    """Activations and upstream gradients captured at hooked layers.

    For a single-image forward the arrays are ``K' x H' x W'``; for a batch
    they carry a leading batch axis (use :meth:`split` for per-sample views).
    """

    activations: dict = field(default_factory=dict)
    gradients: dict = field(default_factory=dict)
    logits: np.ndarray = None
    input: np.ndarray = None
    input_grad: np.ndarray = None
    param_grads: dict = None
    layer_grads: dict = None
    outputs: dict = None
    batched: bool = False
    mode: str = None
    _tape: list = None

    def pair(self, name):
        if name not in self.activations:
            raise StateError(f"layer {name!r} was not hooked")
        if name not in self.gradients:
            raise StateError(f"no gradient recorded for {name!r}; run backward first")
        return self.activations[name], self.gradients[name]

    def split(self):
        if not self.batched:
            return [self]
        out = []
        for i in range(self.logits.shape[0]):
            out.append(HookRecord(
                activations={k: v[i] for k, v in self.activations.items()},
                gradients={k: v[i] for k, v in self.gradients.items()},
                logits=self.logits[i],
                input=self.input[i],
                input_grad=None if self.input_grad is None else self.input_grad[i],
                mode=self.mode,
            ))
        return out


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        xb, single = x[None], True
    elif x.ndim == 4:
        xb, single = x, False
    else:
        raise DimensionError(f"expected 1 x H x W or B x 1 x H x W input, got shape {x.shape}")
    want = model.layers[0].params.get("in_channels", 1) if model.layers[0].kind == "conv" else xb.shape[1]
    if xb.shape[1] != want or xb.shape[2:] != (model.input_size, model.input_size):
        raise DimensionError(
            f"input shape {xb.shape[1:]} does not match model input {(want, model.input_size, model.input_size)}"
        )
    return xb, single


def forward(model, x, hooks=()):
    """Run the network; returns ``(logits, HookRecord)``.

    ``x`` is ``1 x H x W`` (logits shape ``(2,)``) or ``B x 1 x H x W``.
    In train mode BatchNorm uses batch statistics and updates its running
    averages; in eval mode the running averages are used.
    """
    hooks = list(hooks)
    hookable = set(model.hookable)
    for name in hooks:
        if name not in hookable:
            raise ConfigError(f"{name!r} is not a hookable layer of this model (hookable: {sorted(hookable)})")
    xb, single = _as_batch(model, x)
    training = model.mode == "train"
    tape = []
    outputs = {}
    h = xb
    for layer in model.layers:
        kind, p = layer.kind, model.params
        if kind == "conv":
            n = layer.params["kernel"]
            out, cols = conv2d_forward(h, p[layer.name + ".weight"], p[layer.name + ".bias"],
                                       stride=1, pad=(n - 1) // 2, return_cols=True)
            cache = (h, cols)
        elif kind == "batchnorm":
            gamma = p[layer.name + ".weight"]
            beta = p[layer.name + ".bias"]
            if training:
                mean = h.mean(axis=(0, 2, 3))
                var = h.var(axis=(0, 2, 3))
                m = h.shape[0] * h.shape[2] * h.shape[3]
                rm, rv = layer.name + ".running_mean", layer.name + ".running_var"
                model.bn_stats[rm] = (1 - BN_MOMENTUM) * model.bn_stats[rm] + BN_MOMENTUM * mean
                unbiased = var * m / max(m - 1, 1)
                model.bn_stats[rv] = (1 - BN_MOMENTUM) * model.bn_stats[rv] + BN_MOMENTUM * unbiased
            else:
                mean = model.bn_stats[layer.name + ".running_mean"]
                var = model.bn_stats[layer.name + ".running_var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (h - mean[:, None, None]) * inv_std[:, None, None]
            out = gamma[:, None, None] * xhat + beta[:, None, None]
            cache = (xhat, inv_std, training)
        elif kind == "activation":
            out = activation_forward(layer.params["family"], h)
            cache = (h, out)
        elif kind == "maxpool":
            out, arg = kernels.maxpool2_forward(np.ascontiguousarray(h))
            cache = (arg, h.shape)
        elif kind == "gap":
            out = h.mean(axis=(2, 3))
            cache = h.shape
        elif kind == "fc":
            if h.ndim != 2:
                h = h.reshape(h.shape[0], -1)
            out = h @ p[layer.name + ".weight"].T + p[layer.name + ".bias"]
            cache = h
        tape.append((layer, cache))
        outputs[layer.name] = out
        h = out
    logits = h
    strip = (lambda a: a[0]) if single else (lambda a: a)
    record = HookRecord(
        activations={name: strip(outputs[name]).copy() for name in hooks},
        logits=strip(logits),
        input=strip(xb),
        outputs=outputs,
        batched=not single,
        _tape=tape,
    )
    return strip(logits), record


def backward_seed(model, record, dlogits, mode="standard", param_grads=False, input_grad=True, trace=False):
    """Backpropagate an arbitrary logit gradient ``dlogits`` (``B x C``).

    Fills ``record.gradients`` for every hooked layer, ``record.input_grad``,
    and optionally ``record.param_grads`` and (with ``trace``)
    ``record.layer_grads[name] = (grad_at_output, grad_at_input)``.
    """
    if record is None or record._tape is None:
        raise StateError("backward called before forward")
    if mode not in GRAD_MODES:
        raise ValueError(f"unknown gradient mode {mode!r}")
    g = np.asarray(dlogits, dtype=np.float64)
    if g.ndim == 1:
        g = g[None]
    grads = {} if param_grads else None
    layer_grads = {} if trace else None
    hooked = set(record.activations)
    hook_grads = {}
    tape = record._tape
    for idx in range(len(tape) - 1, -1, -1):
        layer, cache = tape[idx]
        kind, p = layer.kind, model.params
        if layer.name in hooked:
            hook_grads[layer.name] = g.copy()
        g_out = g
        if kind == "fc":
            h = cache
            if param_grads:
                grads[layer.name + ".weight"] = g.T @ h
                grads[layer.name + ".bias"] = g.sum(axis=0)
            g = g @ p[layer.name + ".weight"]
        elif kind == "gap":
            b_, c_, hh, ww = cache
            g = np.broadcast_to(g[:, :, None, None] / (hh * ww), cache).copy()
        elif kind == "maxpool":
            arg, shape = cache
            g = kernels.maxpool2_backward(np.ascontiguousarray(g), arg, shape[2], shape[3])
        elif kind == "activation":
            pre, out = cache
            g = activation_backward(layer.params["family"], mode, out, g, pre=pre)
        elif kind == "batchnorm":
            xhat, inv_std, training = cache
            gamma = p[layer.name + ".weight"]
            if param_grads:
                grads[layer.name + ".weight"] = (g * xhat).sum(axis=(0, 2, 3))
                grads[layer.name + ".bias"] = g.sum(axis=(0, 2, 3))
            if training:
                m = g.shape[0] * g.shape[2] * g.shape[3]
                dxhat = g * gamma[:, None, None]
                s1 = dxhat.sum(axis=(0, 2, 3))[:, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[:, None, None]
                g = inv_std[:, None, None] / m * (m * dxhat - s1 - xhat * s2)
            else:
                g = g * (gamma * inv_std)[:, None, None]
        elif kind == "conv":
            h, cols = cache
            n = layer.params["kernel"]
            need_x = input_grad or idx > 0
            gx, gw, gb = conv2d_backward(h, p[layer.name + ".weight"], g, stride=1, pad=(n - 1) // 2,
                                         cols=cols, need_input_grad=need_x)
            if param_grads:
                grads[layer.name + ".weight"] = gw
                grads[layer.name + ".bias"] = gb
            g = gx
        if trace:
            layer_grads[layer.name] = (g_out, g)
    strip = (lambda a: a) if record.batched else (lambda a: a[0])
    record.gradients = {name: strip(v) for name, v in hook_grads.items()}
    record.input_grad = None if g is None else strip(g)
    record.param_grads = grads
    record.layer_grads = layer_grads
    record.mode = mode
    return record


def backward(model, target_class, mode="standard", record=None, param_grads=False, trace=False):
    """Seed d(logit[target])/d(logits) = one-hot and backpropagate.

    ``target_class`` is an int, or a sequence with one class per batch item.
    Returns ``(input_grad, record)``.
    """
    if record is None or record._tape is None:
        raise StateError("backward called before forward")
    logits = np.atleast_2d(record.logits)
    targets = np.broadcast_to(np.asarray(target_class, dtype=np.int64), (logits.shape[0],))
    if np.any(targets < 0) or np.any(targets >= logits.shape[1]):
        raise ValueError(f"target class out of range: {target_class}")
    seed = np.zeros_like(logits)
    seed[np.arange(len(targets)), targets] = 1.0
    backward_seed(model, record, seed, mode=mode, param_grads=param_grads, trace=trace)
    return record.input_grad, record


# --------------------------------------------------------------------------
# randomization and checkpoints
# --------------------------------------------------------------------------


def randomize_model(model, scheme, seed, donor=None):
    """Return a re-initialized copy of ``model``.

    ``FR``: every parameter He-initialized. ``SR``: conv and BatchNorm
    parameters (and running stats) copied from ``donor`` (a Model or a
    checkpoint path), final FC He-initialized. ``trained-load``: all
    parameters copied from ``donor``.
    """
    out = model.copy()
    rng = np.random.default_rng(seed)
    if scheme == "FR":
        he_initialize(out, rng)
        return out
    if scheme not in ("SR", "trained-load"):
        raise ValueError(f"unknown randomization scheme {scheme!r}")
    if donor is None:
        raise MissingResourceError(f"{scheme} randomization needs a donor checkpoint")
    if not isinstance(donor, Model):
        if not Path(donor).exists():
            raise MissingResourceError(f"donor checkpoint {donor} not found")
        donor, _ = load_checkpoint(donor)
    for name, value in donor.params.items():
        if name not in out.params or out.params[name].shape != value.shape:
            raise ConfigError(f"donor parameter {name!r} does not fit the target model")
        out.params[name] = value.copy()
    for name, value in donor.bn_stats.items():
        out.bn_stats[name] = value.copy()
    if scheme == "SR":
        he_initialize(out, rng, only=("fc",))
    return out


_MAGIC = "salforge-checkpoint/1"


def save_checkpoint(model, path, metadata=None):
    """Write a JSON manifest line followed by little-endian float64 blobs."""
    entries = []
    blobs = []
    offset = 0
    for group, tensors in (("param", model.params), ("bn_stat", model.bn_stats)):
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            entries.append({"name": name, "group": group, "shape": list(arr.shape),
                            "offset": offset, "nbytes": arr.nbytes})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    manifest = {
        "format": _MAGIC,
        "model_name": model.name,
        "activation_family": model.activation_family,
        "input_size": model.input_size,
        "layers": [layer.to_dict() for layer in model.layers],
        "tensors": entries,
        "metadata": metadata or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, metadata)``."""
    path = Path(path)
    if not path.exists():
        raise MissingResourceError(f"checkpoint {path} not found")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ConfigError(f"{path}: missing checkpoint manifest")
    manifest = json.loads(raw[:nl].decode("utf-8"))
    if manifest.get("format") != _MAGIC:
        raise ConfigError(f"{path}: not a salforge checkpoint")
    body = raw[nl + 1:]
    layers = [LayerSpec.from_dict(d) for d in manifest["layers"]]
    model = Model(layers, manifest["activation_family"], manifest["input_size"], name=manifest["model_name"])
    for e in manifest["tensors"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ConfigError(f"{path}: truncated tensor {e['name']!r}")
        arr = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        target = model.params if e["group"] == "param" else model.bn_stats
        target[e["name"]] = arr
    return model, manifest["metadata"]

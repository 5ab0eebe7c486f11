"""Toy segmentation network, slimming, and the streaming executor.

The reference architecture (``w`` = base width, all convs with bias)::

    stem      conv3x3  in->w                        never masked
    b1, b2    residual blocks at w (two conv3x3)    masked
    pool      maxpool 2x2
    b3        residual block w->2w with conv1x1
              projection on the shortcut            convs masked, projection not
    b4        residual block at 2w                  masked
    up        nearest upsample 2x
    fusion    conv3x3 2w->w, added to b2's output   masked
    head      conv1x1 w->num_classes                never masked

A network built with ``rho=None`` is the stateless baseline: it has no
masked layers.  Otherwise every eligible conv gets a rho-BG schedule over its
(slimmed) output channels.  Convs with fewer than two output channels are
never masked.

Weights on disk are a directory of CWMT files plus ``manifest.json``.
"""
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import cwmt, ops
from .cwm import CwmConvLayer, CwmState, cwm_backward, cwm_forward
from .masks import bistep_generator

CONV_KINDS = ("conv", "cwm_conv")
MANIFEST = "manifest.json"
WEIGHTS_FORMAT = "cwmstream-weights/1"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple
    cin: int
    cout: int
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    cwm_eligible: bool = False
    role: str = ""

    @property
    def is_conv(self):
        return self.kind in CONV_KINDS


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    num_classes: int
    in_channels: int = 3
    base_width: int = 16
    alpha: float = 1.0
    rho: float | None = None
    cwm_stem: bool = False
    cwm_skip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.rho is not None and not 0 <= self.rho <= 1:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        self._check_channels()

    def _check_channels(self):
        width = {"input": self.in_channels}
        for layer in self.layers:
            for src in layer.inputs:
                if src not in width:
                    raise ValueError(f"{layer.name}: unknown input {src!r}")
            got = [width[s] for s in layer.inputs]
            if layer.is_conv and layer.cout < 1:
                raise ValueError(f"{layer.name}: needs at least one output channel")
            if layer.kind == "residual_add":
                if len(set(got)) != 1:
                    raise ValueError(f"{layer.name}: adding {got} channels")
            elif got[0] != layer.cin:
                raise ValueError(f"{layer.name}: expects {layer.cin} channels, input has {got[0]}")
            width[layer.name] = layer.cout
        if width[self.layers[-1].name] != self.num_classes:
            raise ValueError("last layer must produce num_classes channels")

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def convs(self):
        return [l for l in self.layers if l.is_conv]

    @property
    def cwm_layers(self):
        return [l for l in self.layers if l.kind == "cwm_conv"]

    @property
    def stateful(self):
        return bool(self.cwm_layers)

    def cwm_depth(self):
        """Largest number of masked convs on any input-to-output path."""
        depth = {"input": 0}
        for layer in self.layers:
            d = max(depth[s] for s in layer.inputs)
            depth[layer.name] = d + (layer.kind == "cwm_conv")
        return depth[self.layers[-1].name]

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [dict(asdict(l), inputs=list(l.inputs)) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layers"] = [LayerSpec(**dict(l, inputs=tuple(l["inputs"]))) for l in d["layers"]]
        return cls(**d)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def scale_width(channels, alpha):
    """``max(1, round(alpha * channels))`` with halves rounded up."""
    a = Fraction(repr(float(alpha)))
    return max(1, math.floor(a * channels + Fraction(1, 2)))


def _assign_kinds(layers, rho):
    out = []
    for l in layers:
        if l.is_conv:
            masked = rho is not None and l.cwm_eligible and l.cout >= 2
            l = replace(l, kind="cwm_conv" if masked else "conv")
        out.append(l)
    return out


def toynet_spec(num_classes, base_width=16, rho=None, in_channels=3, cwm_stem=False, cwm_skip=False):
    """Un-slimmed reference architecture."""
    if base_width < 8:
        raise ValueError(f"base_width must be >= 8, got {base_width}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    w, w2 = base_width, 2 * base_width
    L = []

    def conv(name, src, cin, cout, k, role, eligible):
        L.append(LayerSpec(name, "conv", (src,), cin, cout, k, 1, k // 2, eligible, role))

    def unary(name, kind, src, c):
        L.append(LayerSpec(name, kind, (src,), c, c))

    def block(name, src, cin, cout):
        conv(f"{name}_conv1", src, cin, cout, 3, "block", True)
        unary(f"{name}_relu1", "relu", f"{name}_conv1", cout)
        conv(f"{name}_conv2", f"{name}_relu1", cout, cout, 3, "block", True)
        shortcut = src
        if cin != cout:
            conv(f"{name}_proj", src, cin, cout, 1, "skip", cwm_skip)
            shortcut = f"{name}_proj"
        L.append(LayerSpec(f"{name}_add", "residual_add", (f"{name}_conv2", shortcut), cout, cout))
        unary(f"{name}_relu2", "relu", f"{name}_add", cout)
        return f"{name}_relu2"

    conv("stem", "input", in_channels, w, 3, "stem", cwm_stem)
    unary("stem_relu", "relu", "stem", w)
    x = block("b1", "stem_relu", w, w)
    skip = block("b2", x, w, w)
    unary("pool", "maxpool", skip, w)
    x = block("b3", "pool", w, w2)
    x = block("b4", x, w2, w2)
    unary("up", "upsample", x, w2)
    conv("fusion", "up", w2, w, 3, "fusion", True)
    L.append(LayerSpec("fusion_add", "residual_add", ("fusion", skip), w, w))
    unary("fusion_relu", "relu", "fusion_add", w)
    conv("head", "fusion_relu", w, num_classes, 1, "head", False)
    return NetworkSpec(_assign_kinds(L, rho), num_classes, in_channels, base_width, 1.0,
                       rho, cwm_stem, cwm_skip)


def slim(spec, alpha):
    """Scale every conv's channels by ``alpha``; the network's input channels
    and the head's class channels are kept."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if alpha == 1:
        return spec
    first, last = spec.layers[0].name, spec.layers[-1].name
    layers = []
    for l in spec.layers:
        cin = l.cin if l.name == first else scale_width(l.cin, alpha)
        cout = l.cout if l.name == last else scale_width(l.cout, alpha)
        layers.append(replace(l, cin=cin, cout=cout, kind="conv" if l.is_conv else l.kind))
    return replace(spec, layers=tuple(_assign_kinds(layers, spec.rho)), alpha=float(alpha) * spec.alpha)


@dataclass(eq=False)
class Network:
    spec: NetworkSpec
    params: dict
    schedules: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.schedules:
            self.schedules = {l.name: bistep_generator(l.cout, self.spec.rho) for l in self.spec.cwm_layers}

    @property
    def dtype(self):
        return next(iter(self.params.values()))[0].dtype

    def astype(self, dtype):
        params = {k: (w.astype(dtype), b.astype(dtype)) for k, (w, b) in self.params.items()}
        return Network(self.spec, params, dict(self.schedules))

    def copy(self):
        return self.astype(self.dtype)

    def num_params(self):
        return sum(w.size + b.size for w, b in self.params.values())

    def cwm_layer(self, name):
        w, b = self.params[name]
        l = self.spec.layer(name)
        return CwmConvLayer(w, b, self.schedules[name], l.stride, l.padding)

    def forward(self, x):
        """Stateless forward pass with every conv unmasked."""
        return _execute(self, x, None, False)[0]


def init_params(spec, seed=0, dtype=np.float32):
    """He-normal kernels, zero biases, drawn layer by layer from one seeded stream."""
    rng = np.random.default_rng(seed)
    params = {}
    for l in spec.convs:
        fan_in = l.cin * l.kernel * l.kernel
        w = rng.standard_normal((l.cout, l.cin, l.kernel, l.kernel)) * math.sqrt(2.0 / fan_in)
        if l.role == "head":
            w *= 0.1
        params[l.name] = (w.astype(dtype), np.zeros(l.cout, dtype=dtype))
    return params


def build_toynet(num_classes=5, base_width=16, alpha=1.0, rho=None, seed=0,
                 cwm_stem=False, cwm_skip=False, dtype=np.float32):
    if rho is not None and not 0 <= rho <= 1:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    spec = slim(toynet_spec(num_classes, base_width, rho, cwm_stem=cwm_stem, cwm_skip=cwm_skip), alpha)
    return Network(spec, init_params(spec, seed, dtype))


class StreamSession:
    """Per-sequence state: one :class:`CwmState` per masked layer and a shared step."""

    def __init__(self, net):
        self.net = net
        self.reset()

    def reset(self):
        self.step = 0
        self.states = {l.name: CwmState() for l in self.net.spec.cwm_layers}
        self.frame_shape = None
        self.tapes = []

    def forward(self, frame, record=False):
        return stream_forward(self, frame, record)


def stream_forward(session, frame, record=False):
    """Advance the session by one frame and return its logits.

    With ``record=True`` the activations of this step are appended to
    ``session.tapes`` for :func:`backward`.
    """
    if session.frame_shape is None:
        session.frame_shape = frame.shape
    elif frame.shape != session.frame_shape:
        raise ops.ShapeError(f"frame size changed mid-session: {session.frame_shape} -> {frame.shape}")
    logits, acts, new_states = _execute(session.net, frame, session.states, record)
    session.states.update(new_states)
    if record:
        session.tapes.append((session.step, acts, new_states))
    session.step += 1
    return logits


def _execute(net, x, states, keep):
    acts = {"input": x}
    new_states = {}
    for l in net.spec.layers:
        a = [acts[s] for s in l.inputs]
        if l.kind == "cwm_conv" and states is not None:
            out, new_states[l.name] = cwm_forward(net.cwm_layer(l.name), states[l.name], a[0])
        elif l.is_conv:
            w, b = net.params[l.name]
            out = ops.conv2d(a[0], w, b, l.stride, l.padding)
        elif l.kind == "relu":
            out = ops.relu(a[0])
        elif l.kind == "maxpool":
            out = ops.maxpool2x2(a[0])
        elif l.kind == "upsample":
            out = ops.upsample_nearest2x(a[0])
        elif l.kind == "residual_add":
            out = ops.add(a[0], a[1])
        else:
            raise ValueError(f"unknown layer kind {l.kind!r}")
        acts[l.name] = out
    logits = acts[net.spec.layers[-1].name]
    return logits, (acts if keep else None), new_states


def _accumulate(store, name, g):
    store[name] = store[name] + g if name in store else g


def _step_backward(net, acts, states, g_act, grads):
    """Backpropagate one recorded step.  ``g_act`` maps layer names to output
    gradients (consumed); returns gradients w.r.t. the cached outputs this
    step read, keyed by masked layer."""
    to_cache = {}
    for l in reversed(net.spec.layers):
        g = g_act.pop(l.name, None)
        if g is None:
            continue
        a = [acts[s] for s in l.inputs]
        if l.kind == "cwm_conv":
            layer = net.cwm_layer(l.name)
            gi, gk, gb = cwm_backward(layer, states[l.name], a[0], g)
            m = layer.mask_at(states[l.name].step - 1)
            if m is not None and m.count < layer.out_channels:
                gc = g.copy()
                gc[:, m.start:m.end] = 0
                to_cache[l.name] = gc
        elif l.is_conv:
            w, _ = net.params[l.name]
            gi, gk, gb = ops.conv2d_backward(g, a[0], w, l.stride, l.padding)
        elif l.kind == "relu":
            _accumulate(g_act, l.inputs[0], ops.relu_backward(g, a[0]))
            continue
        elif l.kind == "maxpool":
            _accumulate(g_act, l.inputs[0], ops.maxpool_backward(g, a[0]))
            continue
        elif l.kind == "upsample":
            _accumulate(g_act, l.inputs[0], ops.upsample_backward(g))
            continue
        elif l.kind == "residual_add":
            _accumulate(g_act, l.inputs[0], g)
            _accumulate(g_act, l.inputs[1], g)
            continue
        if l.name in grads:
            grads[l.name] = (grads[l.name][0] + gk, grads[l.name][1] + gb)
        else:
            grads[l.name] = (gk, gb)
        _accumulate(g_act, l.inputs[0], gi)
    return to_cache


def backward(session, grad_logits, through_time=False):
    """Parameter gradients of the loss on the last recorded step's logits.

    By default masked layers pass gradient only through the channels computed
    at that step and cached channels are constants.  With
    ``through_time=True`` gradients also flow into the cached channels and
    back through every earlier step, which must all have been recorded.
    Returns ``{name: (grad_kernel, grad_bias)}``.
    """
    if not session.tapes:
        raise ValueError("no recorded step; call stream_forward(..., record=True) first")
    net = session.net
    grads = {}
    if through_time:
        steps = [t[0] for t in session.tapes]
        if steps != list(range(session.step)):
            raise ValueError("backpropagation through time needs every step recorded")
        tapes = session.tapes[::-1]
    else:
        tapes = session.tapes[-1:]
    carry = {}
    for i, (_, acts, states) in enumerate(tapes):
        g_act = dict(carry)
        if i == 0:
            g_act[net.spec.layers[-1].name] = grad_logits
        carry = _step_backward(net, acts, states, g_act, grads)
    for name, (w, b) in net.params.items():
        if name not in grads:
            grads[name] = (np.zeros_like(w), np.zeros_like(b))
    return grads


def save_weights(net, path):
    os.makedirs(path, exist_ok=True)
    entries = []
    for name, (w, b) in net.params.items():
        kfile, bfile = f"{name}.kernel.cwmt", f"{name}.bias.cwmt"
        cwmt.save(os.path.join(path, kfile), w)
        cwmt.save(os.path.join(path, bfile), b)
        entries.append({"name": name, "kernel": kfile, "bias": bfile,
                        "kernel_shape": list(w.shape), "bias_shape": list(b.shape)})
    manifest = {"format": WEIGHTS_FORMAT, "spec": net.spec.to_dict(), "layers": entries}
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2)


def load_weights(path, spec=None):
    """Load a weights directory, optionally checking it against ``spec``.

    Every file is read and validated before a network is returned, so a
    failure leaves nothing half-loaded.
    """
    with open(os.path.join(path, MANIFEST)) as f:
        manifest = json.load(f)
    if manifest.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"{path}: unknown weights format {manifest.get('format')!r}")
    saved_spec = NetworkSpec.from_dict(manifest["spec"])
    spec = spec or saved_spec
    params = {}
    for e in manifest["layers"]:
        w = cwmt.load(os.path.join(path, e["kernel"]))
        b = cwmt.load(os.path.join(path, e["bias"]))
        if list(w.shape) != e["kernel_shape"] or list(b.shape) != e["bias_shape"]:
            raise ValueError(f"{e['name']}: file shape disagrees with manifest")
        params[e["name"]] = (w, b)
    for l in spec.convs:
        if l.name not in params:
            raise ValueError(f"{l.name}: missing from {path}")
        want = (l.cout, l.cin, l.kernel, l.kernel)
        if params[l.name][0].shape != want:
            raise ValueError(f"{l.name}: kernel shape {params[l.name][0].shape}, spec expects {want}")
    return Network(spec, {l.name: params[l.name] for l in spec.convs})

"""Feedforward ReLU networks assembled from a declarative layer list.

A NetworkSpec is a validated, serializable description (input shape plus a
tuple of LayerSpec entries); a Network owns the parameter and buffer arrays
and knows how to record its forward pass on a tape, in inference or training
form. Batch norm in training form is a composite of primitive ops through the
batch statistics, so its gradient needs no dedicated rule; in inference form
it is a frozen affine map per feature. There is no stochastic layer anywhere:
given arrays in, the forward pass is a pure function.

Weights use He initialization, gain sqrt(2 / fan_in), biases zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from . import tensor as tz
from .tensor import ConvGeometry, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_CKPT_MAGIC = b"GLCK"
_CKPT_VERSION = 1

_LAYER_KINDS = ("dense", "conv", "relu", "batchnorm", "avgpool", "maxpool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int = 0
    channels: int = 0
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    dilation: tuple = (1, 1)
    padding: tuple = (0, 0)
    mask: tuple = (2, 2)

    def __post_init__(self):
        if self.kind not in _LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}, expected one of {_LAYER_KINDS}")

    @staticmethod
    def dense(width: int) -> "LayerSpec":
        if width < 1:
            raise ValueError(f"dense width must be positive, got {width}")
        return LayerSpec("dense", width=width)

    @staticmethod
    def conv(channels: int, kernel=3, stride=1, dilation=1, padding=0) -> "LayerSpec":
        if channels < 1:
            raise ValueError(f"conv channels must be positive, got {channels}")
        return LayerSpec("conv", channels=channels, kernel=tz._pair(kernel, "kernel"),
                         stride=tz._pair(stride, "stride"),
                         dilation=tz._pair(dilation, "dilation"),
                         padding=tz._pair(padding, "padding"))

    @staticmethod
    def relu() -> "LayerSpec":
        return LayerSpec("relu")

    @staticmethod
    def batchnorm() -> "LayerSpec":
        return LayerSpec("batchnorm")

    @staticmethod
    def avgpool(mask=2) -> "LayerSpec":
        return LayerSpec("avgpool", mask=tz._pair(mask, "mask"))

    @staticmethod
    def maxpool(mask=2) -> "LayerSpec":
        return LayerSpec("maxpool", mask=tz._pair(mask, "mask"))

    @staticmethod
    def flatten() -> "LayerSpec":
        return LayerSpec("flatten")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "dense":
            d["width"] = self.width
        elif self.kind == "conv":
            d.update(channels=self.channels, kernel=list(self.kernel),
                     stride=list(self.stride), dilation=list(self.dilation),
                     padding=list(self.padding))
        elif self.kind in ("avgpool", "maxpool"):
            d["mask"] = list(self.mask)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        kind = d["kind"]
        if kind == "dense":
            return LayerSpec.dense(d["width"])
        if kind == "conv":
            return LayerSpec.conv(d["channels"], kernel=tuple(d["kernel"]),
                                  stride=tuple(d["stride"]),
                                  dilation=tuple(d["dilation"]),
                                  padding=tuple(d["padding"]))
        if kind == "avgpool":
            return LayerSpec.avgpool(tuple(d["mask"]))
        if kind == "maxpool":
            return LayerSpec.maxpool(tuple(d["mask"]))
        return LayerSpec(kind)


@dataclass(frozen=True)
class NetworkSpec:
    """Input shape (channels-first for images, a single extent for flat
    vectors) plus an ordered tuple of layers ending in the logit layer."""

    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        shape = tuple(int(n) for n in self.input_shape)
        if len(shape) not in (1, 3) or any(n < 1 for n in shape):
            raise ValueError(f"input shape must be (d,) or (c, h, w) with positive "
                             f"extents, got {self.input_shape}")
        object.__setattr__(self, "input_shape", shape)
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()

    def shapes(self) -> list:
        """Per-layer output shapes (unbatched); raises naming the offending
        layer when the stack is inconsistent."""
        out = []
        cur = self.input_shape
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer.kind})"
            if layer.kind == "dense":
                if len(cur) != 1:
                    raise ValueError(f"{where}: dense needs a flat input, got shape {cur}"
                                     " (insert a flatten layer)")
                cur = (layer.width,)
            elif layer.kind == "conv":
                if len(cur) != 3:
                    raise ValueError(f"{where}: conv needs a (c, h, w) input, got shape {cur}")
                geom = ConvGeometry(layer.kernel, stride=layer.stride,
                                    dilation=layer.dilation, padding=layer.padding)
                try:
                    h, w = geom.out_extent(cur[1:])
                except ValueError as e:
                    raise ValueError(f"{where}: {e}") from None
                cur = (layer.channels, h, w)
            elif layer.kind in ("avgpool", "maxpool"):
                if len(cur) != 3:
                    raise ValueError(f"{where}: pooling needs a (c, h, w) input, got shape {cur}")
                mh, mw = layer.mask
                if cur[1] % mh or cur[2] % mw:
                    raise ValueError(f"{where}: mask {layer.mask} does not divide "
                                     f"spatial extents {cur[1:]}")
                cur = (cur[0], cur[1] // mh, cur[2] // mw)
            elif layer.kind == "flatten":
                cur = (int(np.prod(cur)),)
            elif layer.kind in ("relu", "batchnorm"):
                pass
            out.append(cur)
        return out

    def in_degrees(self) -> dict:
        """Fan-in per parameterized layer index (dense and conv only)."""
        deg = {}
        cur = self.input_shape
        for i, (layer, nxt) in enumerate(zip(self.layers, self.shapes())):
            if layer.kind == "dense":
                deg[i] = cur[0]
            elif layer.kind == "conv":
                deg[i] = cur[0] * layer.kernel[0] * layer.kernel[1]
            cur = nxt
        return deg

    def out_shape(self) -> tuple:
        shapes = self.shapes()
        return shapes[-1] if shapes else self.input_shape

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [l.to_dict() for l in self.layers]}

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        return NetworkSpec(tuple(d["input_shape"]),
                           tuple(LayerSpec.from_dict(x) for x in d["layers"]))


def _param_shapes(spec: NetworkSpec) -> tuple:
    """(params, buffers): ordered dicts of name -> shape."""
    params, buffers = {}, {}
    cur = spec.input_shape
    for i, (layer, nxt) in enumerate(zip(spec.layers, spec.shapes())):
        if layer.kind == "dense":
            params[f"{i}.weight"] = (cur[0], layer.width)
            params[f"{i}.bias"] = (layer.width,)
        elif layer.kind == "conv":
            params[f"{i}.weight"] = (layer.channels, cur[0]) + layer.kernel
            params[f"{i}.bias"] = (layer.channels,)
        elif layer.kind == "batchnorm":
            n = cur[0]
            params[f"{i}.gamma"] = (n,)
            params[f"{i}.beta"] = (n,)
            buffers[f"{i}.running_mean"] = (n,)
            buffers[f"{i}.running_var"] = (n,)
        cur = nxt
    return params, buffers


class Network:
    """Parameter store plus the tape-recorded forward pass for a spec."""

    def __init__(self, spec: NetworkSpec, params: dict, buffers: dict, meta=None):
        want_p, want_b = _param_shapes(spec)
        for want, got, label in ((want_p, params, "parameter"),
                                 (want_b, buffers, "buffer")):
            if set(want) != set(got):
                raise ValueError(f"{label} names do not match the spec: expected "
                                 f"{sorted(want)}, got {sorted(got)}")
            for name, shape in want.items():
                a = np.asarray(got[name], dtype=np.float64)
                if a.shape != shape:
                    raise ValueError(f"{label} {name} has shape {a.shape}, expected {shape}")
        self.spec = spec
        self.params = {k: np.array(params[k], dtype=np.float64) for k in want_p}
        self.buffers = {k: np.array(buffers[k], dtype=np.float64) for k in want_b}
        self.meta = dict(meta or {})

    def clone(self) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.buffers.items()},
                       dict(self.meta))

    def param_names(self) -> list:
        return list(self.params)

    def lift_params(self, tape: ad.Tape) -> dict:
        """Record every parameter as a tape input, for differentiation."""
        return {name: tape.input(arr) for name, arr in self.params.items()}

    # -- forward -----------------------------------------------------------

    def _batchnorm(self, tape, x, i, gamma, beta, train, update_stats):
        conv_form = len(x.shape) == 4
        c = x.shape[1]
        bshape = (1, c, 1, 1) if conv_form else (1, c)

        def spread(node):
            return ad.broadcast_to(ad.reshape(node, bshape), x.shape)

        if train:
            count = x.shape[0] * (x.shape[2] * x.shape[3] if conv_form else 1)
            axes = (3, 2, 0) if conv_form else (0,)
            s1 = x
            s2 = ad.mul(x, x)
            for axis in axes:
                s1 = ad.nsum(s1, axis=axis)
                s2 = ad.nsum(s2, axis=axis)
            mean = ad.mul(s1, tape.const(1.0 / count))
            var = ad.sub(ad.mul(s2, tape.const(1.0 / count)), ad.mul(mean, mean))
            if update_stats:
                m = BN_MOMENTUM
                rm, rv = self.buffers[f"{i}.running_mean"], self.buffers[f"{i}.running_var"]
                rm *= 1.0 - m
                rm += m * np.asarray(mean.tensor)
                rv *= 1.0 - m
                rv += m * np.asarray(var.tensor)
            inv = ad.powc(ad.add(var, tape.const(BN_EPS)), -0.5)
            scale = ad.mul(gamma, inv)
            shift = ad.sub(beta, ad.mul(mean, scale))
        else:
            rm = tape.const(self.buffers[f"{i}.running_mean"])
            rv = tape.const(self.buffers[f"{i}.running_var"])
            inv = ad.powc(ad.add(rv, tape.const(BN_EPS)), -0.5)
            scale = ad.mul(gamma, inv)
            shift = ad.sub(beta, ad.mul(rm, scale))
        return ad.add(ad.mul(x, spread(scale)), spread(shift))

    def forward_graph(self, tape: ad.Tape, x: ad.Node, train: bool = False,
                      params: dict = None, update_stats: bool = False) -> ad.Node:
        """Record the forward pass on the tape and return the logit node.

        x is a node of shape input_shape or (N,) + input_shape. params maps
        name -> node (see lift_params); when omitted, current parameter
        arrays enter as constants. update_stats refreshes batch-norm running
        statistics from this batch (training form only).
        """
        in_shape = self.spec.input_shape
        if x.shape == in_shape:
            batched = False
        elif len(x.shape) == len(in_shape) + 1 and x.shape[1:] == in_shape:
            batched = True
        else:
            raise ValueError(f"input shape {x.shape} does not match spec input "
                             f"{in_shape} (optionally with a leading batch axis)")

        def p(name):
            if params is not None:
                return params[name]
            return tape.const(self.params[name])

        cur = x if batched else ad.reshape(x, (1,) + in_shape)
        n = cur.shape[0]
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "dense":
                w, b = p(f"{i}.weight"), p(f"{i}.bias")
                cur = ad.add(ad.matmul(cur, w), ad.reshape(b, (1, b.shape[0])))
            elif layer.kind == "conv":
                w, b = p(f"{i}.weight"), p(f"{i}.bias")
                geom = ConvGeometry(layer.kernel, stride=layer.stride,
                                    dilation=layer.dilation, padding=layer.padding)
                cur = ad.conv2d(cur, w, geom)
                cur = ad.add(cur, ad.broadcast_to(
                    ad.reshape(b, (1, b.shape[0], 1, 1)), cur.shape))
            elif layer.kind == "relu":
                cur = ad.relu(cur)
            elif layer.kind == "batchnorm":
                cur = self._batchnorm(tape, cur, i, p(f"{i}.gamma"), p(f"{i}.beta"),
                                      train, update_stats)
            elif layer.kind == "avgpool":
                cur = ad.avg_pool(cur, layer.mask)
            elif layer.kind == "maxpool":
                cur = ad.max_pool(cur, layer.mask)
            elif layer.kind == "flatten":
                cur = ad.reshape(cur, (n, int(np.prod(cur.shape[1:]))))
        if not batched:
            cur = ad.reshape(cur, cur.shape[1:])
        return cur

    # -- value-level conveniences -------------------------------------------

    def logits_value(self, x) -> np.ndarray:
        tape = ad.Tape()
        xn = tape.const(np.asarray(x))
        out = np.asarray(self.forward_graph(tape, xn).tensor)
        tape.release()
        return out

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits_value(x), axis=-1)

    # -- checkpoints ---------------------------------------------------------

    def save(self, path):
        header = {"spec": self.spec.to_dict(), "meta": self.meta,
                  "params": list(self.params), "buffers": list(self.buffers)}
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(_CKPT_MAGIC)
            f.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
            f.write(blob)
            for name in self.params:
                tz.write_tensor(f, Tensor(self.params[name]))
            for name in self.buffers:
                tz.write_tensor(f, Tensor(self.buffers[name]))

    @staticmethod
    def load(path) -> "Network":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _CKPT_MAGIC:
                raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
            version, hlen = struct.unpack("<II", f.read(8))
            if version != _CKPT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}, "
                                 f"expected {_CKPT_VERSION}")
            header = json.loads(f.read(hlen).decode("utf-8"))
            spec = NetworkSpec.from_dict(header["spec"])
            params = {name: np.asarray(tz.read_tensor(f)) for name in header["params"]}
            buffers = {name: np.asarray(tz.read_tensor(f)) for name in header["buffers"]}
        return Network(spec, params, buffers, header.get("meta"))


def init_variances(spec: NetworkSpec) -> dict:
    """Weight variance per parameterized layer index: gain/fan_in with gain 2
    for layers that feed a relu further down the stack, gain 1 for the
    readout. The relu-aware gain makes the layerwise gradient-mass factors
    telescope: each affine+relu pair passes squared-gradient mass through
    unchanged in expectation, and so does the readout, which is what the
    path-sum predictions assume."""
    deg = spec.in_degrees()
    kinds = [l.kind for l in spec.layers]
    return {i: (2.0 if "relu" in kinds[i + 1:] else 1.0) / deg[i] for i in deg}


def he_init(spec: NetworkSpec, seed: int) -> Network:
    """Fresh network: weights N(0, init_variances(spec)), biases zero,
    batch-norm at identity with zeroed running statistics. Draw order is
    layer order, so a seed pins every weight."""
    rng = np.random.default_rng(seed)
    want_p, want_b = _param_shapes(spec)
    var = init_variances(spec)
    params = {}
    for name, shape in want_p.items():
        i = int(name.split(".")[0])
        leaf = name.split(".")[1]
        if leaf == "weight":
            params[name] = rng.normal(0.0, np.sqrt(var[i]), size=shape)
        elif leaf == "bias":
            params[name] = np.zeros(shape)
        elif leaf == "gamma":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    buffers = {name: (np.ones(shape) if name.endswith("running_var") else np.zeros(shape))
               for name, shape in want_b.items()}
    return Network(spec, params, buffers, {"seed": int(seed), "epoch": 0})


# -- gradient conveniences ----------------------------------------------------


def input_gradient(net: Network, x, label) -> Tensor:
    """Per-sample gradient of cross-entropy with respect to the input
    (inference form; batch composition does not leak in)."""
    tape = ad.Tape()
    xn = tape.input(np.asarray(x))
    z = net.forward_graph(tape, xn, train=False)
    total = obj.ce_node(z, label, reduce="sum" if len(z.shape) == 2 else "mean")
    g = ad.grad(total, xn)[xn]
    tape.release()
    return g


def logit_input_gradients(net: Network, x) -> Tensor:
    """Gradients of every logit with respect to the input, stacked on a new
    class axis: (K,) + shape for one sample, (N, K) + shape for a batch."""
    tape = ad.Tape()
    xn = tape.input(np.asarray(x))
    z = net.forward_graph(tape, xn, train=False)
    batched = len(z.shape) == 2
    k = z.shape[-1]
    rows = []
    for j in range(k):
        pick = np.zeros(z.shape)
        if batched:
            pick[:, j] = 1.0
        else:
            pick[j] = 1.0
        s = ad.nsum(ad.mul(z, tape.const(pick)))
        rows.append(np.asarray(ad.grad(s, xn)[xn]))
    stacked = np.stack(rows, axis=1 if batched else 0)
    tape.release()
    return Tensor._wrap(stacked)


def relu_activity(net: Network, x) -> list:
    """Fraction of active units per relu layer at x."""
    tape = ad.Tape()
    xn = tape.const(np.asarray(x))
    net.forward_graph(tape, xn)
    acts = ad.relu_activity(tape)
    tape.release()
    return acts


# -- stock architectures -------------------------------------------------------


def mlp_spec(in_dim: int, widths, classes: int) -> NetworkSpec:
    layers = []
    for w in widths:
        layers += [LayerSpec.dense(w), LayerSpec.relu()]
    layers.append(LayerSpec.dense(classes))
    return NetworkSpec((in_dim,), tuple(layers))


def _conv_block(channels, kernel=3, stride=1, dilation=1, padding=0):
    return [LayerSpec.conv(channels, kernel=kernel, stride=stride,
                           dilation=dilation, padding=padding),
            LayerSpec.batchnorm(), LayerSpec.relu()]


_ARCH_NAMES = ("strided6", "dilated8", "pool6-avg", "pool6-max", "pool6-stride")


def standard_archs(name: str, input_shape, channels: int = 64,
                   classes: int = 10) -> NetworkSpec:
    """The study's stock image classifiers.

    strided6 / pool6-stride: six conv-bn-relu blocks, downsampling by
    stride 2 in blocks 2..6. pool6-avg / pool6-max: the same stack with
    stride-1 convs and 2x2 pooling after blocks 2..6. dilated8: eight
    stride-1 blocks with dilation scaled to the image size so the receptive
    field tracks the input, 2x2 max pooling after every second block, and a
    final pool collapsing whatever spatial extent is left.

    The first dilated8 block always runs at dilation 1. When inputs are
    pixel-duplicated upsamples, a fully dilated stack taps only same-parity
    positions, so duplicated values stay exactly equal layer after layer and
    the 2x2 pools see four-way ties. Tie-breaking then parks the whole
    gradient on one corner of each window, which caps the l1 gradient mass
    a larger image can carry. One dilation-1 layer mixes neighboring
    positions and removes the degeneracy without changing the receptive
    field in any meaningful way.

    Image extents should be multiples of 16 (32 and up for dilated8).
    """
    c, h, w = input_shape
    layers = []
    if name in ("strided6", "pool6-stride"):
        for i in range(6):
            layers += _conv_block(channels, stride=(1 if i == 0 else 2), padding=1)
    elif name in ("pool6-avg", "pool6-max"):
        pool = LayerSpec.avgpool if name == "pool6-avg" else LayerSpec.maxpool
        for i in range(6):
            layers += _conv_block(channels, stride=1, padding=1)
            if i > 0:
                layers.append(pool(2))
    elif name == "dilated8":
        dil = max(1, h // 32)
        for i in range(8):
            d = 1 if i == 0 else dil
            layers += _conv_block(channels, dilation=d, padding=d)
            if i % 2 == 1:
                layers.append(LayerSpec.maxpool(2))
        left = h // 16
        if left > 1:
            layers.append(LayerSpec.maxpool(left))
    else:
        raise ValueError(f"unknown architecture {name!r}, expected one of {_ARCH_NAMES}")
    layers += [LayerSpec.flatten(), LayerSpec.dense(classes)]
    return NetworkSpec(tuple(input_shape), tuple(layers))

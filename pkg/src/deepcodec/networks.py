"""Network specs, the forward/backward executor, and checkpoint files.

A network is a flat sequence of layer specs executed in order.  Parameters
live in a dict keyed by layer name; gradients come back keyed "layer.field"
so optimizers can treat them as a flat collection of arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import NumericError, ShapeError
from .layers import (ACTIVATIONS, BatchNormParams, ConvParams, batchnorm_backward,
                     batchnorm_forward, conv1d_backward, conv1d_forward,
                     rearrange_down, rearrange_down_backward, subpixel_up,
                     subpixel_up_backward)
from .signal_core import MeasurementMatrix, adjoint_proxy, measure, substream

_CKPT_MAGIC = b"DCCK"
_CKPT_VERSION = 1

KINDS = ("rearrange", "conv", "batchnorm", "subpixel", "adjoint")


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One layer of a network; only the fields for its kind are meaningful.

    kinds:
      rearrange  r                      (L, 1) -> (L/r, r), no parameters
      conv       filter_len, in_channels, out_channels, activation
      batchnorm  channels, activation   activation applies after normalization
      subpixel   r                      (L, r) -> (L*r, 1), no parameters
      adjoint    matrix                 back-projection by the fixed operator
    """

    kind: str
    name: str
    r: int = 0
    filter_len: int = 0
    in_channels: int = 0
    out_channels: int = 0
    channels: int = 0
    activation: str = "linear"
    matrix: MeasurementMatrix | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if not self.name or "." in self.name:
            raise ValueError(f"layer name {self.name!r} must be nonempty, no dots")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind in ("rearrange", "subpixel") and self.r < 1:
            raise ValueError(f"{self.name}: r must be >= 1")
        if self.kind == "conv":
            if self.filter_len < 1 or self.filter_len % 2 == 0:
                raise ValueError(f"{self.name}: filter_len must be odd, "
                                 f"got {self.filter_len}")
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"{self.name}: channel counts must be positive")
        if self.kind == "batchnorm" and self.channels < 1:
            raise ValueError(f"{self.name}: channels must be positive")
        if self.kind == "adjoint" and self.matrix is None:
            raise ValueError(f"{self.name}: adjoint layer needs its matrix")

    def out_shape(self, shape: tuple[int, int]) -> tuple[int, int]:
        """(length, channels) after this layer, validating the input shape."""
        length, ch = shape
        if self.kind == "rearrange":
            if ch != 1:
                raise ShapeError(f"{self.name}: rearrange needs 1 channel, got {ch}")
            if length % self.r != 0:
                raise ShapeError(f"{self.name}: length {length} not divisible "
                                 f"by r={self.r}")
            return (length // self.r, self.r)
        if self.kind == "subpixel":
            if ch != self.r:
                raise ShapeError(f"{self.name}: subpixel needs {self.r} channels, "
                                 f"got {ch}")
            return (length * self.r, 1)
        if self.kind == "conv":
            if ch != self.in_channels:
                raise ShapeError(f"{self.name}: conv needs {self.in_channels} "
                                 f"channels, got {ch}")
            return (length, self.out_channels)
        if self.kind == "batchnorm":
            if ch != self.channels:
                raise ShapeError(f"{self.name}: batchnorm needs {self.channels} "
                                 f"channels, got {ch}")
            return shape
        # adjoint
        if ch != 1 or length != self.matrix.m:
            raise ShapeError(f"{self.name}: adjoint needs ({self.matrix.m}, 1), "
                             f"got ({length}, {ch})")
        return (self.matrix.n, 1)

    def to_config(self) -> dict:
        cfg = {"kind": self.kind, "name": self.name}
        if self.kind in ("rearrange", "subpixel"):
            cfg["r"] = self.r
        elif self.kind == "conv":
            cfg.update(filter_len=self.filter_len, in_channels=self.in_channels,
                       out_channels=self.out_channels, activation=self.activation)
        elif self.kind == "batchnorm":
            cfg.update(channels=self.channels, activation=self.activation)
        else:
            cfg.update(m=self.matrix.m, n=self.matrix.n)
        return cfg


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    name: str
    input_length: int
    layers: tuple[LayerSpec, ...]
    measurement_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_length < 1:
            raise ValueError("input_length must be positive")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        if self.measurement_index is not None and not (
                0 <= self.measurement_index < len(self.layers)):
            raise ValueError(f"measurement_index {self.measurement_index} out of "
                             f"range for {len(self.layers)} layers")
        self.shapes  # noqa: B018  shape propagation doubles as validation

    @cached_property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        """(length, channels) before layer 0 and after each layer."""
        shapes = [(self.input_length, 1)]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        return tuple(shapes)

    @property
    def output_length(self) -> int:
        return self.shapes[-1][0]

    @property
    def measurement_shape(self) -> tuple[int, int] | None:
        if self.measurement_index is None:
            return None
        return self.shapes[self.measurement_index + 1]

    def to_config(self) -> dict:
        return {"name": self.name,
                "input_length": self.input_length,
                "measurement_index": self.measurement_index,
                "layers": [l.to_config() for l in self.layers]}


# ---------------------------------------------------------------------------
# Builders.

def build_deepcodec(n: int, r: int, filter_len: int = 49,
                    relu_everywhere: bool = False) -> NetworkSpec:
    """Codec that compresses (n, 1) down to an (n/r, 1) measurement and decodes back.

    Channel plan r -> 8 -> 4 -> 1 -> 4 -> 8 -> r around a rearrange/subpixel
    pair.  The measurement layer and the last conv are linear by default;
    relu_everywhere puts ReLU on them too.
    """
    if n % r != 0:
        raise ValueError(f"n={n} must be divisible by r={r}")
    end_act = "relu" if relu_everywhere else "linear"

    def conv(name, cin, cout, act):
        return LayerSpec(kind="conv", name=name, filter_len=filter_len,
                         in_channels=cin, out_channels=cout, activation=act)

    layers = (
        LayerSpec(kind="rearrange", name="rearrange", r=r),
        conv("enc1", r, 8, "relu"),
        conv("enc2", 8, 4, "relu"),
        conv("measure", 4, 1, end_act),
        conv("dec1", 1, 4, "relu"),
        conv("dec2", 4, 8, "relu"),
        conv("dec3", 8, r, end_act),
        LayerSpec(kind="subpixel", name="subpixel", r=r),
    )
    return NetworkSpec(name=f"deepcodec-r{r}", input_length=n, layers=layers,
                       measurement_index=3)


def build_deepinverse(phi: MeasurementMatrix, filter_len: int = 125) -> NetworkSpec:
    """Recovery net for a fixed operator: adjoint back-projection, then conv stack.

    Four conv+batchnorm+leaky-ReLU blocks (channels 1-32-16-32-16) and a final
    linear conv back to one channel.  Input is the (m, 1) measurement.
    """
    def conv(name, cin, cout):
        return LayerSpec(kind="conv", name=name, filter_len=filter_len,
                         in_channels=cin, out_channels=cout, activation="linear")

    def bn(name, ch):
        return LayerSpec(kind="batchnorm", name=name, channels=ch,
                         activation="leaky_relu")

    layers = (
        LayerSpec(kind="adjoint", name="backproject", matrix=phi),
        conv("block1", 1, 32), bn("bn1", 32),
        conv("block2", 32, 16), bn("bn2", 16),
        conv("block3", 16, 32), bn("bn3", 32),
        conv("block4", 32, 16), bn("bn4", 16),
        conv("out", 16, 1),
    )
    return NetworkSpec(name="deepinverse", input_length=phi.m, layers=layers,
                       measurement_index=None)


# ---------------------------------------------------------------------------
# Parameters.

def init_params(spec: NetworkSpec, seed: int) -> dict:
    """Fresh parameters: conv kernels N(0, 2/(filter_len*in_ch)) scaled, biases 0,
    batch-norm at identity with zeroed running statistics."""
    rng = substream(seed)
    params: dict = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            std = np.sqrt(2.0 / (layer.filter_len * layer.in_channels))
            kernel = rng.standard_normal(
                (layer.filter_len, layer.in_channels, layer.out_channels)) * std
            params[layer.name] = ConvParams(kernel=kernel,
                                            bias=np.zeros(layer.out_channels))
        elif layer.kind == "batchnorm":
            c = layer.channels
            params[layer.name] = BatchNormParams(
                gamma=np.ones(c), beta=np.zeros(c),
                running_mean=np.zeros(c), running_var=np.ones(c))
    return params


def _check_params(spec: NetworkSpec, params: dict) -> None:
    for layer in spec.layers:
        if layer.kind == "conv":
            p = params.get(layer.name)
            if not isinstance(p, ConvParams):
                raise ValueError(f"missing conv params for layer {layer.name!r}")
            want = (layer.filter_len, layer.in_channels, layer.out_channels)
            if p.kernel.shape != want:
                raise ShapeError(f"{layer.name}: kernel shape {p.kernel.shape} "
                                 f"!= {want}")
        elif layer.kind == "batchnorm":
            p = params.get(layer.name)
            if not isinstance(p, BatchNormParams):
                raise ValueError(f"missing batchnorm params for layer {layer.name!r}")
            if p.channels != layer.channels:
                raise ShapeError(f"{layer.name}: {p.channels} channels "
                                 f"!= {layer.channels}")


def count_parameters(spec: NetworkSpec, weights_only: bool = False) -> int:
    """Learnable parameter count.  weights_only counts conv kernels alone;
    otherwise biases and batch-norm scale/shift are included.  The fixed
    adjoint matrix and running statistics are never counted."""
    total = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            total += layer.filter_len * layer.in_channels * layer.out_channels
            if not weights_only:
                total += layer.out_channels
        elif layer.kind == "batchnorm" and not weights_only:
            total += 2 * layer.channels
    return total


def flatten_params(spec: NetworkSpec, params: dict) -> dict[str, np.ndarray]:
    """Learnable arrays keyed 'layer.field', in layer order."""
    flat: dict[str, np.ndarray] = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            p = params[layer.name]
            flat[f"{layer.name}.kernel"] = p.kernel
            flat[f"{layer.name}.bias"] = p.bias
        elif layer.kind == "batchnorm":
            p = params[layer.name]
            flat[f"{layer.name}.gamma"] = p.gamma
            flat[f"{layer.name}.beta"] = p.beta
    return flat


def rebuild_params(spec: NetworkSpec, params: dict,
                   flat: dict[str, np.ndarray]) -> dict:
    """New params dict with learnable arrays replaced from a flat view.

    Batch-norm running statistics are carried over by reference so the
    training forward pass keeps updating a single copy.
    """
    out: dict = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            out[layer.name] = ConvParams(kernel=flat[f"{layer.name}.kernel"],
                                         bias=flat[f"{layer.name}.bias"])
        elif layer.kind == "batchnorm":
            old = params[layer.name]
            out[layer.name] = BatchNormParams(
                gamma=flat[f"{layer.name}.gamma"], beta=flat[f"{layer.name}.beta"],
                running_mean=old.running_mean, running_var=old.running_var,
                momentum=old.momentum, epsilon=old.epsilon)
    return out


# ---------------------------------------------------------------------------
# Execution.

@dataclass
class ForwardCache:
    """Per-layer saved tensors from one forward pass, consumed by backward."""

    entries: list  # (x_in, pre_activation, bn_cache) per layer
    mode: str
    batched: bool


def forward(spec: NetworkSpec, params: dict, x: np.ndarray,
            mode: str = "eval") -> tuple[np.ndarray, ForwardCache]:
    """Run the network on (L, 1) or (B, L, 1) input; returns matching rank.

    Raises NumericError naming the first layer whose output is non-finite.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 3
    cur = x if batched else x[None]
    if cur.ndim != 3 or cur.shape[1] != spec.input_length or cur.shape[2] != 1:
        raise ShapeError(f"{spec.name}: expected input (*, {spec.input_length}, 1), "
                         f"got {x.shape}")

    entries = []
    for layer in spec.layers:
        x_in, pre, bn_cache = cur, None, None
        if layer.kind == "conv":
            pre = conv1d_forward(cur, params[layer.name])
            cur = ACTIVATIONS[layer.activation][0](pre)
        elif layer.kind == "batchnorm":
            pre, bn_cache = batchnorm_forward(cur, params[layer.name], mode)
            cur = ACTIVATIONS[layer.activation][0](pre)
        elif layer.kind == "rearrange":
            cur = rearrange_down(cur, layer.r)
        elif layer.kind == "subpixel":
            cur = subpixel_up(cur, layer.r)
        else:
            cur = adjoint_proxy(layer.matrix, cur)
        if not np.all(np.isfinite(cur)):
            raise NumericError(f"{spec.name}: layer {layer.name!r} produced "
                               f"non-finite values")
        entries.append((x_in, pre, bn_cache))
    cache = ForwardCache(entries=entries, mode=mode, batched=batched)
    return (cur if batched else cur[0]), cache


def backward(spec: NetworkSpec, params: dict, cache: ForwardCache,
             grad_output: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backpropagate a loss gradient; returns ({'layer.field': grad}, grad_input)."""
    g = np.asarray(grad_output, dtype=np.float64)
    if not cache.batched:
        if g.ndim == 2:
            g = g[None]
    if g.ndim != 3:
        raise ShapeError(f"grad_output must be rank 2 or 3, got shape {g.shape}")

    grads: dict[str, np.ndarray] = {}
    for layer, (x_in, pre, bn_cache) in zip(reversed(spec.layers),
                                            reversed(cache.entries)):
        if layer.kind == "conv":
            g = ACTIVATIONS[layer.activation][1](pre, g)
            g, gk, gb = conv1d_backward(x_in, params[layer.name], g)
            grads[f"{layer.name}.kernel"] = gk
            grads[f"{layer.name}.bias"] = gb
        elif layer.kind == "batchnorm":
            g = ACTIVATIONS[layer.activation][1](pre, g)
            g, gg, gbt = batchnorm_backward(bn_cache, params[layer.name], g)
            grads[f"{layer.name}.gamma"] = gg
            grads[f"{layer.name}.beta"] = gbt
        elif layer.kind == "rearrange":
            g = rearrange_down_backward(g, layer.r)
        elif layer.kind == "subpixel":
            g = subpixel_up_backward(g, layer.r)
        else:
            # forward was Phi^T y, so the gradient maps back through Phi
            g = measure(layer.matrix, g)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"{spec.name}: backward through {layer.name!r} "
                               f"produced non-finite values")
    grad_input = g if cache.batched else g[0]
    return grads, grad_input


def encode(spec: NetworkSpec, params: dict, x: np.ndarray) -> np.ndarray:
    """Output of the measurement layer (the learned compressed representation)."""
    if spec.measurement_index is None:
        raise ValueError(f"{spec.name} has no measurement layer")
    _check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 3
    cur = x if batched else x[None]
    if cur.shape[1] != spec.input_length or cur.shape[2] != 1:
        raise ShapeError(f"{spec.name}: expected input (*, {spec.input_length}, 1), "
                         f"got {x.shape}")
    for i, layer in enumerate(spec.layers[:spec.measurement_index + 1]):
        if layer.kind == "conv":
            cur = ACTIVATIONS[layer.activation][0](
                conv1d_forward(cur, params[layer.name]))
        elif layer.kind == "batchnorm":
            pre, _ = batchnorm_forward(cur, params[layer.name], "eval")
            cur = ACTIVATIONS[layer.activation][0](pre)
        elif layer.kind == "rearrange":
            cur = rearrange_down(cur, layer.r)
        elif layer.kind == "subpixel":
            cur = subpixel_up(cur, layer.r)
        else:
            cur = adjoint_proxy(layer.matrix, cur)
    return cur if batched else cur[0]


def describe(spec: NetworkSpec) -> str:
    """Human-readable layer table with shapes and parameter counts."""
    rows = [("layer", "kind", "output", "activation", "weights", "bias+bn")]
    for layer, shape in zip(spec.layers, spec.shapes[1:]):
        w = o = 0
        act = "-"
        if layer.kind == "conv":
            w = layer.filter_len * layer.in_channels * layer.out_channels
            o = layer.out_channels
            act = layer.activation
        elif layer.kind == "batchnorm":
            o = 2 * layer.channels
            act = layer.activation
        rows.append((layer.name, layer.kind, f"({shape[0]}, {shape[1]})",
                     act, str(w), str(o)))
    widths = [max(len(r[i]) for r in rows) for i in range(6)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
             for r in rows]
    lines.insert(0, f"{spec.name}: input ({spec.input_length}, 1)")
    lines.append(f"learnable {count_parameters(spec)} "
                 f"(weights only {count_parameters(spec, weights_only=True)})")
    if spec.measurement_index is not None:
        ms = spec.measurement_shape
        lines.append(f"measurement after "
                     f"{spec.layers[spec.measurement_index].name!r}: "
                     f"({ms[0]}, {ms[1]})")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Checkpoints: magic, u32 version, u64 header length, JSON header, float64 blob.

def _blob_layout(spec: NetworkSpec) -> list[tuple[str, str, tuple[int, ...]]]:
    layout = []
    for layer in spec.layers:
        if layer.kind == "conv":
            layout.append((layer.name, "kernel",
                           (layer.filter_len, layer.in_channels,
                            layer.out_channels)))
            layout.append((layer.name, "bias", (layer.out_channels,)))
        elif layer.kind == "batchnorm":
            for f in ("gamma", "beta", "running_mean", "running_var"):
                layout.append((layer.name, f, (layer.channels,)))
        elif layer.kind == "adjoint":
            layout.append((layer.name, "matrix", (layer.matrix.m, layer.matrix.n)))
    return layout


def save_checkpoint(path: str, spec: NetworkSpec, params: dict,
                    meta: dict | None = None) -> None:
    """Self-contained snapshot: spec, metadata, and every array the net needs.

    The header JSON is sorted and carries no clocks, so identical state always
    produces identical bytes.
    """
    _check_params(spec, params)
    layout = _blob_layout(spec)
    header = {
        "format": _CKPT_MAGIC.decode(),
        "version": _CKPT_VERSION,
        "network": spec.to_config(),
        "layout": [[n, f, list(s)] for n, f, s in layout],
        "meta": meta or {},
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = []
    for name, fieldname, shape in layout:
        if fieldname == "matrix":
            arr = next(l.matrix.entries for l in spec.layers if l.name == name)
        else:
            arr = getattr(params[name], fieldname)
        if arr.shape != shape:
            raise ShapeError(f"{name}.{fieldname}: shape {arr.shape} != {shape}")
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIQ", _CKPT_MAGIC, _CKPT_VERSION, len(hjson)))
        f.write(hjson)
        for c in chunks:
            f.write(c)


def load_checkpoint(path: str) -> tuple[NetworkSpec, dict, dict]:
    """Inverse of save_checkpoint; returns (spec, params, meta)."""
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16:
            raise ValueError(f"{path}: truncated header")
        magic, version, hlen = struct.unpack("<4sIQ", head)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        header = json.loads(f.read(hlen).decode())
        blob = f.read()

    arrays: dict[tuple[str, str], np.ndarray] = {}
    offset = 0
    for name, fieldname, shape in header["layout"]:
        size = int(np.prod(shape)) * 8
        if offset + size > len(blob):
            raise ValueError(f"{path}: blob too short at {name}.{fieldname}")
        arrays[(name, fieldname)] = np.frombuffer(
            blob, dtype="<f8", count=int(np.prod(shape)),
            offset=offset).astype(np.float64).reshape(shape)
        offset += size
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")

    layers = []
    for cfg in header["network"]["layers"]:
        kind = cfg["kind"]
        if kind == "adjoint":
            phi = MeasurementMatrix(entries=arrays[(cfg["name"], "matrix")])
            layers.append(LayerSpec(kind=kind, name=cfg["name"], matrix=phi))
        elif kind == "conv":
            layers.append(LayerSpec(kind=kind, name=cfg["name"],
                                    filter_len=cfg["filter_len"],
                                    in_channels=cfg["in_channels"],
                                    out_channels=cfg["out_channels"],
                                    activation=cfg["activation"]))
        elif kind == "batchnorm":
            layers.append(LayerSpec(kind=kind, name=cfg["name"],
                                    channels=cfg["channels"],
                                    activation=cfg["activation"]))
        else:
            layers.append(LayerSpec(kind=kind, name=cfg["name"], r=cfg["r"]))
    spec = NetworkSpec(name=header["network"]["name"],
                       input_length=header["network"]["input_length"],
                       layers=tuple(layers),
                       measurement_index=header["network"]["measurement_index"])

    params: dict = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            params[layer.name] = ConvParams(kernel=arrays[(layer.name, "kernel")],
                                            bias=arrays[(layer.name, "bias")])
        elif layer.kind == "batchnorm":
            params[layer.name] = BatchNormParams(
                gamma=arrays[(layer.name, "gamma")],
                beta=arrays[(layer.name, "beta")],
                running_mean=arrays[(layer.name, "running_mean")],
                running_var=arrays[(layer.name, "running_var")])
    return spec, params, header["meta"]

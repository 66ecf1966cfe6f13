"""Architecture description, presets, forward/backward passes, checkpoints.

A network is a flat stack of convolutional layers (plain, 1x1 "abstraction",
and stride-2 "pooling" convolutions), closed by a global average pool over
the class map and a softmax. Because every layer is convolutional, the
forward pass accepts any input at or above a derived minimum size and emits
a class map with one spatial position per receptive-field placement.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .ops import (
    ConvGeometry,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    conv_output_shape,
    dropout_backward,
    dropout_forward,
    global_average_pool,
    global_average_pool_backward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_cross_entropy_grad,
)
from .util import split_rng

CONV_KINDS = ("conv", "conv-p", "conv-pool")
RGB_CHANNELS = 3


@dataclass(frozen=True)
class LayerSpec:
    """One row of the architecture table."""

    name: str
    kind: str  # conv | conv-p | conv-pool | global-pool | softmax
    filters: int = 0
    geometry: ConvGeometry | None = None
    activation: str = "none"  # relu | none
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in CONV_KINDS + ("global-pool", "softmax"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in CONV_KINDS:
            if self.filters < 1:
                raise ValueError(f"{self.name}: filters must be >= 1")
            if self.geometry is None:
                raise ValueError(f"{self.name}: conv layers need a geometry")
            if self.kind == "conv-p" and (
                    self.geometry.kernel != (1, 1)
                    or self.geometry.stride != (1, 1)
                    or self.geometry.pad != (0, 0)):
                raise ValueError(
                    f"{self.name}: conv-p layers are 1x1, stride 1, pad 0")
            if self.kind == "conv-pool" and self.geometry.stride != (2, 2):
                raise ValueError(f"{self.name}: conv-pool layers have stride 2")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"{self.name}: unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"{self.name}: dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer stack plus the class count and training crop size."""

    layers: tuple[LayerSpec, ...]
    num_classes: int
    train_crop: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.layers) < 3:
            raise ValueError("need at least one conv layer plus pool and softmax")
        if [l.kind for l in self.layers[-2:]] != ["global-pool", "softmax"]:
            raise ValueError(
                "network must end with exactly one global-pool then one softmax")
        body = self.layers[:-2]
        if any(l.kind not in CONV_KINDS for l in body):
            raise ValueError("global-pool/softmax may only terminate the stack")
        if body[-1].filters != self.num_classes:
            raise ValueError(
                f"last conv layer has {body[-1].filters} filters, "
                f"expected num_classes={self.num_classes}")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        m = min_input_size(self)
        if m > self.train_crop:
            raise ValueError(
                f"train_crop {self.train_crop} is below the minimum input "
                f"size {m} of this stack")

    @property
    def conv_layers(self) -> tuple[LayerSpec, ...]:
        return self.layers[:-2]


def min_input_size(spec: NetworkSpec) -> int:
    """Smallest square input side the conv stack accepts.

    Backward induction: a layer needing `out` output positions needs
    (out-1)*stride + kernel - 2*pad input positions (at least kernel-2*pad
    so the first placement fits).
    """
    need = 1
    for layer in reversed(spec.layers[:-2]):
        g = layer.geometry
        need = max(1, (need - 1) * g.stride[0] + g.kernel[0] - 2 * g.pad[0])
    return need


def shape_trace(spec: NetworkSpec, in_h: int, in_w: int) -> list[tuple[int, int]]:
    """Spatial size after each conv layer, per the placement-count formula."""
    sizes = []
    h, w = in_h, in_w
    for layer in spec.conv_layers:
        h, w = conv_output_shape(h, w, layer.geometry, layer.name)
        sizes.append((h, w))
    return sizes


def _reference_rows(num_classes: int) -> list[tuple]:
    # (name, kind, filters, kernel, stride, pad, dropout)
    return [
        ("conv1", "conv", 96, 11, 4, 0, 0.0),
        ("conv-p1", "conv-p", 96, 1, 1, 0, 0.0),
        ("conv-pool1", "conv-pool", 96, 3, 2, 1, 0.0),
        ("conv2", "conv", 256, 5, 1, 2, 0.0),
        ("conv-p2", "conv-p", 256, 1, 1, 0, 0.0),
        ("conv-pool2", "conv-pool", 256, 3, 2, 0, 0.0),
        ("conv3", "conv", 384, 3, 1, 1, 0.0),
        ("conv-p3", "conv-p", 384, 1, 1, 0, 0.0),
        ("conv-pool3", "conv-pool", 384, 3, 2, 0, 0.5),
        ("conv4", "conv", 1024, 1, 1, 0, 0.0),
        ("conv5", "conv", 1024, 1, 1, 0, 0.0),
        ("conv6", "conv", num_classes, 1, 1, 0, 0.0),
    ]


def _build_stack(rows, num_classes: int, train_crop: int) -> NetworkSpec:
    layers = [
        LayerSpec(
            name=name,
            kind=kind,
            filters=filters,
            geometry=ConvGeometry((k, k), (s, s), (p, p)),
            activation="relu",
            dropout_rate=drop,
        )
        for name, kind, filters, k, s, p, drop in rows
    ]
    layers.append(LayerSpec(name="global-pool", kind="global-pool"))
    layers.append(LayerSpec(name="softmax", kind="softmax"))
    return NetworkSpec(tuple(layers), num_classes, train_crop)


def table1_preset(num_classes: int) -> NetworkSpec:
    """The full 12-conv reference stack, trained at a 224-pixel crop.

    All conv layers are ReLU-activated; the third pooling convolution
    carries 50% dropout; the final 1x1 layer has one filter per class.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    return _build_stack(_reference_rows(num_classes), num_classes, 224)


def desk_preset(num_classes: int, train_crop: int,
                width_multiplier: float = 0.125) -> NetworkSpec:
    """Desk-scale variant of the reference stack.

    Derivation (deterministic):
      * every filter count except the final class layer becomes
        max(1, round(f * width_multiplier));
      * the first layer's kernel/stride shrink with the crop:
        crop >= 128 -> 11x11 stride 4 (the reference geometry),
        crop >= 64  ->  7x7 stride 2,
        crop >= 32  ->  5x5 stride 1,
        else        ->  3x3 stride 1;
      * all other geometry is unchanged.

    Raises ValueError listing the derived minimum when the crop is still
    too small for the resulting stack.
    """
    if train_crop >= 128:
        first_k, first_s = 11, 4
    elif train_crop >= 64:
        first_k, first_s = 7, 2
    elif train_crop >= 32:
        first_k, first_s = 5, 1
    else:
        first_k, first_s = 3, 1
    rows = []
    for i, (name, kind, filters, k, s, p, drop) in enumerate(
            _reference_rows(num_classes)):
        if i == 0:
            k, s = first_k, first_s
        if name != "conv6":
            filters = max(1, int(round(filters * width_multiplier)))
        rows.append((name, kind, filters, k, s, p, drop))
    try:
        return _build_stack(rows, num_classes, train_crop)
    except ValueError as exc:
        raise ValueError(f"desk preset rejected: {exc}") from exc


@dataclass
class ModelState:
    """A network spec bound to its named parameter arrays."""

    spec: NetworkSpec
    params: dict[str, np.ndarray]
    rng_seed: int

    def clone_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def parameter_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    """Expected shape of every named parameter, in layer order."""
    shapes: dict[str, tuple[int, ...]] = {}
    in_ch = RGB_CHANNELS
    for layer in spec.conv_layers:
        kh, kw = layer.geometry.kernel
        shapes[f"{layer.name}.filters"] = (layer.filters, in_ch, kh, kw)
        shapes[f"{layer.name}.bias"] = (layer.filters,)
        in_ch = layer.filters
    return shapes


def parameter_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(spec).values())


def init_model(spec: NetworkSpec, seed: int) -> ModelState:
    """He-style init: filters ~ N(0, 2/fan_in), biases zero."""
    rng = split_rng(seed, "init")
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return ModelState(spec=spec, params=params, rng_seed=seed)


def forward(model: ModelState, x: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None):
    """Run the stack on a batch of any legal spatial size.

    Args:
        x: (batch, 3, h, w) images, h and w at least the derived minimum.
        mode: "train" keeps dropout active and caches activations for
            backward; "eval" is deterministic and dropout-free.
        rng: required in train mode when any layer has dropout.

    Returns:
        (class_map, prediction, cache): the pre-pool logit map
        (batch, K, h', w'), the softmax of its spatial mean (batch, K), and
        the activation cache for backward().
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4:
        raise ShapeError(f"forward expects (batch, channels, h, w), got {x.shape}")
    m = min_input_size(model.spec)
    if x.shape[2] < m or x.shape[3] < m:
        raise ShapeError(
            f"input too small: spatial size {x.shape[2]}x{x.shape[3]} is below "
            f"the minimum input size {m} of this network")
    train = mode == "train"
    layer_caches = []
    out = x
    for layer in model.spec.conv_layers:
        w = model.params[f"{layer.name}.filters"]
        b = model.params[f"{layer.name}.bias"]
        z = conv2d_forward(out, w, b, layer.geometry, layer.name)
        a = relu_forward(z) if layer.activation == "relu" else z
        mask = None
        if layer.dropout_rate > 0.0:
            a, mask = dropout_forward(a, layer.dropout_rate, rng, train)
        layer_caches.append({"x": out, "z": z, "mask": mask} if train else None)
        out = a
    class_map = out
    pooled = global_average_pool(class_map)
    prediction = softmax(pooled)
    cache = {
        "mode": mode,
        "layers": layer_caches,
        "spatial": class_map.shape[2:],
        "probs": prediction,
    }
    return class_map, prediction, cache


def backward(model: ModelState, cache: dict,
             labels: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the mean cross-entropy w.r.t. every parameter.

    Requires a train-mode cache from forward(); gradient names and shapes
    mirror model.params.
    """
    if cache.get("mode") != "train":
        raise ValueError("backward needs a cache from a train-mode forward")
    labels = np.asarray(labels)
    grads: dict[str, np.ndarray] = {}
    g = softmax_cross_entropy_grad(cache["probs"], labels)
    g = global_average_pool_backward(g, cache["spatial"])
    for layer, lc in zip(reversed(model.spec.conv_layers),
                         reversed(cache["layers"])):
        g = dropout_backward(g, lc["mask"])
        if layer.activation == "relu":
            g = relu_backward(g, lc["z"])
        w = model.params[f"{layer.name}.filters"]
        g, gw, gb = conv2d_backward(lc["x"], w, g, layer.geometry, layer.name)
        grads[f"{layer.name}.filters"] = gw
        grads[f"{layer.name}.bias"] = gb
    return grads


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FCNA"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base for checkpoint file problems."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointSpecError(CheckpointError):
    """Parameter records disagree with the embedded spec."""


def spec_to_text(spec: NetworkSpec, rng_seed: int = 0,
                 extra: dict[str, str] | None = None) -> str:
    """Canonical text form of a spec (plus free-form metadata lines)."""
    lines = [f"fcna-spec {CHECKPOINT_VERSION}"]
    lines.append(f"num_classes={spec.num_classes}")
    lines.append(f"train_crop={spec.train_crop}")
    lines.append(f"rng_seed={rng_seed}")
    for key in sorted(extra or {}):
        lines.append(f"meta.{key}={extra[key]}")
    for layer in spec.layers:
        if layer.kind in CONV_KINDS:
            g = layer.geometry
            lines.append(
                f"layer name={layer.name} kind={layer.kind} "
                f"filters={layer.filters} "
                f"kernel={g.kernel[0]},{g.kernel[1]} "
                f"stride={g.stride[0]},{g.stride[1]} "
                f"pad={g.pad[0]},{g.pad[1]} "
                f"activation={layer.activation} "
                f"dropout={layer.dropout_rate!r}")
        else:
            lines.append(f"layer name={layer.name} kind={layer.kind}")
    return "\n".join(lines) + "\n"


def spec_from_text(text: str):
    """Parse spec_to_text output -> (NetworkSpec, rng_seed, extra dict)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("fcna-spec "):
        raise CheckpointSpecError("missing fcna-spec header line")
    fields: dict[str, str] = {}
    extra: dict[str, str] = {}
    layers: list[LayerSpec] = []
    for ln in lines[1:]:
        if ln.startswith("layer "):
            kv = dict(part.split("=", 1) for part in ln[len("layer "):].split())
            kind = kv["kind"]
            if kind in CONV_KINDS:
                def pair(s):
                    a, b = s.split(",")
                    return int(a), int(b)
                layers.append(LayerSpec(
                    name=kv["name"], kind=kind, filters=int(kv["filters"]),
                    geometry=ConvGeometry(pair(kv["kernel"]), pair(kv["stride"]),
                                          pair(kv["pad"])),
                    activation=kv["activation"],
                    dropout_rate=float(kv["dropout"])))
            else:
                layers.append(LayerSpec(name=kv["name"], kind=kind))
        elif "=" in ln:
            key, value = ln.split("=", 1)
            if key.startswith("meta."):
                extra[key[len("meta."):]] = value
            else:
                fields[key] = value
        else:
            raise CheckpointSpecError(f"unparseable spec line: {ln!r}")
    try:
        spec = NetworkSpec(tuple(layers), int(fields["num_classes"]),
                           int(fields["train_crop"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointSpecError(f"invalid embedded spec: {exc}") from exc
    return spec, int(fields.get("rng_seed", "0")), extra


def save_checkpoint(model: ModelState, path,
                    extra: dict[str, str] | None = None) -> None:
    """Write magic, version, spec text block, then raw parameter records."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    spec_bytes = spec_to_text(model.spec, model.rng_seed, extra).encode("utf-8")
    buf.write(struct.pack("<I", len(spec_bytes)))
    buf.write(spec_bytes)
    for name, shape in parameter_shapes(model.spec).items():
        arr = model.params[name]
        if arr.shape != shape:
            raise CheckpointSpecError(
                f"parameter {name} has shape {arr.shape}, spec expects {shape}")
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(
            f"truncated checkpoint while reading {what} "
            f"(wanted {n} bytes, got {len(data)})")
    return data


def load_checkpoint(path) -> ModelState:
    """Read a checkpoint and validate every record against its spec."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {version}")
        (spec_len,) = struct.unpack("<I", _read_exact(fh, 4, "spec length"))
        spec_text = _read_exact(fh, spec_len, "spec block").decode("utf-8")
        spec, rng_seed, _ = spec_from_text(spec_text)
        expected = parameter_shapes(spec)
        params: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointTruncatedError("truncated parameter name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "parameter name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
            shape = struct.unpack(
                f"<{rank}I", _read_exact(fh, 4 * rank, f"{name} extents"))
            count = int(np.prod(shape))
            raw = _read_exact(fh, 4 * count, f"{name} values")
            if name not in expected:
                raise CheckpointSpecError(
                    f"parameter {name!r} not declared by the embedded spec")
            if tuple(shape) != expected[name]:
                raise CheckpointSpecError(
                    f"parameter {name} has shape {tuple(shape)}, spec expects "
                    f"{expected[name]}")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointSpecError(f"missing parameters: {sorted(missing)}")
    return ModelState(spec=spec, params=params, rng_seed=rng_seed)


def load_checkpoint_extra(path) -> dict[str, str]:
    """Metadata lines (meta.*) stored in a checkpoint's spec block."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointMagicError("bad magic")
        _read_exact(fh, 4, "version")
        (spec_len,) = struct.unpack("<I", _read_exact(fh, 4, "spec length"))
        text = _read_exact(fh, spec_len, "spec block").decode("utf-8")
    return spec_from_text(text)[2]

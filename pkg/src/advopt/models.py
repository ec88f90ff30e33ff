"""Small image classifiers: spec, forward pass, losses, checkpoints.

The public tensor layout is channels-first ``[B, C, H, W]``; internally
the forward pass runs channels-last (see :mod:`advopt.engine`).  Layers
carry no bias terms: each parameterized layer owns exactly one tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import engine
from .container import read_container, write_container
from .engine import Node, as_tensor, check_finite
from .errors import DataFormatError, ShapeMismatchError

Array = np.ndarray


# ---------------------------------------------------------------------------
# loss kinds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossEntropy:
    """Mean softmax cross-entropy against integer labels."""

    labels: Array


@dataclass(frozen=True)
class KLToReference:
    """Mean KL(softmax(reference) || softmax(logits)) with a fixed reference."""

    ref_logits: Array


LossKind = Union[CrossEntropy, KLToReference]


def loss_node(logits: Node, kind: LossKind) -> Node:
    if isinstance(kind, CrossEntropy):
        return engine.softmax_cross_entropy(logits, kind.labels)
    if isinstance(kind, KLToReference):
        return engine.kl_softmax(engine.constant(kind.ref_logits), logits)
    raise TypeError(f"unknown loss kind: {kind!r}")


# ---------------------------------------------------------------------------
# classifier spec
# ---------------------------------------------------------------------------

# layer grammar:
#   ("conv", out_channels, kernel, stride)
#   ("relu",)
#   ("maxpool", 2)
#   ("flatten",)
#   ("dense", out_features)


@dataclass(frozen=True)
class ClassifierSpec:
    layers: tuple
    input_shape: tuple  # (C, H, W)
    num_classes: int

    def __post_init__(self):
        shape = self.trace_shapes()[-1]
        if shape != (self.num_classes,):
            raise ShapeMismatchError(
                f"spec output shape {shape} does not match num_classes={self.num_classes}"
            )

    def trace_shapes(self) -> list[tuple]:
        """Per-layer output shapes, validating that the layers compose."""
        c, h, w = self.input_shape
        shape: tuple = (c, h, w)
        shapes = [shape]
        for layer in self.layers:
            kind = layer[0]
            if kind == "conv":
                _, out_ch, k, stride = layer
                if len(shape) != 3:
                    raise ShapeMismatchError(f"conv after flatten in {self.layers}")
                c, h, w = shape
                if h < k or w < k:
                    raise ShapeMismatchError(f"conv kernel {k} larger than input {h}x{w}")
                shape = (out_ch, (h - k) // stride + 1, (w - k) // stride + 1)
            elif kind == "relu":
                pass
            elif kind == "maxpool":
                if len(shape) != 3:
                    raise ShapeMismatchError("maxpool after flatten")
                c, h, w = shape
                if h < 2 or w < 2:
                    raise ShapeMismatchError(f"maxpool input {h}x{w} too small")
                shape = (c, h // 2, w // 2)
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "dense":
                if len(shape) != 1:
                    raise ShapeMismatchError("dense requires flattened input")
                shape = (layer[1],)
            else:
                raise ShapeMismatchError(f"unknown layer kind {kind!r}")
            shapes.append(shape)
        return shapes

    def to_dict(self) -> dict:
        return {
            "layers": [list(l) for l in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ClassifierSpec":
        return ClassifierSpec(
            layers=tuple(tuple(l) for l in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
        )


def desk_cnn_spec(input_shape=(1, 28, 28), num_classes=10) -> ClassifierSpec:
    """Default small CNN used throughout the desk-scale experiments."""
    return ClassifierSpec(
        layers=(
            ("conv", 8, 3, 1),
            ("relu",),
            ("maxpool", 2),
            ("conv", 16, 3, 1),
            ("relu",),
            ("maxpool", 2),
            ("flatten",),
            ("dense", 64),
            ("relu",),
            ("dense", num_classes),
        ),
        input_shape=input_shape,
        num_classes=num_classes,
    )


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


@dataclass
class ClassifierWeights:
    """Kernel and bias tensors keyed ``conv<i>``/``conv<i>_b`` and
    ``dense<i>``/``dense<i>_b``.

    Conv kernels are stored channels-last ``[kh, kw, in, out]``; dense
    weights are ``[in, out]``; biases are one vector per output channel.
    Biases initialize to zero but are trainable: without them the ReLU
    stack can collapse into an all-dead state under adversarial training,
    from which bias-free gradients cannot recover.
    """

    spec: ClassifierSpec
    tensors: dict[str, Array]

    def __post_init__(self):
        expected = param_shapes(self.spec)
        if set(self.tensors) != set(expected):
            raise ShapeMismatchError(
                f"weight names {sorted(self.tensors)} do not match spec {sorted(expected)}"
            )
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeMismatchError(
                    f"{name}: shape {self.tensors[name].shape}, spec wants {shape}"
                )

    def copy(self) -> "ClassifierWeights":
        return ClassifierWeights(self.spec, {k: v.copy() for k, v in self.tensors.items()})


def param_shapes(spec: ClassifierSpec) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    layer_shapes = spec.trace_shapes()
    for i, layer in enumerate(spec.layers):
        if layer[0] == "conv":
            in_ch = layer_shapes[i][0]
            _, out_ch, k, _ = layer
            shapes[f"conv{i}"] = (k, k, in_ch, out_ch)
            shapes[f"conv{i}_b"] = (out_ch,)
        elif layer[0] == "dense":
            shapes[f"dense{i}"] = (layer_shapes[i][0], layer[1])
            shapes[f"dense{i}_b"] = (layer[1],)
    return shapes


def init_classifier(spec: ClassifierSpec, seed) -> ClassifierWeights:
    """He-normal kernels, zero biases; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            tensors[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return ClassifierWeights(spec, tensors)


def zero_classifier(spec: ClassifierSpec) -> ClassifierWeights:
    return ClassifierWeights(spec, {n: np.zeros(s) for n, s in param_shapes(spec).items()})


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _to_channels_last(x: Node) -> Node:
    b, c, h, w = x.value.shape
    if c == 1:
        # NCHW and NHWC coincide in memory for a single channel
        return engine.reshape(x, (b, h, w, 1))
    perm = np.ascontiguousarray(x.value.transpose(0, 2, 3, 1))
    node = engine.constant(perm)
    if x.requires:
        def bwd(g):
            return (np.ascontiguousarray(g.transpose(0, 3, 1, 2)),)
        node = engine.Node(perm, (x,), bwd)
    return node


def forward_node(weights: ClassifierWeights, x: Node, weight_nodes: dict[str, Node] | None = None) -> Node:
    """Logits as a tape node.

    ``x`` arrives channels-first ``[B, C, H, W]``.  When ``weight_nodes``
    is given those nodes are used in place of the stored arrays, which is
    how parameter gradients are requested.
    """
    spec = weights.spec
    if x.value.ndim != 4 or x.value.shape[1:] != tuple(spec.input_shape):
        raise ShapeMismatchError(
            f"input shape {x.value.shape} does not match spec {spec.input_shape}"
        )
    b = x.value.shape[0]

    def tensor(name):
        return weight_nodes[name] if weight_nodes else engine.constant(weights.tensors[name])

    cur = _to_channels_last(x)
    for i, layer in enumerate(spec.layers):
        kind = layer[0]
        if kind == "conv":
            cur = engine.add(engine.conv2d(cur, tensor(f"conv{i}"), stride=layer[3]),
                             tensor(f"conv{i}_b"))
        elif kind == "relu":
            cur = engine.relu(cur)
        elif kind == "maxpool":
            cur = engine.maxpool2(cur)
        elif kind == "flatten":
            cur = engine.reshape(cur, (b, -1))
        elif kind == "dense":
            cur = engine.add(engine.matmul(cur, tensor(f"dense{i}")), tensor(f"dense{i}_b"))
    return cur


def forward(weights: ClassifierWeights, x: Array) -> Array:
    """Plain logits ``[B, num_classes]`` with no gradient bookkeeping."""
    return forward_node(weights, engine.constant(x)).value


def predict(weights: ClassifierWeights, x: Array) -> Array:
    """Predicted class indices."""
    return forward(weights, x).argmax(axis=1)


def loss(weights: ClassifierWeights, x: Array, kind: LossKind) -> float:
    """Scalar loss at ``x`` under the given loss kind."""
    node = loss_node(forward_node(weights, engine.constant(x)), kind)
    check_finite(node.value, "loss")
    return float(node.value)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


@dataclass
class GradBundle:
    """A scalar loss together with gradients keyed by target name."""

    loss: float
    grads: dict[str, Array]


def value_and_grad_input(weights: ClassifierWeights, kind: LossKind, x: Array) -> GradBundle:
    """Loss and its gradient with respect to the input batch.

    Weights are untouched and no parameter gradients are computed.
    """
    x_node = engine.variable(x)
    out = loss_node(forward_node(weights, x_node), kind)
    check_finite(out.value, "loss")
    (gx,) = engine.backward(out, [x_node])
    check_finite(gx, "input gradient")
    return GradBundle(float(out.value), {"x": gx})


def value_and_grad_params(weights: ClassifierWeights, kind: LossKind, x: Array) -> GradBundle:
    """Loss and its gradient with respect to every weight tensor."""
    names = sorted(weights.tensors)
    nodes = {n: engine.variable(weights.tensors[n]) for n in names}
    out = loss_node(forward_node(weights, engine.constant(x), nodes), kind)
    check_finite(out.value, "loss")
    grads = engine.backward(out, [nodes[n] for n in names])
    bundle = dict(zip(names, grads))
    for name, g in bundle.items():
        check_finite(g, f"gradient of {name}")
    return GradBundle(float(out.value), bundle)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(weights: ClassifierWeights, path) -> None:
    meta = {"kind": "classifier", "spec": weights.spec.to_dict()}
    write_container(path, meta, weights.tensors)


def load_checkpoint(path) -> ClassifierWeights:
    meta, tensors = read_container(path)
    if meta.get("kind") != "classifier":
        raise DataFormatError(f"{path}: not a classifier checkpoint")
    spec = ClassifierSpec.from_dict(meta["spec"])
    try:
        return ClassifierWeights(spec, {k: as_tensor(v) for k, v in tensors.items()})
    except ShapeMismatchError as exc:
        raise DataFormatError(f"{path}: checkpoint does not match its own spec: {exc}") from exc

"""Minimal CNN engine: layer units, traced forward pass, backprop, Adam.

Networks are ordered sequences of units.  Each unit applies an affine map
(valid convolution or fully connected), an elementwise activation, and an
optional max pool whose stride equals its window.  Convolutions are
stride 1 with no padding throughout.
"""

from dataclasses import dataclass, field

import numpy as np

from . import container
from .exceptions import LabelOutOfRange, MissingReconTargets, ShapeMismatch
from .linalg import valid_correlate

__all__ = [
    "Activation",
    "LayerUnit",
    "Network",
    "ForwardTrace",
    "AdamState",
    "forward_trace",
    "forward_logits",
    "compute_loss",
    "softmax",
    "loss_and_gradients",
    "train_step",
    "evaluate",
    "build_network",
    "ARCHITECTURE_PRESETS",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"FRPT"

ACTIVATION_KINDS = ("tanh", "relu", "leaky_relu", "sigmoid", "sin", "identity")


@dataclass(frozen=True)
class Activation:
    """Elementwise nonlinearity; ``slope`` applies to leaky_relu only."""

    kind: str
    slope: float = 0.1

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not self.slope > 0:
            raise ValueError("leaky_relu slope must be positive")

    def forward(self, z):
        if self.kind == "tanh":
            return np.tanh(z)
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "leaky_relu":
            return np.where(z > 0, z, self.slope * z)
        if self.kind == "sigmoid":
            return 1.0 / (1.0 + np.exp(-z))
        if self.kind == "sin":
            return np.sin(z)
        return z

    def derivative(self, z):
        """d activation / d z, evaluated at z."""
        if self.kind == "tanh":
            t = np.tanh(z)
            return 1.0 - t * t
        if self.kind == "relu":
            return (z > 0).astype(np.float64)
        if self.kind == "leaky_relu":
            return np.where(z > 0, 1.0, self.slope)
        if self.kind == "sigmoid":
            s = 1.0 / (1.0 + np.exp(-z))
            return s * (1.0 - s)
        if self.kind == "sin":
            return np.cos(z)
        return np.ones_like(z)


class LayerUnit:
    """One affine + activation + optional pool stage.

    ``weight`` is (C_out, C_in, H_K, W_K) for conv units and
    (n_out, n_in) for fc units; ``bias`` is (C_out,) or (n_out,).
    """

    def __init__(self, kind, weight, bias, activation, pool=None):
        if kind not in ("conv", "fc"):
            raise ValueError(f"unknown unit kind {kind!r}")
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if kind == "conv" and weight.ndim != 4:
            raise ShapeMismatch(f"conv weight must be 4-D, got {weight.shape}")
        if kind == "fc" and weight.ndim != 2:
            raise ShapeMismatch(f"fc weight must be 2-D, got {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        if pool is not None:
            if kind != "conv":
                raise ShapeMismatch("pooling requires a spatial (conv) unit")
            pool = int(pool)
            if pool < 1:
                raise ValueError("pool window must be >= 1")
        self.kind = kind
        self.weight = weight
        self.bias = bias
        self.activation = activation
        self.pool = pool

    def param_count(self):
        return self.weight.size + self.bias.size

    def copy(self):
        return LayerUnit(self.kind, self.weight.copy(), self.bias.copy(),
                         self.activation, self.pool)


class Network:
    """Ordered unit sequence with validated shape chaining.

    The final unit must be fully connected with identity activation so the
    network emits raw logits.
    """

    def __init__(self, units, input_shape):
        if not units:
            raise ValueError("network needs at least one unit")
        last = units[-1]
        if last.kind != "fc" or last.activation.kind != "identity":
            raise ShapeMismatch("final unit must be fc with identity activation")
        self.units = list(units)
        self.input_shape = tuple(int(s) for s in input_shape)
        self._z_shapes = []
        self._a_shapes = []
        shape = self.input_shape
        for idx, unit in enumerate(self.units, start=1):
            if unit.kind == "conv":
                if len(shape) != 3:
                    raise ShapeMismatch(f"unit {idx}: conv needs (C, H, W) input, got {shape}")
                c_out, c_in, hk, wk = unit.weight.shape
                if shape[0] != c_in:
                    raise ShapeMismatch(f"unit {idx}: expected {c_in} channels, got {shape[0]}")
                if shape[1] < hk or shape[2] < wk:
                    raise ShapeMismatch(f"unit {idx}: input {shape[1:]} smaller than kernel")
                z_shape = (c_out, shape[1] - hk + 1, shape[2] - wk + 1)
                a_shape = z_shape
                if unit.pool:
                    if z_shape[1] % unit.pool or z_shape[2] % unit.pool:
                        raise ShapeMismatch(
                            f"unit {idx}: pool {unit.pool} does not divide extent {z_shape[1:]}"
                        )
                    a_shape = (c_out, z_shape[1] // unit.pool, z_shape[2] // unit.pool)
            else:
                n_out, n_in = unit.weight.shape
                if int(np.prod(shape)) != n_in:
                    raise ShapeMismatch(
                        f"unit {idx}: fc expects {n_in} inputs, got {int(np.prod(shape))}"
                    )
                z_shape = (n_out,)
                a_shape = z_shape
            self._z_shapes.append(z_shape)
            self._a_shapes.append(a_shape)
            shape = a_shape

    @property
    def depth(self):
        return len(self.units)

    @property
    def class_count(self):
        return self.units[-1].weight.shape[0]

    def z_shape(self, l):
        """Pre-activation shape of unit ``l`` (1-based)."""
        return self._z_shapes[l - 1]

    def a_shape(self, l):
        """Output (post-activation, post-pool) shape of unit ``l`` (1-based)."""
        if l == 0:
            return self.input_shape
        return self._a_shapes[l - 1]

    def param_count(self, l):
        return self.units[l - 1].param_count()

    def trainable_param_count(self, l_s, l_r):
        return sum(self.param_count(l) for l in range(l_s + 1, l_r + 1))

    def copy(self):
        return Network([u.copy() for u in self.units], self.input_shape)


@dataclass
class ForwardTrace:
    """Per-unit pre-activations and outputs captured during a forward pass.

    ``z[l-1]`` and ``a[l-1]`` hold unit ``l``'s batched pre-activation and
    output; ``a0`` is the batch itself.  ``pool_switches`` records argmax
    positions inside each pool window for exact backprop routing.
    """

    a0: np.ndarray
    z: list
    a: list
    pool_switches: list

    @property
    def logits(self):
        return self.a[-1]

    def a_of(self, l):
        """Output of unit ``l`` with ``l = 0`` meaning the input batch."""
        return self.a0 if l == 0 else self.a[l - 1]


def _maxpool(x, k):
    n, c, h, w = x.shape
    windows = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, h // k, w // k, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(grad, idx, k, out_shape):
    n, c, h, w = out_shape
    flat = np.zeros((n, c, h // k, w // k, k * k), dtype=np.float64)
    np.put_along_axis(flat, idx[..., None], grad[..., None], axis=-1)
    windows = flat.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
    return windows.reshape(n, c, h, w)


def forward_trace(net, batch):
    """Run ``batch`` through ``net`` recording every z_l and a_l."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != net.input_shape:
        raise ShapeMismatch(
            f"batch shape {batch.shape[1:]} != network input {net.input_shape}"
        )
    a = batch
    zs, outs, switches = [], [], []
    for unit in net.units:
        if unit.kind == "conv":
            z = valid_correlate(a, unit.weight, unit.bias)
        else:
            z = a.reshape(a.shape[0], -1) @ unit.weight.T + unit.bias
        act = unit.activation.forward(z)
        if unit.pool:
            out, idx = _maxpool(act, unit.pool)
        else:
            out, idx = act, None
        zs.append(z)
        outs.append(out)
        switches.append(idx)
        a = out
    return ForwardTrace(a0=batch, z=zs, a=outs, pool_switches=switches)


def forward_logits(net, images, batch_size=1024):
    """Chunked forward pass returning only the final logits."""
    images = np.asarray(images, dtype=np.float64)
    pieces = []
    for start in range(0, images.shape[0], batch_size):
        pieces.append(forward_trace(net, images[start : start + batch_size]).logits)
    return np.concatenate(pieces, axis=0)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def compute_loss(kind, prediction, target):
    """Return ``(value, gradient w.r.t. prediction)`` for a loss kind.

    ``cross_entropy`` expects logits and integer labels and applies a
    softmax internally; ``mse`` and ``l1`` average over every element of
    the prediction tensor.
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    if kind == "cross_entropy":
        labels = np.asarray(target)
        if labels.ndim != 1 or prediction.ndim != 2:
            raise ShapeMismatch("cross_entropy expects (N, n) logits and (N,) labels")
        n_classes = prediction.shape[1]
        if labels.min() < 0 or labels.max() >= n_classes:
            raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
        p = softmax(prediction)
        n = prediction.shape[0]
        picked = p[np.arange(n), labels]
        value = float(-np.log(np.maximum(picked, 1e-300)).mean())
        grad = p
        grad[np.arange(n), labels] -= 1.0
        return value, grad / n
    target = np.asarray(target, dtype=np.float64)
    if target.shape != prediction.shape:
        raise ShapeMismatch(f"target shape {target.shape} != prediction {prediction.shape}")
    diff = prediction - target
    if kind == "mse":
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    if kind == "l1":
        return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size
    raise ValueError(f"unknown loss kind {kind!r}")


def _affine_backward(unit, a_prev, grad_z):
    """Gradients of an affine stage: (dW, db, grad w.r.t. its input)."""
    if unit.kind == "fc":
        flat_prev = a_prev.reshape(a_prev.shape[0], -1)
        d_w = grad_z.T @ flat_prev
        d_b = grad_z.sum(axis=0)
        grad_prev = (grad_z @ unit.weight).reshape(a_prev.shape)
        return d_w, d_b, grad_prev
    c_out, c_in, hk, wk = unit.weight.shape
    windows = np.lib.stride_tricks.sliding_window_view(a_prev, (hk, wk), axis=(-2, -1))
    d_w = np.einsum("nohw,nchwst->ocst", grad_z, windows, optimize=True)
    d_b = grad_z.sum(axis=(0, 2, 3))
    padded = np.pad(grad_z, ((0, 0), (0, 0), (hk - 1, hk - 1), (wk - 1, wk - 1)))
    flipped = unit.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_prev = valid_correlate(padded, np.ascontiguousarray(flipped))
    return d_w, d_b, grad_prev


def loss_and_gradients(net, trace, labels, alpha=0.0, recon_targets=None,
                       train_range=None, rec_loss="mse"):
    """Combined classification + reconstruction loss and its parameter grads.

    The total objective is ``(1 - alpha) * cls + alpha * rec`` where the
    reconstruction term compares unit ``l_r``'s output against
    ``recon_targets``.  Gradients are returned only for units in
    ``(l_s, l_r]``; the backward pass still flows through frozen tail
    units so the classification term reaches the trainable ones.
    """
    depth = net.depth
    l_s, l_r = train_range if train_range is not None else (0, depth)
    if not (0 <= l_s < l_r <= depth):
        raise ValueError(f"invalid trainable range ({l_s}, {l_r}] for depth {depth}")
    if alpha > 0.0 and recon_targets is None:
        raise MissingReconTargets("alpha > 0 requires reconstruction targets")

    cls_value, cls_grad = compute_loss("cross_entropy", trace.logits, labels)
    rec_value = 0.0
    rec_grad = None
    if alpha > 0.0:
        rec_value, rec_grad = compute_loss(rec_loss, trace.a[l_r - 1], recon_targets)
    total = (1.0 - alpha) * cls_value + alpha * rec_value

    grads = {}
    grad_a = (1.0 - alpha) * cls_grad
    for l in range(depth, l_s, -1):
        unit = net.units[l - 1]
        if alpha > 0.0 and l == l_r:
            grad_a = grad_a + alpha * rec_grad
        if unit.pool:
            grad_act = _maxpool_backward(grad_a, trace.pool_switches[l - 1],
                                         unit.pool, trace.z[l - 1].shape)
        else:
            grad_act = grad_a
        grad_z = grad_act * unit.activation.derivative(trace.z[l - 1])
        d_w, d_b, grad_a = _affine_backward(unit, trace.a_of(l - 1), grad_z)
        if l_s < l <= l_r:
            grads[(l, "weight")] = d_w
            grads[(l, "bias")] = d_b
    return {"total": total, "cls": cls_value, "rec": rec_value}, grads


@dataclass
class AdamState:
    """Adam moments keyed by (unit index, parameter name)."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, net, grads):
        self.step_count += 1
        t = self.step_count
        for key, grad in grads.items():
            l, name = key
            if key not in self.m:
                self.m[key] = np.zeros_like(grad)
                self.v[key] = np.zeros_like(grad)
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * grad
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * grad * grad
            m_hat = self.m[key] / (1 - self.beta1 ** t)
            v_hat = self.v[key] / (1 - self.beta2 ** t)
            param = getattr(net.units[l - 1], name)
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train_step(net, adam, batch, labels, recon_targets=None, alpha=0.0,
               train_range=None, rec_loss="mse"):
    """One combined-loss Adam step on units in ``(l_s, l_r]``.

    Parameters outside the trainable range are untouched.  Returns the
    loss values of the step.
    """
    trace = forward_trace(net, batch)
    losses, grads = loss_and_gradients(net, trace, labels, alpha=alpha,
                                       recon_targets=recon_targets,
                                       train_range=train_range, rec_loss=rec_loss)
    adam.update(net, grads)
    return losses


def evaluate(net, dataset, batch_size=1024):
    """Fraction of dataset samples whose argmax logit equals the label."""
    if len(dataset.labels) == 0:
        raise ValueError("dataset is empty")
    logits = forward_logits(net, dataset.images, batch_size=batch_size)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(dataset.labels)))


# Architecture descriptions are lists of unit dicts; in-shapes are derived
# by chaining from the network input shape.
ARCHITECTURE_PRESETS = {
    "mnist_baseline": {
        "input_shape": [1, 28, 28],
        "units": [
            {"kind": "conv", "out_channels": 2, "kernel": [5, 5], "activation": "tanh", "pool": 2},
            {"kind": "conv", "out_channels": 4, "kernel": [5, 5], "activation": "tanh"},
            {"kind": "fc", "out_features": 10, "activation": "identity"},
        ],
    },
    # Small three-conv nets whose channel counts rise or fall with depth,
    # used to compare the two reconstruction regimes.
    "conv3_ascending": {
        "input_shape": [3, 32, 32],
        "units": [
            {"kind": "conv", "out_channels": 5, "kernel": [5, 5], "activation": "tanh", "pool": 2},
            {"kind": "conv", "out_channels": 10, "kernel": [3, 3], "activation": "tanh", "pool": 2},
            {"kind": "conv", "out_channels": 15, "kernel": [3, 3], "activation": "tanh"},
            {"kind": "fc", "out_features": 128, "activation": "tanh"},
            {"kind": "fc", "out_features": 10, "activation": "identity"},
        ],
    },
    "conv3_descending": {
        "input_shape": [3, 32, 32],
        "units": [
            {"kind": "conv", "out_channels": 15, "kernel": [5, 5], "activation": "tanh", "pool": 2},
            {"kind": "conv", "out_channels": 10, "kernel": [3, 3], "activation": "tanh", "pool": 2},
            {"kind": "conv", "out_channels": 5, "kernel": [3, 3], "activation": "tanh"},
            {"kind": "fc", "out_features": 128, "activation": "tanh"},
            {"kind": "fc", "out_features": 10, "activation": "identity"},
        ],
    },
}


def _unit_activation(desc):
    return Activation(desc.get("activation", "tanh"), slope=desc.get("slope", 0.1))


def build_network(architecture, seed=0):
    """Materialize an architecture description with seeded weight init.

    ``architecture`` is a preset name or a dict with ``input_shape`` and
    ``units``.  Weights and biases draw from
    uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    """
    if isinstance(architecture, str):
        try:
            architecture = ARCHITECTURE_PRESETS[architecture]
        except KeyError:
            raise ValueError(f"unknown architecture preset {architecture!r}") from None
    rng = np.random.default_rng(seed)
    input_shape = tuple(architecture["input_shape"])
    shape = input_shape
    units = []
    for desc in architecture["units"]:
        if desc["kind"] == "conv":
            c_out = desc["out_channels"]
            hk, wk = desc["kernel"]
            c_in = shape[0]
            fan_in = c_in * hk * wk
            bound = 1.0 / np.sqrt(fan_in)
            weight = rng.uniform(-bound, bound, size=(c_out, c_in, hk, wk))
            bias = rng.uniform(-bound, bound, size=c_out)
            unit = LayerUnit("conv", weight, bias, _unit_activation(desc),
                             pool=desc.get("pool"))
            h = shape[1] - hk + 1
            w = shape[2] - wk + 1
            if unit.pool:
                h //= unit.pool
                w //= unit.pool
            shape = (c_out, h, w)
        elif desc["kind"] == "fc":
            n_out = desc["out_features"]
            n_in = int(np.prod(shape))
            bound = 1.0 / np.sqrt(n_in)
            weight = rng.uniform(-bound, bound, size=(n_out, n_in))
            bias = rng.uniform(-bound, bound, size=n_out)
            unit = LayerUnit("fc", weight, bias, _unit_activation(desc))
            shape = (n_out,)
        else:
            raise ValueError(f"unknown unit kind {desc['kind']!r}")
        units.append(unit)
    return Network(units, input_shape)


def save_checkpoint(net, path):
    """Serialize a network; round trips are bit-exact."""
    unit_descs = []
    blocks = {}
    for idx, unit in enumerate(net.units, start=1):
        unit_descs.append({
            "kind": unit.kind,
            "activation": unit.activation.kind,
            "slope": unit.activation.slope,
            "pool": unit.pool,
            "weight_shape": list(unit.weight.shape),
            "bias_shape": list(unit.bias.shape),
        })
        blocks[f"unit{idx}.weight"] = unit.weight
        blocks[f"unit{idx}.bias"] = unit.bias
    header = {"input_shape": list(net.input_shape), "units": unit_descs}
    container.write_container(path, CHECKPOINT_MAGIC, header, blocks)


def load_checkpoint(path):
    header, blocks = container.read_container(path, CHECKPOINT_MAGIC)
    units = []
    for idx, desc in enumerate(header["units"], start=1):
        units.append(LayerUnit(
            desc["kind"],
            blocks[f"unit{idx}.weight"],
            blocks[f"unit{idx}.bias"],
            Activation(desc["activation"], slope=desc["slope"]),
            pool=desc["pool"],
        ))
    return Network(units, header["input_shape"])

"""Dense networks with exact backpropagation, written directly on numpy.

Batches are row-major: an input batch has shape ``(batch, features)`` and a
layer's weights have shape ``(out_dim, in_dim)``. Parameters are float64.

Model file layout (little-endian)::

    b"ISMN" | u16 version=1 | u16 n_layers | u16 meta_len | meta (utf-8 JSON)
    n_layers x (u32 in | u32 out | u8 activation | f64 W row-major | f64 b)
"""

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError

ACTIVATIONS = ("sigmoid", "relu", "linear", "softmax")
RHO_HAT_CLAMP = 1e-7

MODEL_MAGIC = b"ISMN"
MODEL_VERSION = 1


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).ravel()
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.bias.size != self.weights.shape[0]:
            raise ParameterError("bias length must equal the layer's output dimension")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ParameterError("layer parameters must be finite")

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def copy(self):
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)

    @classmethod
    def init(cls, in_dim, out_dim, activation, rng):
        """Glorot-uniform init (He-uniform for relu), zero bias."""
        if activation == "relu":
            limit = math.sqrt(6.0 / in_dim)
        else:
            limit = math.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim), activation)


@dataclass
class DenseNetwork:
    layers: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ParameterError(
                    f"layer output {a.out_dim} does not feed next layer input {b.in_dim}")

    @property
    def dims(self):
        if not self.layers:
            return ()
        return (self.layers[0].in_dim,) + tuple(layer.out_dim for layer in self.layers)

    def copy(self):
        return DenseNetwork([layer.copy() for layer in self.layers], dict(self.meta))

    def params(self):
        """Flat list [W0, b0, W1, b1, ...] of the live parameter arrays."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def predict_proba(self, x):
        return forward(self, x).output

    def predict(self, x, batch_size=4096):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        preds = [np.argmax(forward(self, x[i:i + batch_size]).output, axis=1)
                 for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    @classmethod
    def build(cls, dims, hidden_activation, output_activation, rng):
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            act = output_activation if i == len(dims) - 2 else hidden_activation
            layers.append(DenseLayer.init(a, b, act, rng))
        return cls(layers)


def sigmoid(z):
    # Branch-free stable form.
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    s = np.exp(z - z.max(axis=-1, keepdims=True))
    return s / s.sum(axis=-1, keepdims=True)


def activate(z, kind):
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "softmax":
        return softmax(z)
    return z


@dataclass
class Trace:
    """Everything a forward pass records for the backward pass.

    ``activations[0]`` is the input; ``activations[i]`` is layer i's output
    after dropout. ``raw[i]`` is the same output before dropout.
    """

    activations: list
    raw: list
    pre: list
    masks: list

    @property
    def output(self):
        return self.activations[-1]


def dropout_mask(shape, rate, rng):
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def apply_dropout(activations, rate, rng, training):
    """Inverted dropout: zero each unit with probability ``rate``, rescale survivors."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return activations
    return activations * dropout_mask(np.shape(activations), rate, rng)


def forward(net, x, *, dropout_rate=0.0, rng=None, training=False):
    """Forward pass. Dropout, when active, hits hidden-layer outputs only."""
    a = np.asarray(x, dtype=np.float64)
    squeeze = a.ndim == 1
    a = np.atleast_2d(a)
    if not net.layers or a.shape[1] != net.layers[0].in_dim:
        raise ParameterError(
            f"input dimension {a.shape[1]} does not match network input "
            f"{net.layers[0].in_dim if net.layers else None}")
    acts, raw, pre, masks = [a], [a], [], []
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        z = a @ layer.weights.T + layer.bias
        h = activate(z, layer.activation)
        mask = None
        if training and dropout_rate > 0 and i < last:
            mask = dropout_mask(h.shape, dropout_rate, rng)
        a = h if mask is None else h * mask
        pre.append(z)
        raw.append(h)
        masks.append(mask)
        acts.append(a)
    if squeeze:
        acts = [v[0] for v in acts]
        raw = [v[0] for v in raw]
        pre = [v[0] for v in pre]
        masks = [None if m is None else m[0] for m in masks]
    return Trace(acts, raw, pre, masks)


def backward(net, trace, grad_output, *, wrt="output", hidden_grads=None):
    """Exact gradients of a scalar loss with respect to every parameter.

    ``grad_output`` is dL/d(final activation), or dL/d(final pre-activation)
    when ``wrt="logits"`` (the usual fused softmax + cross-entropy case).
    ``hidden_grads`` maps a layer index to an extra dL/d(raw output of that
    layer), which is how batch-coupled terms such as the sparsity penalty
    enter. Returns a list of ``(dW, db)`` per layer.
    """
    if wrt not in ("output", "logits"):
        raise ParameterError("wrt must be 'output' or 'logits'")
    n_layers = len(net.layers)
    if len(trace.pre) != n_layers:
        raise ParameterError("trace does not come from this network")
    squeeze = np.ndim(trace.activations[0]) == 1
    as2d = (lambda v: np.atleast_2d(v)) if squeeze else (lambda v: v)
    g = as2d(np.asarray(grad_output, dtype=np.float64))
    if g.shape != as2d(trace.output).shape:
        raise ParameterError(f"gradient shape {g.shape} does not match output")
    hidden_grads = hidden_grads or {}
    grads = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        layer = net.layers[i]
        h = as2d(trace.raw[i + 1])
        if i == n_layers - 1 and wrt == "logits":
            dz = g
        else:
            if trace.masks[i] is not None:
                g = g * as2d(trace.masks[i])
            if i in hidden_grads:
                g = g + as2d(hidden_grads[i])
            kind = layer.activation
            if kind == "sigmoid":
                dz = g * h * (1.0 - h)
            elif kind == "relu":
                dz = g * (as2d(trace.pre[i]) > 0)
            elif kind == "softmax":
                dz = h * (g - np.sum(g * h, axis=1, keepdims=True))
            else:
                dz = g
        a_prev = as2d(trace.activations[i])
        grads[i] = (dz.T @ a_prev, dz.sum(axis=0))
        if i:
            g = dz @ layer.weights
    return grads


def mse_loss(output, target):
    """Sum of squared errors per vector; averaged over rows for a batch."""
    o = np.asarray(output, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if o.shape != t.shape:
        raise ParameterError(f"shape mismatch {o.shape} vs {t.shape}")
    d = (o - t) ** 2
    if d.ndim <= 1:
        return float(d.sum())
    return float(d.sum(axis=1).mean())


def mse_grad(output, target):
    o = np.asarray(output, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    g = 2.0 * (o - t)
    return g if g.ndim <= 1 else g / g.shape[0]


def clamp_rho_hat(rho_hat):
    return np.clip(np.asarray(rho_hat, dtype=np.float64), RHO_HAT_CLAMP, 1 - RHO_HAT_CLAMP)


def kl_sparsity(rho, rho_hat):
    """Summed Bernoulli KL(rho || rho_hat_j) over neurons, natural log."""
    if not 0 < rho < 1:
        raise ParameterError(f"rho must be in (0, 1), got {rho}")
    q = clamp_rho_hat(rho_hat)
    return float(np.sum(rho * np.log(rho / q) + (1 - rho) * np.log((1 - rho) / (1 - q))))


def kl_sparsity_grad(rho, rho_hat):
    """d KL / d rho_hat_j; zero where the clamp is active."""
    r = np.asarray(rho_hat, dtype=np.float64)
    q = clamp_rho_hat(r)
    g = (1 - rho) / (1 - q) - rho / q
    return np.where(q == r, g, 0.0)


def mean_activation(bottleneck):
    h = np.asarray(bottleneck, dtype=np.float64)
    h = np.atleast_2d(h)
    if h.shape[0] == 0:
        raise ParameterError("empty batch")
    return h.mean(axis=0)


def softmax_cross_entropy(logits, label):
    """Cross-entropy of softmax(logits) against integer labels.

    For a single vector returns ``(loss, d loss / d logits)``. For a batch
    the loss is the batch mean and the gradient already carries the 1/B.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if y.shape[0] != z.shape[0]:
        raise ParameterError("one label per row required")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ParameterError(f"label out of range for {z.shape[1]} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, y]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, y] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / z.shape[0]


def dae_objective(net, x_in, x_target, rho=0.1, lam=0.0, bottleneck_layer=0):
    """Batch DAE loss mean_b sum_i (x_i - o_i)^2 + lam * KL(rho || rho_hat) and its gradients.

    ``rho_hat`` is the batch mean of the bottleneck layer's activations.
    Returns ``(loss, grads, rho_hat)``.
    """
    trace = forward(net, np.atleast_2d(x_in))
    out = trace.output
    target = np.atleast_2d(np.asarray(x_target, dtype=np.float64))
    loss = mse_loss(out, target)
    hidden = {}
    h = trace.raw[bottleneck_layer + 1]
    rho_hat = mean_activation(h)
    if lam:
        loss += lam * kl_sparsity(rho, rho_hat)
        per_unit = lam * kl_sparsity_grad(rho, rho_hat) / h.shape[0]
        hidden[bottleneck_layer] = np.broadcast_to(per_unit, h.shape)
    grads = backward(net, trace, mse_grad(out, target), hidden_grads=hidden)
    return loss, grads, rho_hat


@dataclass(frozen=True)
class SparsityConfig:
    rho: float = 0.1
    lam: float = 1.0

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ParameterError(f"rho must be in (0, 1), got {self.rho}")
        if not self.lam >= 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    dropout_rate: float = 0.0
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ParameterError("dropout_rate must be in [0, 1)")


@dataclass
class OptimizerState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def optimize_step(params, grads, state, config):
    """Update ``params`` in place (and return them) with SGD-momentum or Adam."""
    if len(params) != len(grads):
        raise ParameterError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    lr = config.learning_rate
    if config.optimizer == "sgd_momentum":
        for p, g, vel in zip(params, grads, state.m):
            vel *= config.momentum
            vel -= lr * g
            p += vel
        return params
    t = state.step
    c1 = 1 - ADAM_BETA1 ** t
    c2 = 1 - ADAM_BETA2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params


def flat_grads(grads):
    out = []
    for dw, db in grads:
        out.extend((dw, db))
    return out


def count_params(net):
    """(multiplications, trainable parameters) of one forward pass."""
    mults = sum(layer.out_dim * layer.in_dim for layer in net.layers)
    return mults, mults + sum(layer.out_dim for layer in net.layers)


def _act_code(kind):
    return ACTIVATIONS.index(kind)


def model_bytes(net) -> bytes:
    meta = json.dumps(net.meta, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<HHH", MODEL_VERSION, len(net.layers), len(meta)))
    buf.write(meta)
    for layer in net.layers:
        buf.write(struct.pack("<IIB", layer.in_dim, layer.out_dim, _act_code(layer.activation)))
        buf.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return buf.getvalue()


def save_model(net, path):
    with open(path, "wb") as fh:
        fh.write(model_bytes(net))
    return path


def load_model(path):
    with open(path, "rb") as fh:
        raw = fh.read()

    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("model file is truncated")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MODEL_MAGIC:
        raise FormatError("bad model magic")
    version, n_layers, meta_len = struct.unpack("<HHH", take(6))
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    try:
        meta = json.loads(take(meta_len).decode()) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("model metadata is corrupt") from exc
    layers = []
    for _ in range(n_layers):
        d_in, d_out, code = struct.unpack("<IIB", take(9))
        if code >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation code {code}")
        w = np.frombuffer(take(8 * d_in * d_out), dtype="<f8").reshape(d_out, d_in)
        b = np.frombuffer(take(8 * d_out), dtype="<f8")
        try:
            layers.append(DenseLayer(w.copy(), b.copy(), ACTIVATIONS[code]))
        except ParameterError as exc:
            raise FormatError(f"invalid layer: {exc}") from exc
    if pos != len(raw):
        raise FormatError("trailing bytes after the last layer")
    try:
        return DenseNetwork(layers, meta)
    except ParameterError as exc:
        raise FormatError(str(exc)) from exc

"""Dense feed-forward network core with exact analytic gradients.

All parameters of a network live in one flat float64 vector laid out layer by
layer: weight matrix in row-major order, then the bias vector. The flat layout
makes parameter snapshots, Fisher diagonals and quadratic penalties plain
vector arithmetic.

Every public function accepts a single sample (1-D input) or a batch
(2-D input, one row per sample) and preserves that convention in its outputs.
Gradients returned for a batch are summed over the batch, which is the adjoint
of a summed scalar loss.

Randomness: weights are drawn uniformly from +-1/sqrt(fan_in) using numpy's
PCG64 generator, seeded through SeedSequence with one child stream per layer.
Biases start at zero. Identical seeds give bit-identical parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, LabelError, ShapeError

ACTIVATIONS = ("tanh", "relu", "linear")

# Probability floor applied before log in cross-entropy.
PROB_FLOOR = 1e-12


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_deriv(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a dense network: layer widths plus hidden activations.

    ``layer_widths`` starts with the input width and ends with the output
    width. ``activation`` is either one name applied to every hidden layer or
    a tuple with one name per hidden layer; the output layer is always linear.
    """

    layer_widths: tuple[int, ...]
    activation: tuple[str, ...] = ()
    init_seed: int = 0

    def __init__(self, layer_widths, activation="tanh", init_seed=0):
        widths = tuple(int(w) for w in layer_widths)
        if len(widths) < 2:
            raise ShapeError("a network needs at least an input and an output layer")
        if any(w < 1 for w in widths):
            raise ShapeError(f"all layer widths must be >= 1, got {widths}")
        n_hidden = len(widths) - 2
        if isinstance(activation, str):
            acts = (activation,) * n_hidden
        else:
            acts = tuple(activation)
            if len(acts) != n_hidden:
                raise ConfigError(
                    f"expected {n_hidden} hidden activations, got {len(acts)}"
                )
        for name in acts:
            if name not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {name!r}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activation", acts)
        object.__setattr__(self, "init_seed", int(init_seed))

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) per layer."""
        w = self.layer_widths
        return [(w[i + 1], w[i]) for i in range(self.n_layers)]

    @property
    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())

    def layer_param_slices(self) -> list[tuple[slice, slice, tuple[int, int]]]:
        """(weight slice, bias slice, (fan_out, fan_in)) per layer."""
        out = []
        offset = 0
        for fan_out, fan_in in self.layer_shapes():
            w_slice = slice(offset, offset + fan_out * fan_in)
            offset += fan_out * fan_in
            b_slice = slice(offset, offset + fan_out)
            offset += fan_out
            out.append((w_slice, b_slice, (fan_out, fan_in)))
        return out

    def init_params(self) -> np.ndarray:
        """Fresh flat parameter vector: U(+-1/sqrt(fan_in)) weights, zero biases."""
        children = np.random.SeedSequence(self.init_seed).spawn(self.n_layers)
        values = np.empty(self.param_count, dtype=np.float64)
        for child, (w_slice, b_slice, (fan_out, fan_in)) in zip(
            children, self.layer_param_slices()
        ):
            rng = np.random.Generator(np.random.PCG64(child))
            lim = 1.0 / math.sqrt(fan_in)
            values[w_slice] = rng.uniform(-lim, lim, fan_out * fan_in)
            values[b_slice] = 0.0
        return values

    def with_output_width(self, new_width: int) -> "NetworkSpec":
        return NetworkSpec(
            (*self.layer_widths[:-1], new_width), self.activation, self.init_seed
        )


@dataclass
class ForwardTrace:
    """Cache from :func:`forward`, sufficient to run :func:`backward`.

    ``activations[i]`` is the input consumed by layer ``i`` (index 0 is the
    network input); ``pre_activations[i]`` is layer ``i``'s affine output.
    """

    spec: NetworkSpec
    theta: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    squeezed: bool

    @property
    def logits(self) -> np.ndarray:
        return self.pre_activations[-1]


def unpack(theta: np.ndarray, spec: NetworkSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """View the flat vector as per-layer (W, b) pairs; W has shape (out, in)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.param_count,):
        raise ShapeError(
            f"parameter vector has length {theta.shape}, spec needs {spec.param_count}"
        )
    layers = []
    for w_slice, b_slice, (fan_out, fan_in) in spec.layer_param_slices():
        layers.append((theta[w_slice].reshape(fan_out, fan_in), theta[b_slice]))
    return layers


def pack(layers: list[tuple[np.ndarray, np.ndarray]], spec: NetworkSpec) -> np.ndarray:
    values = np.empty(spec.param_count, dtype=np.float64)
    for (W, b), (w_slice, b_slice, shape) in zip(layers, spec.layer_param_slices()):
        if W.shape != shape or b.shape != (shape[0],):
            raise ShapeError(f"layer with shape {W.shape} does not match spec {shape}")
        values[w_slice] = np.asarray(W, dtype=np.float64).ravel()
        values[b_slice] = b
    return values


def _as_batch(x, width: int) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    squeezed = X.ndim == 1
    if squeezed:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != width:
        raise ShapeError(f"input has shape {np.shape(x)}, expected width {width}")
    if not np.all(np.isfinite(X)):
        raise ShapeError("input contains non-finite values")
    return X, squeezed


def forward(theta, spec: NetworkSpec, x) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network; returns (logits, trace). Accepts one sample or a batch."""
    layers = unpack(theta, spec)
    X, squeezed = _as_batch(x, spec.input_width)
    pre = []
    acts = [X]
    a = X
    for i, (W, b) in enumerate(layers):
        z = a @ W.T + b
        pre.append(z)
        if i < spec.n_layers - 1:
            a = _activate(spec.activation[i], z)
            acts.append(a)
    trace = ForwardTrace(spec, np.asarray(theta, dtype=np.float64), pre, acts, squeezed)
    logits = pre[-1]
    return (logits[0] if squeezed else logits), trace


def backward_deltas(trace: ForwardTrace, dL_dlogits) -> list[np.ndarray]:
    """Per-layer upstream gradients (one (n, width) array per layer).

    Exposed separately so that per-sample squared gradients (Fisher diagonal)
    can reuse the recursion without materializing per-sample weight gradients.
    """
    G = np.asarray(dL_dlogits, dtype=np.float64)
    if G.ndim == 1:
        G = G[None, :]
    if G.shape != trace.pre_activations[-1].shape:
        raise ShapeError(
            f"logit gradient has shape {np.shape(dL_dlogits)}, "
            f"trace expects {trace.pre_activations[-1].shape}"
        )
    layers = unpack(trace.theta, trace.spec)
    deltas: list[np.ndarray] = [np.empty(0)] * trace.spec.n_layers
    delta = G
    for i in range(trace.spec.n_layers - 1, -1, -1):
        deltas[i] = delta
        if i > 0:
            W = layers[i][0]
            back = delta @ W
            delta = back * _activation_deriv(
                trace.spec.activation[i - 1],
                trace.pre_activations[i - 1],
                trace.activations[i],
            )
    return deltas


def backward(trace: ForwardTrace, dL_dlogits) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of the scalar whose logit gradient is supplied.

    Returns ``(grad_theta, grad_x)``. For a batched trace, ``grad_theta`` is
    summed over the batch and ``grad_x`` keeps one row per sample.
    """
    deltas = backward_deltas(trace, dL_dlogits)
    grad = np.empty(trace.spec.param_count, dtype=np.float64)
    for i, (w_slice, b_slice, _) in enumerate(trace.spec.layer_param_slices()):
        grad[w_slice] = (deltas[i].T @ trace.activations[i]).ravel()
        grad[b_slice] = deltas[i].sum(axis=0)
    W0 = unpack(trace.theta, trace.spec)[0][0]
    grad_x = deltas[0] @ W0
    if trace.squeezed:
        grad_x = grad_x[0]
    return grad, grad_x


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-shift for numerical stability."""
    Z = np.asarray(logits, dtype=np.float64)
    squeezed = Z.ndim == 1
    if squeezed:
        Z = Z[None, :]
    shifted = Z - Z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    P = e / e.sum(axis=1, keepdims=True)
    return P[0] if squeezed else P


def cross_entropy(probs, y: int) -> float:
    """-log(probs[y]), with probabilities floored at PROB_FLOOR before the log."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError("cross_entropy expects a single probability vector")
    if not isinstance(y, (int, np.integer)) or not (0 <= int(y) < p.shape[0]):
        raise LabelError(f"label {y!r} out of range for {p.shape[0]} classes")
    return float(-np.log(max(p[int(y)], PROB_FLOOR)))


def optimizer_step(theta, grad, lr: float) -> np.ndarray:
    """One plain gradient-descent step: theta - lr * grad."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match {theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient; aborting the run")
    return theta - lr * grad


@dataclass(frozen=True)
class EncoderParams:
    """A trained autoencoder plus the index of its bottleneck layer.

    ``input_mean`` is subtracted before the first layer when centering was
    requested at training time; it is part of the encoder.
    """

    values: np.ndarray
    spec: NetworkSpec
    latent_dim: int
    bottleneck_layer: int
    initial_mse: float
    final_mse: float
    input_mean: np.ndarray | None = None


def _reconstruction_mse(theta, spec: NetworkSpec, X: np.ndarray) -> float:
    out, _ = forward(theta, spec, X)
    return float(np.mean((out - X) ** 2))


def train_autoencoder(
    raw,
    latent_dim: int,
    epochs: int,
    lr: float,
    seed: int,
    *,
    hidden: tuple[int, ...] = (),
    activation="tanh",
    batch_size: int = 32,
    center: bool = False,
) -> EncoderParams:
    """Train a symmetric autoencoder with SGD on mean squared reconstruction error.

    The architecture is (d, *hidden, latent_dim, *reversed(hidden), d); the
    bottleneck output (after its activation) is the feature vector.
    ``center=True`` subtracts the training mean before the first layer, which
    keeps SGD stable on wide inputs with a large common offset.
    """
    R = np.asarray(raw, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] == 0:
        raise DataError("autoencoder training needs a non-empty 2-D dataset")
    if latent_dim < 1:
        raise ConfigError("latent_dim must be >= 1")
    mean = R.mean(axis=0) if center else None
    if mean is not None:
        R = R - mean
    d = R.shape[1]
    widths = (d, *hidden, latent_dim, *tuple(reversed(hidden)), d)
    spec = NetworkSpec(widths, activation, init_seed=seed)
    theta = spec.init_params()
    initial = _reconstruction_mse(theta, spec, R)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 1])))
    n = R.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = R[order[start : start + batch_size]]
            out, trace = forward(theta, spec, batch)
            upstream = 2.0 * (out - batch) / batch.shape[0]
            grad, _ = backward(trace, upstream)
            theta = optimizer_step(theta, grad, lr)
    final = _reconstruction_mse(theta, spec, R)
    return EncoderParams(theta, spec, latent_dim, len(hidden), initial, final, mean)


def encode(enc: EncoderParams, raw) -> np.ndarray:
    """Map raw vectors through the encoder half of a trained autoencoder."""
    layers = unpack(enc.values, enc.spec)
    X, squeezed = _as_batch(raw, enc.spec.input_width)
    a = X if enc.input_mean is None else X - enc.input_mean
    for i in range(enc.bottleneck_layer + 1):
        W, b = layers[i]
        a = _activate(enc.spec.activation[i], a @ W.T + b)
    return a[0] if squeezed else a


def expand_output_head(
    theta, spec: NetworkSpec, new_width: int, sub_seed: int
) -> tuple[np.ndarray, NetworkSpec]:
    """Grow the final layer to ``new_width`` outputs.

    Existing rows and biases are carried over verbatim; new rows use the
    standard init scheme drawn from ``sub_seed``, new biases are zero.
    """
    if new_width < spec.output_width:
        raise ShapeError("output head can only grow")
    layers = unpack(theta, spec)
    new_spec = spec.with_output_width(new_width)
    if new_width == spec.output_width:
        return np.array(theta, dtype=np.float64, copy=True), new_spec
    W_last, b_last = layers[-1]
    fan_in = W_last.shape[1]
    n_new = new_width - spec.output_width
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(sub_seed))))
    lim = 1.0 / math.sqrt(fan_in)
    W_extra = rng.uniform(-lim, lim, (n_new, fan_in))
    new_layers = layers[:-1] + [
        (np.vstack([W_last, W_extra]), np.concatenate([b_last, np.zeros(n_new)]))
    ]
    return pack(new_layers, new_spec), new_spec


def embed_flat(
    values, old_spec: NetworkSpec, new_spec: NetworkSpec, fill: float = 0.0
) -> np.ndarray:
    """Embed a flat vector from ``old_spec``'s layout into ``new_spec``'s.

    Only the output head may differ; coordinates that exist in both layouts
    keep their values, new-head coordinates get ``fill``. Used to carry the
    previous parameter snapshot and Fisher diagonal across a head expansion.
    """
    if old_spec.layer_widths[:-1] != new_spec.layer_widths[:-1]:
        raise ShapeError("layouts differ beyond the output head")
    if old_spec.output_width > new_spec.output_width:
        raise ShapeError("cannot embed into a narrower head")
    layers = unpack(values, old_spec)
    W_last, b_last = layers[-1]
    n_new = new_spec.output_width - old_spec.output_width
    fan_in = W_last.shape[1]
    W = np.vstack([W_last, np.full((n_new, fan_in), fill)])
    b = np.concatenate([b_last, np.full(n_new, fill)])
    return pack(layers[:-1] + [(W, b)], new_spec)

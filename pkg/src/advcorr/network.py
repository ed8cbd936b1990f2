"""Dense ReLU classifier core: forward evaluation, exact backprop gradients,
and flat parameter-vector plumbing.

All arithmetic is float64. Every operation here is a pure function of its
arguments; networks can be shared read-only.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DenseLayer",
    "Network",
    "ParamVector",
    "LabeledDataset",
    "concat_datasets",
    "param_offsets",
    "to_vector",
    "from_vector",
    "bias_indices",
    "forward",
    "forward_batch",
    "predict",
    "predict_batch",
    "loss",
    "grad_loss_params",
    "grad_output_params",
    "grad_output_input",
    "grad_loss_input",
    "logit_jacobians",
    "blend",
]


class DenseLayer:
    """Affine map z = W x + b with weights of shape (out_dim, in_dim)."""

    def __init__(self, weights, biases):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.biases = np.asarray(biases, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError(
                f"biases shape {self.biases.shape} does not match "
                f"out_dim {self.weights.shape[0]}"
            )
        if not (np.isfinite(self.weights).all() and np.isfinite(self.biases).all()):
            raise ValueError("layer parameters must be finite")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def param_count(self) -> int:
        return self.weights.size + self.biases.size


class Network:
    """Stack of dense layers; ReLU after every layer except the last.

    The final layer output is the pre-softmax logit vector, one entry per
    class. Consecutive layer dimensions must chain.
    """

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for k, (prev, nxt) in enumerate(zip(layers, layers[1:])):
            if nxt.in_dim != prev.out_dim:
                raise ValueError(
                    f"layer {k + 1} expects in_dim {nxt.in_dim}, "
                    f"layer {k} produces {prev.out_dim}"
                )
        self.layers = layers

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def layer_dims(self) -> tuple:
        return (self.input_dim,) + tuple(layer.out_dim for layer in self.layers)

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)


class ParamVector:
    """Flat float64 vector of all parameters, weights then biases per layer.

    `offsets[l] = (weight_start, bias_start)` locates layer l inside the
    vector; the bias block of layer l ends where layer l+1 starts.
    """

    def __init__(self, values, offsets):
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("parameter vector must be 1-D")
        self.offsets = tuple((int(w), int(b)) for w, b in offsets)

    def __len__(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.offsets)

    def same_layout(self, other: "ParamVector") -> bool:
        return len(self) == len(other) and self.offsets == other.offsets


def param_offsets(layer_dims) -> tuple:
    """Per-layer (weight_start, bias_start) offsets for the flat layout."""
    offsets = []
    pos = 0
    for d_in, d_out in zip(layer_dims, layer_dims[1:]):
        offsets.append((pos, pos + d_in * d_out))
        pos += d_in * d_out + d_out
    return tuple(offsets)


def to_vector(net: Network) -> ParamVector:
    """Flatten all parameters (row-major weights, then biases, per layer)."""
    values = np.concatenate(
        [np.concatenate([layer.weights.ravel(), layer.biases]) for layer in net.layers]
    )
    return ParamVector(values, param_offsets(net.layer_dims))


def from_vector(net: Network, pv: ParamVector) -> Network:
    """Rebuild a network with `net`'s architecture and `pv`'s parameters."""
    if len(pv) != net.param_count:
        raise ValueError(
            f"parameter vector length {len(pv)} != network parameter "
            f"count {net.param_count}"
        )
    layers = []
    pos = 0
    for layer in net.layers:
        w = pv.values[pos : pos + layer.weights.size].reshape(layer.weights.shape)
        pos += layer.weights.size
        b = pv.values[pos : pos + layer.out_dim]
        pos += layer.out_dim
        layers.append(DenseLayer(w.copy(), b.copy()))
    return Network(layers)


def bias_indices(net: Network) -> np.ndarray:
    """Indices of all bias entries in the flat parameter layout."""
    idx = []
    offsets = param_offsets(net.layer_dims)
    for layer, (_, b_start) in zip(net.layers, offsets):
        idx.append(np.arange(b_start, b_start + layer.out_dim))
    return np.concatenate(idx)


@dataclass
class LabeledDataset:
    """Inputs in [0,1]^m with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-D array (n_points, input_dim)")
        if self.labels.ndim != 1 or len(self.labels) != len(self.inputs):
            raise ValueError("labels must be 1-D and match inputs length")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        if len(self.inputs) and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("inputs must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx])


def concat_datasets(a: LabeledDataset, b: LabeledDataset) -> LabeledDataset:
    if a.input_dim != b.input_dim:
        raise ValueError("datasets have different input dimensions")
    return LabeledDataset(
        np.concatenate([a.inputs, b.inputs]), np.concatenate([a.labels, b.labels])
    )


# ---------------------------------------------------------------------------
# forward passes


def _forward_cached(net: Network, X: np.ndarray):
    """Forward pass keeping activations and pre-activations for backprop."""
    acts = [X]
    pres = []
    a = X
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        z = a @ layer.weights.T + layer.biases
        pres.append(z)
        a = np.maximum(z, 0.0) if k < last else z
        acts.append(a)
    return acts, pres


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ValueError(f"input shape {x.shape} != ({net.input_dim},)")
    return x


def _check_label(net: Network, i: int) -> int:
    i = int(i)
    if not 0 <= i < net.num_classes:
        raise ValueError(f"label {i} outside [0, {net.num_classes})")
    return i


def forward_batch(net: Network, X: np.ndarray) -> np.ndarray:
    """Logits for a batch of inputs, shape (n_points, num_classes)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ValueError(f"batch shape {X.shape} incompatible with input_dim {net.input_dim}")
    acts, _ = _forward_cached(net, X)
    return acts[-1]


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Pre-softmax logits for one input vector."""
    return forward_batch(net, _check_input(net, x)[None, :])[0]


def predict_batch(net: Network, X: np.ndarray) -> np.ndarray:
    """Predicted labels for a batch; argmax ties go to the lowest index."""
    return np.argmax(forward_batch(net, X), axis=1)


def predict(net: Network, x: np.ndarray) -> int:
    return int(np.argmax(forward(net, x)))


# ---------------------------------------------------------------------------
# loss


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    m = Z.max(axis=1, keepdims=True)
    return Z - m - np.log(np.exp(Z - m).sum(axis=1, keepdims=True))


def _softmax(Z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(Z))


def _check_dataset(net: Network, data: LabeledDataset):
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if data.input_dim != net.input_dim:
        raise ValueError(
            f"dataset input_dim {data.input_dim} != network input_dim {net.input_dim}"
        )
    if data.labels.max() >= net.num_classes:
        raise ValueError("dataset contains labels outside the network's classes")


def loss(net: Network, data: LabeledDataset) -> float:
    """Mean softmax cross-entropy over the dataset."""
    _check_dataset(net, data)
    logp = _log_softmax(forward_batch(net, data.inputs))
    return float(-logp[np.arange(len(data)), data.labels].mean())


# ---------------------------------------------------------------------------
# gradients
#
# Backprop seeds an upstream gradient G = d(scalar)/d(logits) and walks the
# stack once. ReLU subgradient at a kink is 0, i.e. the mask is z > 0.


def _backprop_params(net: Network, acts, pres, G: np.ndarray) -> np.ndarray:
    """Flat gradient of sum_n G[n]·logits[n] with respect to all parameters."""
    offsets = param_offsets(net.layer_dims)
    grads = np.empty(net.param_count)
    for l in range(len(net.layers) - 1, -1, -1):
        w_start, b_start = offsets[l]
        layer = net.layers[l]
        grads[w_start:b_start] = (G.T @ acts[l]).ravel()
        grads[b_start : b_start + layer.out_dim] = G.sum(axis=0)
        if l > 0:
            G = (G @ layer.weights) * (pres[l - 1] > 0)
    return grads


def _backprop_input(net: Network, pres, G: np.ndarray) -> np.ndarray:
    """Gradient of sum_n G[n]·logits[n] with respect to the batch inputs."""
    for l in range(len(net.layers) - 1, 0, -1):
        G = (G @ net.layers[l].weights) * (pres[l - 1] > 0)
    return G @ net.layers[0].weights


def grad_loss_params(net: Network, data: LabeledDataset) -> ParamVector:
    """Exact gradient of `loss` with respect to all parameters, flattened."""
    _check_dataset(net, data)
    acts, pres = _forward_cached(net, data.inputs)
    G = _softmax(acts[-1])
    G[np.arange(len(data)), data.labels] -= 1.0
    G /= len(data)
    return ParamVector(_backprop_params(net, acts, pres, G), param_offsets(net.layer_dims))


def grad_output_params(net: Network, x: np.ndarray, i: int) -> ParamVector:
    """(Sub)gradient of logit i with respect to all parameters."""
    x = _check_input(net, x)
    i = _check_label(net, i)
    acts, pres = _forward_cached(net, x[None, :])
    seed = np.zeros((1, net.num_classes))
    seed[0, i] = 1.0
    return ParamVector(
        _backprop_params(net, acts, pres, seed), param_offsets(net.layer_dims)
    )


def grad_output_input(net: Network, x: np.ndarray, i: int) -> np.ndarray:
    """(Sub)gradient of logit i with respect to the input vector."""
    x = _check_input(net, x)
    i = _check_label(net, i)
    _, pres = _forward_cached(net, x[None, :])
    seed = np.zeros((1, net.num_classes))
    seed[0, i] = 1.0
    return _backprop_input(net, pres, seed)[0]


def grad_loss_input(net: Network, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient of single-example cross-entropy with respect to the input."""
    x = _check_input(net, x)
    y = _check_label(net, y)
    acts, pres = _forward_cached(net, x[None, :])
    G = _softmax(acts[-1])
    G[0, y] -= 1.0
    return _backprop_input(net, pres, G)[0]


def grad_loss_input_batch(net: Network, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-point cross-entropy input gradients for a batch (one row each)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    acts, pres = _forward_cached(net, X)
    G = _softmax(acts[-1])
    G[np.arange(len(X)), y] -= 1.0
    return _backprop_input(net, pres, G)


def logit_jacobians(net: Network, x: np.ndarray):
    """Jacobians of all logits at x: (d f/d params, d f/d input, logits).

    One forward pass plus a single backward sweep with the identity seed,
    so building cuts for every competing label costs one call.
    """
    x = _check_input(net, x)
    acts, pres = _forward_cached(net, x[None, :])
    C = net.num_classes
    offsets = param_offsets(net.layer_dims)
    Jp = np.empty((C, net.param_count))
    G = np.eye(C)
    for l in range(len(net.layers) - 1, -1, -1):
        w_start, b_start = offsets[l]
        layer = net.layers[l]
        a_prev = acts[l][0]
        Jp[:, w_start:b_start] = (G[:, :, None] * a_prev[None, None, :]).reshape(C, -1)
        Jp[:, b_start : b_start + layer.out_dim] = G
        if l > 0:
            G = (G @ layer.weights) * (pres[l - 1][0] > 0)
    Jx = G @ net.layers[0].weights
    return Jp, Jx, acts[-1][0].copy()


def blend(w0: ParamVector, wk: ParamVector, alpha: float) -> ParamVector:
    """Convex combination alpha*wk + (1-alpha)*w0."""
    if not w0.same_layout(wk):
        raise ValueError("parameter vectors have different layouts")
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    return ParamVector(alpha * wk.values + (1.0 - alpha) * w0.values, w0.offsets)

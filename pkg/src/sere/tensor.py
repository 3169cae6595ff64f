"""Dense float64 tensors with taped reverse-mode differentiation.

A :class:`Tape` records every primitive applied while it is active; the
backward pass walks the record once in reverse, accumulating vector-Jacobian
products into ``.grad`` of every tensor that requires gradients. Running ops
with no tape open is the no-grad / evaluation path.

Also hosts the neural building blocks everything else consumes: dense layers,
batch normalization, dropout, MLPs, Glorot init, named parameter storage, and
seeded counter-based RNG streams.
"""

from __future__ import annotations

import threading
import zlib

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when an op receives incompatible operand shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


_STATE = threading.local()


def _tape_stack():
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops; context manager activates recording."""

    def __init__(self):
        self._entries = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self._entries)

    def backward(self, root):
        """Seed d(root)/d(root)=1 and accumulate gradients into all leaves.

        Visits each recorded node exactly once, in reverse record order
        (reverse topological order by construction).
        """
        if root.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        root.grad = np.ones_like(root.data)
        for out, inputs, vjp in reversed(self._entries):
            g = out.grad
            if g is None:
                continue
            partials = vjp(g)
            for tensor, partial in zip(inputs, partials):
                if partial is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += partial


def backward(tape, root):
    tape.backward(root)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(out, inputs, vjp):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._entries.append((out, inputs, vjp))
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcastable(a, b):
    try:
        np.broadcast_shapes(a, b)
        return True
    except ValueError:
        return False


# primitive ops --------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError("add", a.shape, b.shape)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError("sub", a.shape, b.shape)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError("mul", a.shape, b.shape)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError("div", a.shape, b.shape)
    out = Tensor(a.data / b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def pow_scalar(a, p):
    a = as_tensor(a)
    p = float(p)
    out = Tensor(a.data**p)
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), vjp)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _record(out, (a,), vjp)


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def log1p(a):
    a = as_tensor(a)
    out = Tensor(np.log1p(a.data))
    return _record(out, (a,), lambda g: (g / (1.0 + a.data),))


def sqrt(a):
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * 0.5 / out.data,))


def square(a):
    a = as_tensor(a)
    out = Tensor(a.data * a.data)
    return _record(out, (a,), lambda g: (g * 2.0 * a.data,))


def relu(a):
    a = as_tensor(a)
    out = Tensor(kernels.relu(a.data))
    return _record(out, (a,), lambda g: (kernels.relu_grad(a.data, g),))


def elu(a):
    a = as_tensor(a)
    out = Tensor(kernels.elu(a.data))
    return _record(out, (a,), lambda g: (kernels.elu_grad(a.data, g),))


def softplus(a):
    a = as_tensor(a)
    out = Tensor(kernels.softplus(a.data))
    return _record(out, (a,), lambda g: (kernels.softplus_grad(a.data, g),))


def sigmoid(a):
    a = as_tensor(a)
    out = Tensor(kernels.sigmoid(a.data))
    return _record(out, (a,), lambda g: (kernels.sigmoid_grad_from_out(out.data, g),))


def tanh(a):
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def logit(a):
    a = as_tensor(a)
    out = Tensor(kernels.logit(a.data))
    return _record(out, (a,), lambda g: (kernels.logit_grad(a.data, g),))


def scale_from_raw_op(a):
    """Fused softplus(elu(a)) primitive; see distributions.scale_from_raw."""
    a = as_tensor(a)
    out = Tensor(kernels.scale_from_raw(a.data))
    return _record(out, (a,), lambda g: (kernels.scale_from_raw_grad(a.data, g),))


def maximum_scalar(a, c):
    """max(a, c) elementwise; gradient flows only where a >= c."""
    a = as_tensor(a)
    c = float(c)
    out = Tensor(np.maximum(a.data, c))
    return _record(out, (a,), lambda g: (np.where(a.data >= c, g, 0.0),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=ax))

    return _record(out, tuple(tensors), vjp)


def getitem(a, idx):
    a = as_tensor(a)
    out = Tensor(a.data[idx])

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), vjp)


def bernoulli_logprob(logits, x):
    """Per-element log Bernoulli(x | sigmoid(logits)); x is a constant 0/1 array."""
    logits = as_tensor(logits)
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError("bernoulli_logprob: x must be binary")
    if not _broadcastable(logits.shape, x.shape):
        raise ShapeError("bernoulli_logprob", logits.shape, x.shape)
    out = Tensor(kernels.bernoulli_logprob_terms(logits.data, np.broadcast_to(x, logits.shape)))
    return _record(
        out,
        (logits,),
        lambda g: (kernels.bernoulli_logprob_grad(logits.data, np.broadcast_to(x, logits.shape), g),),
    )


ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "elu": elu,
    "softplus": softplus,
    "identity": lambda x: x,
}


# RNG streams ----------------------------------------------------------------

def new_rng(seed, *keys):
    """Counter-based (Philox) generator for the named stream (seed, *keys).

    Streams with distinct key tuples are independent; identical arguments
    reproduce the identical stream, so every stochastic op in the artifact
    draws from an explicitly passed, replayable source.
    """
    spawn_key = tuple(
        zlib.crc32(k.encode() if isinstance(k, str) else str(k).encode()) for k in keys
    )
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


def glorot_normal(rng, fan_in, fan_out, shape=None):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.standard_normal(shape) * std


# parameter storage ----------------------------------------------------------

class ParameterStore:
    """Named map of learnable tensors plus non-learned state buffers.

    Every learnable tensor has exactly one owner path; shared components
    (the bijector heads used by both the generative and inference passes)
    appear once and are referenced from both sides.
    """

    def __init__(self):
        self.params = {}
        self.buffers = {}

    def create(self, name, value):
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def buffer(self, name, value):
        if name in self.buffers:
            raise KeyError(f"buffer {name!r} already exists")
        arr = np.asarray(value, dtype=np.float64).copy()
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self, prefix=None):
        if prefix is None:
            return sorted(self.params)
        return sorted(n for n in self.params if n.startswith(prefix))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_params(self, prefix=None):
        return sum(self.params[n].size for n in self.names(prefix))

    def checksum(self):
        """Order-stable digest of all parameter values (mutation audits)."""
        h = zlib.crc32(b"")
        for name in self.names():
            h = zlib.crc32(name.encode(), h)
            h = zlib.crc32(np.ascontiguousarray(self.params[name].data).tobytes(), h)
        return h


# neural building blocks ------------------------------------------------------

class DenseLayer:
    """y = activation(x @ weight + bias), weight [in, out], bias [out]."""

    def __init__(self, weight, bias, activation="identity"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ShapeError("dense", weight.shape, bias.shape)
        if not (np.all(np.isfinite(weight.data)) and np.all(np.isfinite(bias.data))):
            raise ValueError("dense layer parameters must be finite")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def __call__(self, x):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError("dense_forward", x.shape, self.weight.shape)
        return ACTIVATIONS[self.activation](matmul(x, self.weight) + self.bias)


class MLP:
    """Stack of DenseLayers; `widths` hidden layers then a linear head.

    widths=() degenerates to a single affine map, which is how the linear
    oracle-matched configurations are expressed.
    """

    def __init__(self, layers):
        self.layers = list(layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def build_mlp(store, prefix, rng, in_dim, out_dim, widths=(), activation="relu",
              out_activation="identity"):
    """Create Glorot-normal parameters under `prefix` and return the MLP."""
    dims = [in_dim, *widths, out_dim]
    layers = []
    for i in range(len(dims) - 1):
        w = store.create(f"{prefix}/w{i}", glorot_normal(rng, dims[i], dims[i + 1]))
        b = store.create(f"{prefix}/b{i}", np.zeros(dims[i + 1]))
        act = activation if i < len(dims) - 2 else out_activation
        layers.append(DenseLayer(w, b, act))
    return MLP(layers)


class BatchNormLayer:
    """Batch normalization with running-average statistics.

    Train mode normalizes by (biased) batch statistics and folds them into the
    running averages with `momentum`; eval mode normalizes by the running
    averages and is deterministic across calls. Running stats live in the
    owning ParameterStore's buffers so checkpoints capture them.
    """

    def __init__(self, gamma, beta, running_mean, running_var, momentum=0.99, eps=1e-5):
        if not (0.0 < momentum < 1.0):
            raise ValueError("momentum must be in (0,1)")
        if eps <= 0.0:
            raise ValueError("epsilon must be positive")
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.momentum = momentum
        self.eps = eps
        # stats restored from a checkpoint count as initialized
        self.initialized = bool(np.any(running_mean != 0.0) or np.any(running_var != 1.0))

    def __call__(self, x, mode="train"):
        x = as_tensor(x)
        if mode == "train":
            if x.shape[0] < 2:
                raise ValueError("batchnorm_forward: train mode needs batch size >= 2")
            mu = reduce_mean(x, axis=0, keepdims=True)
            var = reduce_mean(square(sub(x, mu)), axis=0, keepdims=True)
            m = self.momentum if self.initialized else 0.0
            self.initialized = True
            self.running_mean[:] = m * self.running_mean + (1.0 - m) * mu.data[0]
            self.running_var[:] = m * self.running_var + (1.0 - m) * var.data[0]
        elif mode == "eval":
            mu = constant(self.running_mean[None, :])
            var = constant(self.running_var[None, :])
        else:
            raise ValueError(f"unknown mode {mode!r}")
        xhat = div(sub(x, mu), sqrt(add(var, constant(self.eps))))
        return add(mul(xhat, self.gamma), self.beta)


def build_batchnorm(store, prefix, dim, momentum=0.99, eps=1e-5):
    gamma = store.create(f"{prefix}/gamma", np.ones(dim))
    beta = store.create(f"{prefix}/beta", np.zeros(dim))
    rm = store.buffer(f"{prefix}/running_mean", np.zeros(dim))
    rv = store.buffer(f"{prefix}/running_var", np.ones(dim))
    return BatchNormLayer(gamma, beta, rm, rv, momentum=momentum, eps=eps)


def dropout(x, p, mode, rng):
    """Zero entries with probability p in train mode, rescaling survivors."""
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout probability must be in [0,1), got {p}")
    x = as_tensor(x)
    if mode == "eval" or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, constant(mask))

"""
Minimal reverse-mode differentiation engine.

Tensors wrap numpy arrays. While a ComputationTape is active, every op whose
inputs require gradients is appended to the tape; tape order is a topological
order, so backward walks it in reverse once.
"""
import contextlib
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.binfmt import read_file
from src.errors import (
    BadMagic, BatchTooSmall, EmptyInput, GraphCycle, IndexOutOfRange,
    NonFiniteGradient, NonFiniteValue, ShapeMismatch, TruncatedFile,
    VersionMismatch, ZeroVector
)

logger = logging.getLogger(__name__)

_dtype = np.float32
_tapes: List['ComputationTape'] = []


def default_dtype():
    return _dtype


@contextlib.contextmanager
def shadow_mode():
    """Run in float64 (used for finite-difference gradient checks)."""
    global _dtype
    previous = _dtype
    _dtype = np.float64
    try:
        yield
    finally:
        _dtype = previous


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable] = None
        self._tape_index: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape}>"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=like.data.dtype), like.shape).copy(),
                  dtype=like.data.dtype)


def _check_finite(values: np.ndarray, op: str):
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"{op} produced NaN or Inf")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op output and record it on the active tape when needed."""
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if _tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _tapes[-1].record(out)
    return out


class ComputationTape:
    """Records ops in execution order between __enter__ and __exit__."""

    def __init__(self):
        self.nodes: List[Tensor] = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def record(self, node: Tensor):
        node._tape_index = len(self.nodes)
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        return backward(self, loss)


def backward(tape: ComputationTape, loss: Tensor) -> Dict[str, np.ndarray]:
    """
    Reverse traversal from a scalar loss.

    Args:
        tape: Tape the loss was recorded on
        loss: Scalar tensor

    Returns:
        Gradients of named leaf parameters; every leaf that requires a gradient
        also gets its `.grad` set
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"Loss must be scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is not None:
                if parent._tape_index is None or parent._tape_index >= node._tape_index:
                    raise GraphCycle("Parent recorded after its child")
            else:
                leaves[id(parent)] = parent
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    named = {}
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"Gradient of {leaf.name or 'leaf'} is not finite")
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        if leaf.name is not None:
            named[leaf.name] = leaf.grad
    return named


# ---------------------------------------------------------------- elementwise

def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, 'add')
    return _result(a.data + b.data, (a, b), lambda g: (g, g), 'add')


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, 'sub')
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), 'sub')


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, 'mul')
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), 'mul')


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), 'scale')


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), 'square')


def total(a: Tensor) -> Tensor:
    """Sum of all entries (scalar)."""
    return _result(np.asarray(a.data.sum()), (a,),
                   lambda g: (np.full_like(a.data, g),), 'sum')


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                   lambda g: (g * mask,), 'relu')


ACTIVATIONS = {'relu': relu}


# ---------------------------------------------------------------- linear maps

def linear(x: Tensor, W: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = xW + bias for x of shape (n, a) or (a,)."""
    vector = x.data.ndim == 1
    x2 = x.data.reshape(1, -1) if vector else x.data
    if x2.ndim != 2 or W.data.ndim != 2 or x2.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"linear: {x.shape} x {W.shape}")
    if bias is not None and bias.shape != (W.shape[1],):
        raise ShapeMismatch(f"linear bias: {bias.shape} for {W.shape}")
    out = x2 @ W.data
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        g2 = g.reshape(1, -1) if vector else g
        gx = g2 @ W.data.T
        gW = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx.reshape(x.shape), gW, gb)

    parents = (x, W, bias) if bias is not None else (x, W)
    return _result(out.reshape(-1) if vector else out, parents, grad_fn, 'linear')


def dot(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, 'dot')
    if a.data.ndim != 1:
        raise ShapeMismatch(f"dot expects vectors, got {a.shape}")
    return _result(np.asarray(np.dot(a.data, b.data)), (a, b),
                   lambda g: (g * b.data, g * a.data), 'dot')


# ---------------------------------------------------------------- structure

def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if len(index) and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexOutOfRange(f"gather_rows index outside [0, {x.shape[0]})")

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), grad_fn, 'gather_rows')


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _result(x.data[start:stop].copy(), (x,), grad_fn, 'slice_rows')


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeMismatch(f"concat_cols: {[p.shape for p in parts]}")
    bounds = np.cumsum([p.shape[1] for p in parts])[:-1]
    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts),
                   lambda g: tuple(np.split(g, bounds, axis=1)), 'concat_cols')


def stack(parts: Sequence[Tensor]) -> Tensor:
    if len({p.shape for p in parts}) != 1:
        raise ShapeMismatch(f"stack: {[p.shape for p in parts]}")
    return _result(np.stack([p.data for p in parts]), tuple(parts),
                   lambda g: tuple(g[i] for i in range(len(parts))), 'stack')


def pick(v: Tensor, i: int) -> Tensor:
    def grad_fn(g):
        gv = np.zeros_like(v.data)
        gv[i] = g
        return (gv,)

    return _result(np.asarray(v.data[i]), (v,), grad_fn, 'pick')


def mean_aggregate(messages: Tensor, targets: np.ndarray, n: int) -> Tensor:
    """Row i is the mean of message rows whose target is i (zeros if none)."""
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) != messages.shape[0]:
        raise ShapeMismatch(f"mean_aggregate: {len(targets)} targets for {messages.shape[0]} rows")
    if len(targets) and (targets.min() < 0 or targets.max() >= n):
        raise IndexOutOfRange(f"mean_aggregate target outside [0, {n})")
    counts = np.bincount(targets, minlength=n).astype(messages.data.dtype)
    denom = np.maximum(counts, 1)[:, None]
    sums = np.zeros((n,) + messages.shape[1:], dtype=messages.data.dtype)
    np.add.at(sums, targets, messages.data)
    return _result(sums / denom, (messages,),
                   lambda g: ((g / denom)[targets],), 'mean_aggregate')


def max_pool_rows(x: Tensor) -> Tensor:
    """Column-wise maximum; the gradient goes to the first argmax row."""
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput("max_pool_rows needs at least one row")
    arg = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[arg, cols] = g
        return (gx,)

    return _result(x.data[arg, cols], (x,), grad_fn, 'max_pool_rows')


def l2_normalize(y: Tensor) -> Tensor:
    norm = float(np.linalg.norm(y.data))
    if norm == 0.0:
        raise ZeroVector("Cannot normalize a zero vector")
    out = y.data / norm
    return _result(out, (y,), lambda g: ((g - out * np.dot(out, g)) / norm,), 'l2_normalize')


def logsumexp(v: Tensor) -> Tensor:
    """log Σ exp(v) with the maximum subtracted first."""
    m = v.data.max()
    e = np.exp(v.data - m)
    s = e.sum()
    return _result(np.asarray(m + np.log(s)), (v,), lambda g: (g * e / s,), 'logsumexp')


# ---------------------------------------------------------------- layers

class Linear:
    """Dense layer with uniform(±1/√fan_in) weights and zero bias."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 name: str, bias: bool = True):
        bound = 1.0 / np.sqrt(fan_in)
        self.W = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                        requires_grad=True, name=f"{name}.W")
        self.b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.b)

    def parameters(self) -> Iterator[Tensor]:
        yield self.W
        if self.b is not None:
            yield self.b


class MLP2:
    """linear -> activation -> linear."""

    def __init__(self, fan_in: int, hidden: int, fan_out: int, rng: np.random.Generator,
                 name: str, activation: str = 'relu'):
        self.fc1 = Linear(fan_in, hidden, rng, f"{name}.fc1")
        self.fc2 = Linear(hidden, fan_out, rng, f"{name}.fc2")
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return mlp2(x, self)

    def parameters(self) -> Iterator[Tensor]:
        yield from self.fc1.parameters()
        yield from self.fc2.parameters()


def mlp2(x: Tensor, params: MLP2) -> Tensor:
    return params.fc2(ACTIVATIONS[params.activation](params.fc1(x)))


class BatchNorm:
    """Per-feature batch normalization with running statistics."""

    def __init__(self, dim: int, name: str, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(dim, dtype=np.float64)
        self.running_var = np.ones(dim, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps
        self.name = name

    def __call__(self, x: Tensor, mode: str = 'train') -> Tensor:
        return batchnorm(x, self, mode)

    def parameters(self) -> Iterator[Tensor]:
        yield self.gamma
        yield self.beta

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}


def batchnorm(x: Tensor, state: BatchNorm, mode: str = 'train') -> Tensor:
    """
    Normalize columns of x.

    Train mode uses batch statistics and updates the running estimates
    (unbiased variance, momentum 0.1); infer mode uses the running estimates.
    """
    gamma, beta = state.gamma.data, state.beta.data
    n = x.shape[0]
    if mode == 'train':
        if n < 2:
            raise BatchTooSmall(f"batchnorm needs >= 2 rows in train mode, got {n}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        state.running_mean[:] = (1 - m) * state.running_mean + m * mu
        state.running_var[:] = (1 - m) * state.running_var + m * var * n / (n - 1)
    elif mode == 'infer':
        mu = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    else:
        raise ValueError(f"Unknown batchnorm mode {mode!r}")

    invstd = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * invstd
    out = xhat * gamma + beta

    def grad_fn(g):
        ggamma = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        gxhat = g * gamma
        if mode == 'train':
            gx = invstd / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        else:
            gx = gxhat * invstd
        return (gx, ggamma, gbeta)

    return _result(out.astype(x.data.dtype, copy=False), (x, state.gamma, state.beta),
                   grad_fn, 'batchnorm')


# ---------------------------------------------------------------- optimisation

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
              state: AdamState) -> Dict[str, Tensor]:
    """One bias-corrected Adam update, in place; parameters without a gradient are skipped."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"adam_step: grad {g.shape} for {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros(p.shape, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros(p.shape, dtype=np.float64))
        if m.shape != p.shape:
            raise ShapeMismatch(f"adam_step: moment {m.shape} for {name} {p.shape}")
        m[:] = state.beta1 * m + (1 - state.beta1) * g
        v[:] = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    return params


def accumulate_gradients(grad_buffers: Dict[str, np.ndarray],
                         micro_batch_grads: Dict[str, np.ndarray],
                         steps: int) -> Dict[str, np.ndarray]:
    """Add micro_batch_grads / steps into the buffers (in place)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    for name, g in micro_batch_grads.items():
        scaled = np.asarray(g, dtype=np.float64) / steps
        if name in grad_buffers:
            grad_buffers[name] += scaled
        else:
            grad_buffers[name] = scaled.copy()
    return grad_buffers


class GradientAccumulator:
    """Averages gradients over `steps` micro-batches, then hands them to the optimizer."""

    def __init__(self, steps: int):
        if steps < 1:
            raise ValueError("steps must be >= 1")
        self.steps = steps
        self.count = 0
        self.buffers: Dict[str, np.ndarray] = {}

    def add(self, grads: Dict[str, np.ndarray]) -> Optional[Dict[str, np.ndarray]]:
        """Returns the averaged gradients after the final micro-batch, else None."""
        accumulate_gradients(self.buffers, grads, self.steps)
        self.count += 1
        if self.count < self.steps:
            return None
        averaged, self.buffers, self.count = self.buffers, {}, 0
        return averaged


# ---------------------------------------------------------------- checkpoints
#
# magic, u16 version, 32-byte config digest, u32 metadata length + UTF-8 metadata,
# named parameter table, buffer table, u8 has_adam [+ Adam state].
# Table = u32 count, then per entry u16 name length, name, u8 ndim, u32 dims, f32 data.

CHECKPOINT_MAGIC = b'POSHCKP1'
CHECKPOINT_VERSION = 1


def _pack_table(table: Dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack('<I', len(table))]
    for name, values in table.items():
        values = np.asarray(values)
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)) + encoded)
        parts.append(struct.pack('<B', values.ndim))
        parts.append(struct.pack(f'<{values.ndim}I', *values.shape))
        parts.append(values.astype('<f4').tobytes())
    return b''.join(parts)


def _unpack_table(reader) -> Dict[str, np.ndarray]:
    (count,) = reader.unpack('<I')
    table = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I') if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        table[name] = np.frombuffer(reader.take(size * 4), dtype='<f4').reshape(shape).copy()
    return table


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    digest: bytes
    metadata: str = ''
    adam: Optional[AdamState] = None


def save_checkpoint(path: str, checkpoint: Checkpoint):
    meta = checkpoint.metadata.encode('utf-8')
    digest = checkpoint.digest.ljust(32, b'\0')[:32]
    parts = [CHECKPOINT_MAGIC, struct.pack('<H', CHECKPOINT_VERSION), digest,
             struct.pack('<I', len(meta)), meta,
             _pack_table(checkpoint.params), _pack_table(checkpoint.buffers)]
    adam = checkpoint.adam
    if adam is None:
        parts.append(struct.pack('<B', 0))
    else:
        parts.append(struct.pack('<B', 1))
        parts.append(struct.pack('<Q4d', adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps))
        parts.append(_pack_table(adam.m))
        parts.append(_pack_table(adam.v))
    with open(path, 'wb') as f:
        f.write(b''.join(parts))
    logger.info(f"Saved checkpoint with {len(checkpoint.params)} tensors to {path}")


def load_checkpoint(path: str) -> Checkpoint:
    reader = read_file(path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path} is not a checkpoint (expected POSHCKP1)")
    (version,) = reader.unpack('<H')
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"Checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    digest = reader.take(32)
    (meta_len,) = reader.unpack('<I')
    metadata = reader.take(meta_len).decode('utf-8')
    params = _unpack_table(reader)
    buffers = _unpack_table(reader)
    (has_adam,) = reader.unpack('<B')
    adam = None
    if has_adam:
        step, lr, beta1, beta2, eps = reader.unpack('<Q4d')
        m = {k: v.astype(np.float64) for k, v in _unpack_table(reader).items()}
        v = {k: v.astype(np.float64) for k, v in _unpack_table(reader).items()}
        adam = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=step, m=m, v=v)
    if not reader.at_end:
        raise TruncatedFile(f"Trailing bytes in checkpoint {path}")
    return Checkpoint(params=params, buffers=buffers, digest=digest,
                      metadata=metadata, adam=adam)

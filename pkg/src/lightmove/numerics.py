"""Dense tensors with recorded reverse-mode differentiation.

Every operation here computes its value eagerly (through the selected
kernel backend where it matters) and, when a Tape is active and some
input requires gradients, records a closure that maps the output
gradient back onto the inputs. `backward` replays the tape once, in
reverse, and returns a gradient map.

Values are float64 by default; float32 is accepted for speed runs but
the 1e-5 gradient-check tolerances assume float64.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float64


class Tensor:
    """A dense array plus a requires_grad flag.

    Tensors are treated as immutable once created; training code mutates
    parameter `.data` in place only between tapes (the optimizer step).
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=None):
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of operations for one forward pass.

    Used as a context manager; ops executed inside the block append
    (inputs, output, grad_fn) entries in topological order.
    """

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE.pop()
        assert popped is self, "tapes must nest properly"
        return False

    def __len__(self):
        return len(self.entries)


_ACTIVE: list[Tape] = []


def _record(inputs, out, grad_fn, name):
    """Attach a backward rule to the active tape, if recording applies."""
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].entries.append((inputs, out, grad_fn, name))
    return out


def backward(loss, tape):
    """Gradient of a scalar loss w.r.t. every tensor reachable on the tape.

    Returns a dict keyed by Tensor identity. Gradients accumulate across
    repeated uses of the same tensor.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for inputs, out, grad_fn, name in reversed(tape.entries):
        g_out = grads.get(out)
        if g_out is None:
            continue
        for t, g in zip(inputs, grad_fn(g_out)):
            if g is None or not t.requires_grad:
                continue
            acc = grads.get(t)
            if acc is None:
                grads[t] = g.copy() if g.base is not None or g is g_out else g
            else:
                acc += g
    return grads


# ---------------------------------------------------------------------------
# Operations


def _binary_shape_check(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor(kernels.matmul(a.data, b.data))

    def grad_fn(g):
        return kernels.matmul(g, b.data.T), kernels.matmul(a.data.T, g)

    return _record((a, b), out, grad_fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape_check(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record((a, b), out, lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape_check(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record((a, b), out, lambda g: (g, -g), "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape_check(a, b, "hadamard")
    out = Tensor(a.data * b.data)
    return _record((a, b), out, lambda g: (g * b.data, g * a.data), "hadamard")


def scale(x: Tensor, factor: float, shift: float = 0.0) -> Tensor:
    """Elementwise y = factor * x + shift (constants, not tensors)."""
    out = Tensor(factor * x.data + shift)
    return _record((x,), out, lambda g: (factor * g,), "scale")


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(kernels.sigmoid(x.data))
    y = out.data
    return _record((x,), out, lambda g: (kernels.sigmoid_grad(y, g),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = Tensor(kernels.tanh(x.data))
    y = out.data
    return _record((x,), out, lambda g: (kernels.tanh_grad(y, g),), "tanh")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NumericError(f"log of non-positive value (min {x.data.min():.3e})")
    out = Tensor(np.log(x.data))
    return _record((x,), out, lambda g: (g / x.data,), "log")


def row_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"row_softmax expects a matrix, got shape {x.shape}")
    out = Tensor(kernels.softmax_rows(x.data))
    y = out.data
    return _record((x,), out, lambda g: (kernels.softmax_rows_grad(y, g),), "row_softmax")


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    if axis not in (0, 1):
        raise ShapeError("concat axis must be 0 (rows) or 1 (cols)")
    off = a.shape[1 - axis] if a.data.ndim == 2 else None
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1 - axis] != b.shape[1 - axis]:
        raise ShapeError(f"concat: shapes {a.shape} and {b.shape} disagree off axis {axis}")
    out = Tensor(np.concatenate((a.data, b.data), axis=axis))
    split = a.shape[axis]

    def grad_fn(g):
        if axis == 0:
            return g[:split], g[split:]
        return g[:, :split], g[:, split:]

    return _record((a, b), out, grad_fn, "concat")


def stack_rows(parts: list[Tensor]) -> Tensor:
    """Row-concatenate any number of matrices with equal widths."""
    if not parts:
        raise ShapeError("stack_rows needs at least one part")
    width = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeError(f"stack_rows: width mismatch ({p.shape} vs {width} cols)")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def grad_fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(tuple(parts), out, grad_fn, "stack_rows")


def transpose(x: Tensor) -> Tensor:
    out = Tensor(x.data.T.copy())
    return _record((x,), out, lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape).copy())
    old = x.shape
    return _record((x,), out, lambda g: (g.reshape(old),), "reshape")


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m-by-n matrix."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: {x.shape} plus row vector {v.shape}")
    out = Tensor(x.data + v.data)
    return _record((x, v), out, lambda g: (g, g.sum(axis=0)), "add_rowvec")


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Tile a length-k vector into n identical rows."""
    if v.data.ndim != 1:
        raise ShapeError(f"broadcast_rows expects a vector, got {v.shape}")
    out = Tensor(np.tile(v.data, (n, 1)))
    return _record((v,), out, lambda g: (g.sum(axis=0),), "broadcast_rows")


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows by index; the gradient scatter-adds back into the table."""
    idx = np.asarray(indices, dtype=np.intp)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[idx])

    def grad_fn(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _record((table,), out, grad_fn, "gather_rows")


def pick(x: Tensor, rows, cols) -> Tensor:
    """Select individual entries x[rows[i], cols[i]] as a vector."""
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    out = Tensor(x.data[r, c])

    def grad_fn(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, (r, c), g)
        return (acc,)

    return _record((x,), out, grad_fn, "pick")


def sumall(x: Tensor) -> Tensor:
    out = Tensor(np.array(x.data.sum()))
    shape = x.shape
    return _record((x,), out, lambda g: (np.broadcast_to(g, shape).copy() if shape else g,), "sumall")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero entries with probability `rate` and rescale
    survivors by 1/(1-rate) during training; identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * keep)
    return _record((x,), out, lambda g: (g * keep,), "dropout")


def check_finite(x: Tensor, context: str) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite values produced at {context}")
    return x


# ---------------------------------------------------------------------------
# Parameter store


class ParamStore:
    """Named, ordered collection of parameter tensors.

    Each entry may be flagged `penalized` (subject to the L2 term;
    weight matrices yes, embeddings and biases no).
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._penalized: set[str] = set()

    def add(self, name: str, data, penalized: bool = False) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data, requires_grad=True)
        t.requires_grad = True
        self._tensors[name] = t
        if penalized:
            self._penalized.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return self._tensors.values()

    def is_penalized(self, name: str) -> bool:
        return name in self._penalized

    def penalized_names(self):
        return [n for n in self._tensors if n in self._penalized]

    def num_scalars(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._tensors.items():
            out.add(name, t.data.copy(), penalized=name in self._penalized)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, t in self._tensors.items():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ShapeError(f"parameter {name!r}: stored shape {src.shape} != {t.data.shape}")
            t.data[...] = src


# ---------------------------------------------------------------------------
# Gradient checking


def finite_difference_check(
    f,
    params: ParamStore,
    eps: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    names=None,
):
    """Max relative error between tape gradients and central differences.

    `f` must be a deterministic closure over `params` returning a scalar
    Tensor (dropout off, fixed data). Coordinates are sampled per tensor
    when `max_coords_per_tensor` is given.
    """
    with Tape() as tape:
        loss = f()
    grads = backward(loss, tape)
    analytic = {name: grads.get(t) for name, t in params.items()}

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    check_names = list(names) if names is not None else params.names()
    for name in check_names:
        t = params[name]
        flat = t.data.reshape(-1)
        n = flat.shape[0]
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        ga = analytic.get(name)
        ga_flat = ga.reshape(-1) if ga is not None else np.zeros(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(ga_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst

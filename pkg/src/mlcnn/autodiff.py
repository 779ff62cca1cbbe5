"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is define-by-run: every operation immediately computes its numpy
result and records a closure that knows how to push gradients back to its
inputs. Calling :func:`backward` on a scalar output walks the recorded graph
once in reverse topological order and accumulates ``d(out)/d(leaf)`` into the
``grad`` buffer of every tensor that requires gradients. Gradients from
multiple consumers of the same node sum, so the path-sum rule holds by
construction.

Only the operations needed by the forecasting model live here: matrix
products, broadcasting elementwise arithmetic, the three activations
(sigmoid, tanh, leaky ReLU), shape plumbing (reshape / transpose / concat /
slicing) and full reductions. Everything is float64; there is no GPU path,
no operator fusion beyond ``linear``, and no higher-order derivatives.

A "checked" mode (used by the test-suite) rejects non-finite values at every
op boundary so that divergence is caught where it happens rather than three
layers downstream.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ParameterStore",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "set_checked",
    "checked_mode",
    "add",
    "sub",
    "mul",
    "elementwise",
    "matmul",
    "linear",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "row_at",
    "stack_rows",
    "scale",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "activation",
    "absolute",
    "sum_all",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """The autodiff graph was used outside its contract (e.g. non-scalar root)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf crossed an op boundary while checked mode was active."""


# Mutable singleton so `set_checked` is visible to closures created earlier.
_CHECKED = [False]


def set_checked(flag: bool) -> None:
    """Globally enable/disable finite-value checking at op boundaries."""
    _CHECKED[0] = bool(flag)


class checked_mode:
    """Context manager enabling checked mode within a ``with`` block."""

    def __enter__(self):
        self._prev = _CHECKED[0]
        _CHECKED[0] = True
        return self

    def __exit__(self, *exc):
        _CHECKED[0] = self._prev
        return False


def _validate_finite(arr: np.ndarray, op: str) -> None:
    if _CHECKED[0] and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


class Tensor:
    """Dense float64 array plus the graph record that produced it.

    Leaf tensors are either constants (``requires_grad=False``) or parameters.
    Tensors produced by operations carry the operation tag and references to
    their inputs; those references are what :func:`backward` walks.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        _validate_finite(arr, "leaf")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def backward(self) -> None:
        backward(self)

    # Operator sugar; the named functions carry the real contracts.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, op={self._op!r}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, op: str, backward_fn) -> Tensor:
    """Wrap an op result; ops whose inputs carry no gradient record nothing."""
    out = Tensor.__new__(Tensor)
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    _validate_finite(arr, op)
    out.data = arr
    out.grad = None
    out._op = op
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary(a: Tensor, b: Tensor, op: str, fwd, da, db) -> Tensor:
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}"
        ) from exc

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(da(g), a.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += _unbroadcast(db(g), b.shape)

    return _make(data, (a, b), op, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, "add", np.add, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, "sub", np.subtract, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, "mul", np.multiply, lambda g: g * b.data, lambda g: g * a.data)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Dispatch form of the pointwise ops; `op` is one of add/sub/mul."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}")
    return fn(a, b)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar without materializing a constant tensor."""
    c = float(c)

    def backward_fn(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad += c * g

    return _make(x.data * c, (x,), "scale", backward_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )
    data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g @ b.data.T
        if b.requires_grad:
            b._ensure_grad()
            b.grad += a.data.T @ g

    return _make(data, (a, b), "matmul", backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fused ``x @ weight.T (+ bias)`` for weight stored as [out, in].

    One graph node instead of three; the hot path of every LSTM step.
    """
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: incompatible shapes {tuple(x.shape)} and {tuple(weight.shape)}"
        )
    data = x.data @ weight.data.T
    if bias is not None:
        if bias.data.shape != (weight.shape[0],):
            raise ShapeError(
                f"linear: bias shape {tuple(bias.shape)} does not match out dim {weight.shape[0]}"
            )
        data = data + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad += g @ weight.data
        if weight.requires_grad:
            weight._ensure_grad()
            weight.grad += g.T @ x.data
        if bias is not None and bias.requires_grad:
            bias._ensure_grad()
            bias.grad += g.sum(axis=0)

    return _make(data, parents, "linear", backward_fn)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {tuple(x.shape)}")

    def backward_fn(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad += g.T

    return _make(x.data.T, (x,), "transpose", backward_fn)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def backward_fn(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad += g.reshape(x.data.shape)

    return _make(x.data.reshape(shape), (x,), "reshape", backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._ensure_grad()
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                t.grad += g[tuple(idx)]

    return _make(data, tensors, "concat", backward_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward_fn(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad[idx] += g

    return _make(x.data[idx], (x,), "slice", backward_fn)


def row_at(x: Tensor, axis: int, index: int) -> Tensor:
    """Select one index along `axis`, dropping that axis."""
    idx = (slice(None),) * axis + (index,)

    def backward_fn(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad[idx] += g

    return _make(np.take(x.data, index, axis=axis), (x,), "row_at", backward_fn)


def stack_rows(tensors, axis: int = 1) -> Tensor:
    """Stack equal-shaped tensors along a new axis."""
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._ensure_grad()
                t.grad += np.take(g, i, axis=axis)

    return _make(data, tensors, "stack", backward_fn)


# ---------------------------------------------------------------------------
# activations

# Strictly-inside-the-bound clamp: for |x| beyond ~37 the true sigmoid/tanh
# are within one ulp of the bound, and the codomain contract is (0,1)/(−1,1).
_ONE_MINUS = np.nextafter(1.0, 0.0)
_ZERO_PLUS = np.nextafter(0.0, 1.0)


def sigmoid(x: Tensor) -> Tensor:
    s = np.exp(-np.logaddexp(0.0, -x.data))
    s = np.clip(s, _ZERO_PLUS, _ONE_MINUS)

    def backward_fn(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad += g * s * (1.0 - s)

    return _make(s, (x,), "sigmoid", backward_fn)


def tanh(x: Tensor) -> Tensor:
    t = np.clip(np.tanh(x.data), -_ONE_MINUS, _ONE_MINUS)

    def backward_fn(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad += g * (1.0 - t * t)

    return _make(t, (x,), "tanh", backward_fn)


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    pos = x.data >= 0.0
    data = np.where(pos, x.data, alpha * x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad += g * np.where(pos, 1.0, alpha)

    return _make(data, (x,), "leaky_relu", backward_fn)


def activation(kind: str, x: Tensor, alpha: float = 0.01) -> Tensor:
    """Dispatch form: kind is one of sigmoid / tanh / leaky_relu."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    raise ValueError(f"unknown activation {kind!r}")


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad += g * sign

    return _make(np.abs(x.data), (x,), "abs", backward_fn)


def sum_all(x: Tensor) -> Tensor:
    def backward_fn(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad += g  # 0-d grad broadcasts over the whole buffer

    return _make(np.sum(x.data), (x,), "sum", backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable grad-requiring tensor.

    `root` must be scalar. Grads are accumulated (+=), never reset here; the
    caller owns zeroing, which keeps repeated passes and the path-sum rule
    observable.
    """
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {tuple(root.shape)}")

    # Iterative topological sort; graphs are deep (LSTM unrolls), recursion
    # would overflow the interpreter stack.
    order = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in seen and parent.requires_grad:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()

    root._ensure_grad()
    root.grad += np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named map of trainable tensors with deterministic (sorted) iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require gradients")
        self._params[name] = tensor
        return tensor

    def create(self, name: str, data) -> Tensor:
        return self.add(name, Tensor(data, requires_grad=True))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.zero_grad()

    def n_values(self) -> int:
        return sum(t.size for _, t in self.items())

    def clone_data(self) -> dict:
        return {name: t.data.copy() for name, t in self.items()}

    def load_data(self, arrays: dict) -> None:
        missing = [n for n in self.names() if n not in arrays]
        if missing:
            raise KeyError(f"missing parameter value for {missing[0]!r}")
        extra = sorted(set(arrays) - set(self.names()))
        if extra:
            raise KeyError(f"unknown parameter name {extra[0]!r}")
        for name, t in self.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"parameter {name!r}: stored shape {arr.shape} != expected {t.data.shape}"
                )
            t.data = np.ascontiguousarray(arr.copy())


def grad_check(f, params: ParameterStore, eps: float = 1e-5) -> float:
    """Max relative gap between analytic and central-difference gradients.

    `f` must be a deterministic closure returning a scalar Tensor built from
    the tensors in `params` (dropout disabled). Relative error per coordinate
    is |analytic − fd| / max(1, |analytic|); the max over all coordinates of
    all parameters is returned.
    """
    params.zero_grad()
    backward(f())
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    params.zero_grad()
    return worst

"""Differentiation engine for dense tanh networks.

Three capabilities, all in 64-bit floats:

* plain evaluation of a fully connected tanh network (`forward`),
* exact first and second directional derivatives with respect to the
  network *input*, propagated as forward tangents (`pushforward2`),
* gradients of scalar objectives with respect to the network *parameters*
  (`grad_objective`).  Objectives may consume the input-derivative
  quantities: the tangent propagation is recorded on a reverse-mode tape,
  so parameter gradients of derivative-based losses come out exact.

The tape is a minimal reverse-mode graph over numpy arrays.  tanh
derivatives are always computed analytically from the stored activation
value (tanh' = 1 - t**2, tanh'' = -2 t (1 - t**2)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Array dimensions do not match the network or each other."""


class DomainError(ValueError):
    """Non-finite values where finite ones are required."""


class DivergenceError(RuntimeError):
    """An objective or its gradient became non-finite.

    ``term`` names the offending quantity when known.
    """

    def __init__(self, message: str, term: str = "objective"):
        super().__init__(message)
        self.term = term


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _require_finite(a: Array, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise DomainError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class DenseParams:
    """Weights and biases of a dense network, layer by layer.

    Each layer is a pair ``(W, b)`` with ``W`` of shape [out, in] and ``b``
    of shape [out].  Consecutive layer widths must chain and all entries
    must be finite.
    """

    layers: tuple[tuple[Array, Array], ...]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        norm = []
        prev_out = None
        for i, (W, b) in enumerate(self.layers):
            W = _as_f64(W)
            b = _as_f64(b)
            if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: W must be [out, in], b [out]")
            if prev_out is not None and W.shape[1] != prev_out:
                raise ShapeError(
                    f"layer {i}: input width {W.shape[1]} != previous output {prev_out}"
                )
            prev_out = W.shape[0]
            _require_finite(W, f"layer {i} weights")
            _require_finite(b, f"layer {i} biases")
            norm.append((W, b))
        object.__setattr__(self, "layers", tuple(norm))

    @property
    def n_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def n_parameters(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)


@dataclass(frozen=True)
class ParamGradient:
    """Gradient with the same layer-by-layer shape as a DenseParams."""

    layers: tuple[tuple[Array, Array], ...]

    def check_congruent(self, params: DenseParams) -> None:
        if len(self.layers) != len(params.layers):
            raise ShapeError("gradient layer count mismatch")
        for (gW, gb), (W, b) in zip(self.layers, params.layers):
            if gW.shape != W.shape or gb.shape != b.shape:
                raise ShapeError("gradient shape mismatch")


@dataclass(frozen=True)
class TangentBundle:
    """Network output plus first/second directional derivatives.

    ``value`` has shape [n_out] (or [B, n_out] for batched input), ``d1``
    and ``d2`` have one leading axis per direction: [n_dirs, n_out] or
    [n_dirs, B, n_out].  ``d2`` holds pure (same-direction) second
    derivatives.
    """

    value: Array
    d1: Array
    d2: Array


# ---------------------------------------------------------------------------
# plain evaluation and forward tangent propagation (numpy fast paths)


def _check_input(params: DenseParams, x) -> tuple[Array, bool]:
    xv = _as_f64(x)
    single = xv.ndim == 1
    X = xv[None, :] if single else xv
    if X.ndim != 2 or X.shape[1] != params.n_in:
        raise ShapeError(
            f"input width {X.shape[-1] if X.ndim else 0} != network input {params.n_in}"
        )
    _require_finite(X, "network input")
    return X, single


def forward(params: DenseParams, x, activation: str = "tanh") -> Array:
    """Evaluate the network: tanh hidden layers, linear last layer.

    ``x`` may be a single input vector or a batch [B, n_in].
    """
    if activation != "tanh":
        raise ValueError(f"unsupported activation {activation!r}")
    X, single = _check_input(params, x)
    h = X
    for W, b in params.layers[:-1]:
        h = np.tanh(h @ W.T + b)
    W, b = params.layers[-1]
    out = h @ W.T + b
    return out[0] if single else out


def _dir_matmul(T: Array, W: Array) -> Array:
    """Apply ``@ W.T`` across the stacked-direction axis of T [D, B, k]."""
    D, B, k = T.shape
    return (T.reshape(D * B, k) @ W.T).reshape(D, B, W.shape[0])


def pushforward2(
    params: DenseParams,
    x,
    directions=None,
    *,
    d1_in: Array | None = None,
    d2_in: Array | None = None,
) -> TangentBundle:
    """Exact first and second directional derivatives of the network.

    ``directions`` is [n_dirs, n_in]; each row is a direction in input
    space (shared across the batch).  Alternatively pass precomputed input
    tangents ``d1_in`` (and curvatures ``d2_in``) of shape
    [n_dirs, B, n_in] to chain through an upstream map.
    """
    X, single = _check_input(params, x)
    B = X.shape[0]
    if d1_in is not None:
        T = _as_f64(d1_in)
        if T.ndim != 3 or T.shape[1] != B or T.shape[2] != params.n_in:
            raise ShapeError("d1_in must have shape [n_dirs, B, n_in]")
        S = np.zeros_like(T) if d2_in is None else _as_f64(d2_in)
        if S.shape != T.shape:
            raise ShapeError("d2_in shape must match d1_in")
    else:
        if directions is None:
            raise ValueError("need directions or d1_in")
        dirs = np.atleast_2d(_as_f64(directions))
        if dirs.shape[1] != params.n_in:
            raise ShapeError("direction width != network input width")
        _require_finite(dirs, "directions")
        T = np.broadcast_to(dirs[:, None, :], (dirs.shape[0], B, params.n_in)).copy()
        S = np.zeros_like(T)

    h = X
    for W, b in params.layers[:-1]:
        z = h @ W.T + b
        Tz = _dir_matmul(T, W)
        Sz = _dir_matmul(S, W)
        a = np.tanh(z)
        g1 = 1.0 - a * a
        T = g1 * Tz
        S = g1 * Sz + (-2.0 * a * g1) * Tz * Tz
        h = a
    W, b = params.layers[-1]
    value = h @ W.T + b
    T = _dir_matmul(T, W)
    S = _dir_matmul(S, W)
    if single:
        return TangentBundle(value=value[0], d1=T[:, 0, :], d2=S[:, 0, :])
    return TangentBundle(value=value, d1=T, d2=S)


# ---------------------------------------------------------------------------
# reverse-mode tape


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Node of the reverse-mode tape, wrapping a float64 numpy array."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    # keep numpy from broadcasting over Tensor operands; binary ops with
    # arrays then fall back to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(self, value, parents: tuple = (), vjp=None):
        self.value = _as_f64(value)
        self.grad: Array | None = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __float__(self) -> float:
        return float(self.value)

    def detach(self) -> Array:
        """The value as a constant, cut off from the tape."""
        return self.value

    # -- elementwise arithmetic (other side may be a numpy constant) -------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.value + other.value, (self, other))
            out._vjp = lambda g: (
                _unbroadcast(g, self.value.shape),
                _unbroadcast(g, other.value.shape),
            )
        else:
            c = _as_f64(other)
            out = Tensor(self.value + c, (self,))
            out._vjp = lambda g: (_unbroadcast(g, self.value.shape),)
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, (self,))
        out._vjp = lambda g: (-g,)
        return out

    def __sub__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.value - other.value, (self, other))
            out._vjp = lambda g: (
                _unbroadcast(g, self.value.shape),
                _unbroadcast(-g, other.value.shape),
            )
        else:
            c = _as_f64(other)
            out = Tensor(self.value - c, (self,))
            out._vjp = lambda g: (_unbroadcast(g, self.value.shape),)
        return out

    def __rsub__(self, other):
        c = _as_f64(other)
        out = Tensor(c - self.value, (self,))
        out._vjp = lambda g: (_unbroadcast(-g, self.value.shape),)
        return out

    def __mul__(self, other):
        if isinstance(other, Tensor):
            a, b = self.value, other.value
            out = Tensor(a * b, (self, other))
            out._vjp = lambda g: (
                _unbroadcast(g * b, a.shape),
                _unbroadcast(g * a, b.shape),
            )
        else:
            c = _as_f64(other)
            out = Tensor(self.value * c, (self,))
            out._vjp = lambda g: (_unbroadcast(g * c, self.value.shape),)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            a, b = self.value, other.value
            out = Tensor(a / b, (self, other))
            out._vjp = lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            )
        else:
            c = _as_f64(other)
            out = Tensor(self.value / c, (self,))
            out._vjp = lambda g: (_unbroadcast(g / c, self.value.shape),)
        return out

    def __rtruediv__(self, other):
        c = _as_f64(other)
        a = self.value
        out = Tensor(c / a, (self,))
        out._vjp = lambda g: (_unbroadcast(-g * c / (a * a), a.shape),)
        return out

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self.value
        out = Tensor(a**p, (self,))
        out._vjp = lambda g: (g * p * a ** (p - 1),)
        return out

    def __getitem__(self, key):
        out = Tensor(self.value[key], (self,))

        def vjp(g):
            full = np.zeros_like(self.value)
            full[key] += g
            return (full,)

        out._vjp = vjp
        return out

    # -- nonlinearities -----------------------------------------------------

    def tanh(self):
        t = np.tanh(self.value)
        out = Tensor(t, (self,))
        out._vjp = lambda g: (g * (1.0 - t * t),)
        return out

    def sin(self):
        out = Tensor(np.sin(self.value), (self,))
        out._vjp = lambda g: (g * np.cos(self.value),)
        return out

    def cos(self):
        out = Tensor(np.cos(self.value), (self,))
        out._vjp = lambda g: (-g * np.sin(self.value),)
        return out

    def maximum(self, c: float):
        """Elementwise max with a constant; zero gradient where clamped."""
        mask = self.value > c
        out = Tensor(np.maximum(self.value, c), (self,))
        out._vjp = lambda g: (g * mask,)
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        orig = self.value.shape
        out = Tensor(self.value.reshape(shape), (self,))
        out._vjp = lambda g: (g.reshape(orig),)
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.value.sum(axis=axis, keepdims=keepdims), (self,))
        shape = self.value.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).copy(),)

        out._vjp = vjp
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` with taped parameter gradients."""
    xv = x.value if isinstance(x, Tensor) else _as_f64(x)
    val = xv @ W.value.T
    if b is not None:
        np.add(val, b.value, out=val)  # val is freshly allocated
    parents = tuple(p for p in (x, W, b) if isinstance(p, Tensor))

    def vjp(g):
        grads = []
        if isinstance(x, Tensor):
            grads.append(g @ W.value)
        grads.append(g.T @ xv)
        if isinstance(b, Tensor):
            grads.append(g.sum(axis=0) if g.ndim > 1 else g)
        return tuple(grads)

    return Tensor(val, parents, vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    vals = [t.value for t in tensors]
    out = Tensor(np.concatenate(vals, axis=axis), tuple(tensors))
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    out._vjp = vjp
    return out


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar tape node into ``.grad`` fields."""
    if loss.value.size != 1:
        raise ShapeError("backward needs a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    # grads may alias each other across nodes (vjps can pass views through),
    # so accumulation is strictly out of place
    for node in reversed(order):
        if node.grad is None or node._vjp is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# taped network evaluation


@dataclass(frozen=True)
class TapedBundle:
    """Taped analogue of TangentBundle: per-direction tensors."""

    value: Tensor
    d1: tuple[Tensor, ...]
    d2: tuple[Tensor, ...]


class TapeContext:
    """Parameter leaves plus taped forward / tangent evaluation.

    Objectives passed to `grad_objective` receive one of these and build a
    scalar loss from `forward` / `pushforward2` results combined with
    ordinary Tensor arithmetic.
    """

    def __init__(self, params: DenseParams):
        self.params = params
        self.leaves = tuple(
            (Tensor(W), Tensor(b)) for W, b in params.layers
        )

    def forward(self, x) -> Tensor:
        X, _ = _check_input(self.params, np.atleast_2d(_as_f64(x)))
        h: Tensor | Array = X
        for Wt, bt in self.leaves[:-1]:
            h = linear(h, Wt, bt).tanh()
        Wt, bt = self.leaves[-1]
        return linear(h, Wt, bt)

    def pushforward2(
        self,
        x,
        directions=None,
        *,
        d1_in=None,
        d2_in=None,
        order: int = 2,
    ) -> TapedBundle:
        """Taped tangent propagation; ``order=1`` skips second derivatives.

        All directions ride through each layer in one stacked [D*B, k]
        matrix product; the tanh chain factors broadcast over the
        direction axis.
        """
        X, _ = _check_input(self.params, np.atleast_2d(_as_f64(x)))
        B = X.shape[0]
        n_in = self.params.n_in
        if d1_in is not None:
            T0 = _as_f64(d1_in)
            D = T0.shape[0]
            S0 = None if d2_in is None else _as_f64(d2_in)
        else:
            dirs = np.atleast_2d(_as_f64(directions))
            D = dirs.shape[0]
            T0 = np.broadcast_to(dirs[:, None, :], (D, B, n_in))
            S0 = None
        if order >= 2 and S0 is None:
            S0 = np.zeros((D, B, n_in))

        flat = (D * B, -1)
        stack = (D, B, -1)
        h: Tensor | Array = X
        T: Tensor | Array = np.ascontiguousarray(T0).reshape(D * B, n_in)
        S: Tensor | Array = (
            np.ascontiguousarray(S0).reshape(D * B, n_in) if order >= 2 else None
        )
        for Wt, bt in self.leaves[:-1]:
            a = linear(h, Wt, bt).tanh()
            g1 = 1.0 - a * a
            u = linear(T, Wt).reshape(stack)            # [D, B, n]
            T = (g1 * u).reshape(flat)
            if order >= 2:
                sz = linear(S, Wt).reshape(stack)
                g2 = (a * g1) * (-2.0)
                S = (g1 * sz + g2 * (u * u)).reshape(flat)
            h = a
        Wt, bt = self.leaves[-1]
        value = linear(h, Wt, bt)
        T = linear(T, Wt).reshape(stack)
        d1 = tuple(T[d] for d in range(D))
        if order >= 2:
            S = linear(S, Wt).reshape(stack)
            d2 = tuple(S[d] for d in range(D))
        else:
            d2 = tuple(Tensor(np.zeros_like(t.value)) for t in d1)
        return TapedBundle(value=value, d1=d1, d2=d2)


def grad_objective(
    params: DenseParams, build: Callable[[TapeContext], Tensor]
) -> tuple[float, ParamGradient]:
    """Loss and exact parameter gradient of a taped objective.

    ``build`` receives a TapeContext and must return a scalar Tensor; the
    objective may route through `TapeContext.pushforward2`, in which case
    the gradient includes the paths through first and second input
    derivatives.
    """
    ctx = TapeContext(params)
    loss = build(ctx)
    if not isinstance(loss, Tensor):
        raise TypeError("objective must return a tape Tensor")
    value = float(loss.value)
    if not np.isfinite(value):
        raise DivergenceError("objective evaluated non-finite", term="objective")
    backward(loss)
    grads = []
    for i, (Wt, bt) in enumerate(ctx.leaves):
        gW = Wt.grad if Wt.grad is not None else np.zeros_like(Wt.value)
        gb = bt.grad if bt.grad is not None else np.zeros_like(bt.value)
        if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
            raise DivergenceError(
                f"non-finite gradient in layer {i}", term=f"layer {i} gradient"
            )
        grads.append((gW, gb))
    return value, ParamGradient(tuple(grads))

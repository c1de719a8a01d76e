"""Dense layers, Adam and a finite-difference gradient checker, in plain numpy.

Parameters live in flat ``dict[str, np.ndarray]`` mappings so that one
optimizer can own every tensor of a model. Gradients use the same keys; a
gradient may also be a :class:`SparseRows` for row-sparse embedding tables.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh")


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


@dataclass
class DenseLayer:
    """``activation(x @ weights.T + bias)`` with weights stored (out_dim, in_dim)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.weights.shape} / {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def glorot(cls, in_dim: int, out_dim: int, activation: str = "identity",
               rng: np.random.Generator | None = None, dtype=np.float32) -> "DenseLayer":
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)
        return cls(w, np.zeros(out_dim, dtype=dtype), activation)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, activation: str = "identity", dtype=np.float32) -> "DenseLayer":
        return cls(np.zeros((out_dim, in_dim), dtype=dtype), np.zeros(out_dim, dtype=dtype), activation)

    def astype(self, dtype) -> "DenseLayer":
        return DenseLayer(self.weights.astype(dtype), self.bias.astype(dtype), self.activation)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def _check_input(layer: DenseLayer, x: np.ndarray) -> None:
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} does not match layer in_dim {layer.in_dim}")


def _affine(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    # einsum keeps the per-row summation order independent of batch size, so
    # 64-bit batched output is bitwise equal to row-by-row output; BLAS is not.
    if x.dtype == np.float64 or layer.weights.dtype == np.float64:
        return np.einsum("...j,ij->...i", x, layer.weights) + layer.bias
    return x @ layer.weights.T + layer.bias


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """Apply the layer to a vector or row-wise to a batch."""
    x = np.asarray(x)
    _check_input(layer, x)
    return _activate(_affine(layer, x), layer.activation)


def dense_backward(layer: DenseLayer, x: np.ndarray, upstream: np.ndarray):
    """Reverse-mode gradients of :func:`dense_forward`.

    Returns ``(grad_weights, grad_bias, grad_input)``; for a batch the weight
    and bias gradients are summed over rows.
    """
    x = np.asarray(x)
    _check_input(layer, x)
    z = _affine(layer, x)
    upstream = np.asarray(upstream)
    if upstream.shape != z.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match output shape {z.shape}")
    if layer.activation == "relu":
        gz = upstream * (z > 0)
    elif layer.activation == "tanh":
        gz = upstream * (1.0 - np.tanh(z) ** 2)
    else:
        gz = upstream
    x2 = np.atleast_2d(x)
    gz2 = np.atleast_2d(gz)
    grad_w = gz2.T @ x2
    grad_b = gz2.sum(axis=0)
    grad_x = gz @ layer.weights
    return grad_w, grad_b, grad_x


@dataclass
class SparseRows:
    """Gradient touching only ``rows`` of a 2-D parameter."""

    rows: np.ndarray
    values: np.ndarray

    def to_dense(self, shape, dtype=np.float64) -> np.ndarray:
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, self.rows, self.values)
        return out

    def __mul__(self, scale: float) -> "SparseRows":
        return SparseRows(self.rows, self.values * scale)

    __rmul__ = __mul__


def add_grads(a: dict, b: Mapping) -> dict:
    """Sum two gradient dicts; sparse entries are concatenated."""
    out = dict(a)
    for k, g in b.items():
        if k not in out:
            out[k] = g
        elif isinstance(g, SparseRows) or isinstance(out[k], SparseRows):
            if not (isinstance(g, SparseRows) and isinstance(out[k], SparseRows)):
                raise TypeError(f"cannot add sparse and dense gradients for {k}")
            out[k] = SparseRows(np.concatenate([out[k].rows, g.rows]),
                                np.concatenate([out[k].values, g.values]))
        else:
            out[k] = out[k] + g
    return out


def _coalesce(g: SparseRows) -> SparseRows:
    rows, inverse = np.unique(g.rows, return_inverse=True)
    if len(rows) == len(g.rows):
        order = np.argsort(g.rows, kind="stable")
        return SparseRows(g.rows[order], g.values[order])
    vals = np.zeros((len(rows),) + g.values.shape[1:], dtype=g.values.dtype)
    np.add.at(vals, inverse, g.values)
    return SparseRows(rows, vals)


@dataclass
class AdamState:
    """Adam moments per parameter name, with a step counter per parameter.

    Row-sparse gradients update only the touched rows (lazy Adam): untouched
    rows keep their moments and values until they next receive a gradient.
    """

    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return max(self.steps.values(), default=0)


def adam_step(state: AdamState, params: dict, grads: Mapping) -> dict:
    """Apply one Adam update in place to every parameter named in ``grads``.

    Raises :class:`NonFiniteError` before touching anything if a gradient is
    not finite.
    """
    for name, g in grads.items():
        vals = g.values if isinstance(g, SparseRows) else g
        if not np.all(np.isfinite(vals)):
            raise NonFiniteError(f"non-finite gradient for {name!r} at optimizer step {state.step + 1}")
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.steps[name] = 0
        state.steps[name] += 1
        t = state.steps[name]
        bc1 = 1.0 - state.beta1 ** t
        bc2 = 1.0 - state.beta2 ** t
        m, v = state.m[name], state.v[name]
        if isinstance(g, SparseRows):
            g = _coalesce(g)
            r = g.rows
            gv = g.values.astype(p.dtype, copy=False)
            m[r] = state.beta1 * m[r] + (1.0 - state.beta1) * gv
            v[r] = state.beta2 * v[r] + (1.0 - state.beta2) * gv * gv
            p[r] -= (state.lr * (m[r] / bc1) / (np.sqrt(v[r] / bc2) + state.eps)).astype(p.dtype)
        else:
            g = np.asarray(g, dtype=p.dtype)
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return params


LossFn = Callable[[dict], tuple]


def _stencil(f, flat, i, h) -> float:
    orig = flat[i]
    vals = []
    try:
        for k in (2, 1, -1, -2):
            flat[i] = orig + k * h
            v = f()
            if not np.isfinite(v):
                raise NonFiniteError(f"non-finite loss at offset {k * h:g}")
            vals.append(float(v))
    finally:
        flat[i] = orig
    return (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12 * h)


def finite_difference_check(loss_function: LossFn, params: dict, epsilon: float = 1e-4,
                            max_entries: int | None = None, seed: int = 0, refine: int = 2, floor: float = 1e-6) -> float:
    """Largest relative error between analytic and numerical gradients.

    ``loss_function(params)`` must return ``(loss, grads)`` and be deterministic;
    parameters should be float64. Numerical derivatives use the fourth-order
    central stencil ``(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h``. The
    error per entry is ``|ga - gn| / max(|ga|, |gn|, floor)``; the floor keeps
    rounding noise on near-zero entries from reading as a large relative error. With
    ``max_entries`` only a seeded random subset of entries per tensor is probed.

    A stencil that straddles a relu hinge is not measuring a derivative. Each
    estimate is therefore compared with one at ``h / 10``; while the two
    disagree the step keeps shrinking, at most ``refine`` times. This never
    looks at the analytic gradient.
    """
    _, grads = loss_function(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    f = lambda: loss_function(params)[0]
    # rounding noise of a stencil at step h is about 2 ulp(f) * 1.5 / h
    noise = 100 * 3 * np.finfo(np.float64).eps * max(abs(float(f())), 1.0)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif isinstance(g, SparseRows):
            g = g.to_dense(p.shape)
        g = np.asarray(g, dtype=np.float64)
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        gflat = g.reshape(-1)
        for i in idx:
            try:
                h = epsilon
                num = _stencil(f, flat, i, h)
                for _ in range(refine):
                    finer = _stencil(f, flat, i, h / 10)
                    if abs(finer - num) <= 1e-6 * max(abs(num), abs(finer)) + noise / (h / 10):
                        break
                    h, num = h / 10, finer
            except NonFiniteError as exc:
                raise NonFiniteError(f"{exc} perturbing {name}[{i}]") from None
            ana = gflat[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst

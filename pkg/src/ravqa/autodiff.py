"""Flat-storage float64 tensors with reverse-mode autodiff on an explicit tape.

A Tensor is a row-major 1-D buffer plus an explicit shape. Operations validate
shapes, compute forward with numpy, and register a backward rule on the active
tape (if any). Operation outputs are treated as immutable; a tape is a
single-writer structure and must not be shared across concurrent training
steps. Calling ``Tape.backward`` replays the recorded rules in reverse order,
accumulating one gradient contribution per use of each input, and replaces the
``grad`` buffer of every tensor it reaches.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, GradCheckError, ShapeError

Array = np.ndarray
_F8 = np.float64


def _size(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape, dtype=np.int64)) if shape else 1


class Tensor:
    """Dense float64 tensor: flat row-major data plus an explicit shape."""

    __slots__ = ("shape", "data", "grad")

    def __init__(self, shape: Sequence[int], data: Array, grad: Array | None = None):
        shape = tuple(int(s) for s in shape)
        data = np.asarray(data, dtype=_F8).ravel()
        if data.size != _size(shape):
            raise ShapeError(f"data has {data.size} entries, shape {shape} needs {_size(shape)}")
        self.shape = shape
        self.data = data
        self.grad = grad

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        arr = np.asarray(arr, dtype=_F8)
        return cls(arr.shape, arr.ravel())

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        shape = tuple(int(s) for s in shape)
        return cls(shape, np.zeros(_size(shape)))

    def nd(self) -> Array:
        """Data viewed at the tensor's shape (no copy)."""
        return self.data.reshape(self.shape)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-entry tensor, got shape {self.shape}")
        return float(self.data[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


_ACTIVE: "Tape | None" = None


class _Entry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records operations so gradients can be replayed in reverse order."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise ContractViolation("a tape is already active; tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None

    def reset(self) -> None:
        self.entries.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate .grad from a scalar loss produced on this tape."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(e.out is loss for e in self.entries):
            raise ContractViolation("loss tensor was not produced on this tape")
        grads: dict[int, Array] = {id(loss): np.ones(1)}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue  # not on any path to the loss
            entry.out.grad = g
            for tensor, piece in zip(entry.inputs, entry.backward(g)):
                if piece is None:
                    continue
                have = grads.get(id(tensor))
                grads[id(tensor)] = piece if have is None else have + piece
        leaves = {id(t): t for e in self.entries for t in e.inputs}
        for key, g in grads.items():
            if key in leaves:
                leaves[key].grad = g


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if _ACTIVE is not None:
        _ACTIVE.entries.append(_Entry(out, inputs, backward))
    return out


def _as2d(t: Tensor, role: str) -> Array:
    if len(t.shape) != 2:
        raise ShapeError(f"{role} must be 2-D, got shape {t.shape}")
    return t.data.reshape(t.shape)


# ---------------------------------------------------------------------------
# elementwise and structural operations


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.shape, a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def add_n(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractViolation("add_n needs at least one tensor")
    shape = parts[0].shape
    for p in parts[1:]:
        if p.shape != shape:
            raise ShapeError(f"add_n: shapes disagree: {shape} vs {p.shape}")
    total = parts[0].data.copy()
    for p in parts[1:]:
        total += p.data
    out = Tensor(shape, total)
    return _record(out, tuple(parts), lambda g: tuple(g for _ in parts))


def add_rows(x: Tensor, bias: Tensor) -> Tensor:
    """x [n,d] plus bias [d] broadcast over rows."""
    X = _as2d(x, "add_rows x")
    if bias.shape != (x.shape[1],):
        raise ShapeError(f"add_rows: bias shape {bias.shape} does not match columns of {x.shape}")
    out = Tensor(x.shape, (X + bias.data).ravel())
    n, d = x.shape
    return _record(out, (x, bias), lambda g: (g, g.reshape(n, d).sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.shape, a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(x.shape, x.data * s)
    return _record(out, (x,), lambda g: (g * s,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if _size(shape) != x.data.size:
        raise ShapeError(f"reshape: {x.shape} has {x.data.size} entries, target {shape} needs {_size(shape)}")
    out = Tensor(shape, x.data)
    return _record(out, (x,), lambda g: (g,))


def transpose(x: Tensor) -> Tensor:
    X = _as2d(x, "transpose")
    out = Tensor((x.shape[1], x.shape[0]), np.ascontiguousarray(X.T).ravel())
    return _record(out, (x,), lambda g: (np.ascontiguousarray(g.reshape(out.shape).T).ravel(),))


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor((), np.array([x.data.sum()]))
    return _record(out, (x,), lambda g: (np.full(x.data.size, g[0]),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a [p,q] @ b [q,r] -> [p,r]."""
    A = _as2d(a, "matmul left")
    B = _as2d(b, "matmul right")
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor((A.shape[0], B.shape[1]), (A @ B).ravel())

    def bwd(g: Array):
        G = g.reshape(out.shape)
        return (G @ B.T).ravel(), (A.T @ G).ravel()

    return _record(out, (a, b), bwd)


def embed_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of table [v,d] at ids -> [len(ids),d]."""
    T = _as2d(table, "embed_rows table")
    ids = np.asarray(list(ids), dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError("embed_rows needs a non-empty 1-D id sequence")
    if ids.min() < 0 or ids.max() >= T.shape[0]:
        raise ContractViolation(
            f"embed_rows: id out of range 0..{T.shape[0] - 1}: {int(ids.min())}..{int(ids.max())}"
        )
    out = Tensor((ids.size, T.shape[1]), T[ids].ravel())

    def bwd(g: Array):
        dT = np.zeros_like(T)
        np.add.at(dT, ids, g.reshape(out.shape))
        return (dT.ravel(),)

    return _record(out, (table,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, branch on sign so neither branch overflows."""
    y = _sigmoid(x.data)
    out = Tensor(x.shape, y)
    return _record(out, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the smooth gate used inside feed-forward blocks."""
    s = _sigmoid(x.data)
    out = Tensor(x.shape, x.data * s)
    return _record(out, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def softmax_rows(x: Tensor, keep: Array | None = None) -> Tensor:
    """Row-wise softmax [n,m] with per-row max subtraction.

    keep, when given, is a boolean [n,m] mask; dropped entries get exactly
    zero probability and each row must keep at least one entry.
    """
    X = _as2d(x, "softmax_rows")
    if keep is not None:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != X.shape:
            raise ShapeError(f"softmax_rows: mask shape {keep.shape} vs data shape {X.shape}")
        if not keep.any(axis=1).all():
            raise ContractViolation("softmax_rows: a row has every entry masked")
        X = np.where(keep, X, -np.inf)
    m = X.max(axis=1, keepdims=True)
    e = np.exp(X - m)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(x.shape, p.ravel())

    def bwd(g: Array):
        G = g.reshape(p.shape)
        inner = (G * p).sum(axis=1, keepdims=True)
        return ((p * (G - inner)).ravel(),)

    return _record(out, (x,), bwd)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of x [n,d] with learned gain and bias [d]."""
    X = _as2d(x, "layer_norm_rows")
    d = X.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm_rows: gain/bias must be ({d},), got {gain.shape} and {bias.shape}")
    mu = X.mean(axis=1, keepdims=True)
    centered = X - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv
    out = Tensor(x.shape, (xhat * gain.data + bias.data).ravel())

    def bwd(g: Array):
        G = g.reshape(X.shape)
        gg = G * gain.data
        dx = inv * (gg - gg.mean(axis=1, keepdims=True) - xhat * (gg * xhat).mean(axis=1, keepdims=True))
        return dx.ravel(), (G * xhat).sum(axis=0), G.sum(axis=0)

    return _record(out, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# fused composite operations


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, causal: bool = False) -> Tensor:
    """Scaled dot-product attention over column-split heads.

    q [t,d], k [s,d], v [s,d] -> [t,d]; causal requires t == s and keeps
    key positions <= query position. Row maxima for the softmax are taken
    over unmasked entries only, so earlier positions are untouched by edits
    to later ones.
    """
    Q, K, V = _as2d(q, "attention q"), _as2d(k, "attention k"), _as2d(v, "attention v")
    t, d = Q.shape
    s = K.shape[0]
    if K.shape[1] != d or V.shape != K.shape:
        raise ShapeError(f"attention: k {k.shape} and v {v.shape} must both be ({s},{d})")
    if heads < 1 or d % heads:
        raise ShapeError(f"attention: {heads} heads do not divide width {d}")
    if causal and t != s:
        raise ShapeError(f"attention: causal mask needs square scores, got {t}x{s}")
    dh = d // heads
    qh = Q.reshape(t, heads, dh).transpose(1, 0, 2)  # [h,t,dh]
    kh = K.reshape(s, heads, dh).transpose(1, 0, 2)
    vh = V.reshape(s, heads, dh).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) / math.sqrt(dh)  # [h,t,s]
    if causal:
        scores = np.where(np.tril(np.ones((t, s), dtype=bool)), scores, -np.inf)
    m = scores.max(axis=2, keepdims=True)
    e = np.exp(scores - m)
    p = e / e.sum(axis=2, keepdims=True)
    ctx = (p @ vh).transpose(1, 0, 2).reshape(t, d)
    out = Tensor((t, d), ctx.ravel())

    def bwd(g: Array):
        Gh = g.reshape(t, heads, dh).transpose(1, 0, 2)
        dp = Gh @ vh.transpose(0, 2, 1)
        dvh = p.transpose(0, 2, 1) @ Gh
        ds = p * (dp - (dp * p).sum(axis=2, keepdims=True))
        ds /= math.sqrt(dh)
        dqh = ds @ kh
        dkh = ds.transpose(0, 2, 1) @ qh
        dq = dqh.transpose(1, 0, 2).reshape(t, d)
        dk = dkh.transpose(1, 0, 2).reshape(s, d)
        dv = dvh.transpose(1, 0, 2).reshape(s, d)
        return dq.ravel(), dk.ravel(), dv.ravel()

    return _record(out, (q, k, v), bwd)


def gated_mix(base: Tensor, other: Tensor, gate: Tensor) -> Tensor:
    """base + gate * (other - base); equal inputs pass through bitwise."""
    if not (base.shape == other.shape == gate.shape):
        raise ShapeError(f"gated_mix: shapes disagree: {base.shape}, {other.shape}, {gate.shape}")
    delta = other.data - base.data
    out = Tensor(base.shape, base.data + gate.data * delta)
    return _record(
        out,
        (base, other, gate),
        lambda g: (g * (1.0 - gate.data), g * gate.data, g * delta),
    )


def cross_entropy_sum(logits: Tensor, targets: Sequence[int], keep: Sequence[bool] | None = None) -> Tensor:
    """Summed negative log-likelihood of targets under row-wise log-softmax.

    logits [n,v]; rows where keep is false contribute nothing.
    """
    X = _as2d(logits, "cross_entropy logits")
    n, v = X.shape
    ids = np.asarray(list(targets), dtype=np.int64)
    if ids.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but {ids.size} targets")
    if ids.min() < 0 or ids.max() >= v:
        raise ContractViolation(f"cross_entropy: target id outside 0..{v - 1}")
    mask = np.ones(n, dtype=bool) if keep is None else np.asarray(list(keep), dtype=bool)
    if mask.shape != (n,):
        raise ShapeError(f"cross_entropy: keep mask must have {n} entries")
    if not mask.any():
        raise ContractViolation("cross_entropy: every row is masked out")
    m = X.max(axis=1, keepdims=True)
    e = np.exp(X - m)
    z = e.sum(axis=1, keepdims=True)
    logp = X - m - np.log(z)
    rows = np.arange(n)
    losses = -logp[rows, ids]
    out = Tensor((), np.array([losses[mask].sum()]))

    def bwd(g: Array):
        soft = e / z
        soft[rows, ids] -= 1.0
        soft[~mask] = 0.0
        return ((g[0] * soft).ravel(),)

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# finite-difference oracle


class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    def __init__(self, per_tensor: dict[str, float], tol: float):
        self.per_tensor = per_tensor
        self.max_rel_err = max(per_tensor.values()) if per_tensor else 0.0
        self.tol = tol
        self.passed = self.max_rel_err <= tol

    def __repr__(self) -> str:
        verdict = "ok" if self.passed else "FAIL"
        return f"GradCheckReport({verdict}, max_rel_err={self.max_rel_err:.3e}, tol={self.tol:.1e})"


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    eps: float = 1e-6,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of a scalar-valued f against central differences.

    f must rebuild its computation from the current parameter values on each
    call and take no arguments. Relative error uses denominator
    max(1, |analytic|, |numeric|) per entry; the report aggregates the worst
    entry per parameter tensor. Raises GradCheckError when f is detected to be
    non-deterministic or either path produces a non-finite value.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]

    def eval_plain() -> float:
        return f().item()

    first, second = eval_plain(), eval_plain()
    if first != second:
        raise GradCheckError(
            f"f is not deterministic: successive evaluations gave {first!r} and {second!r}"
        )
    if not math.isfinite(first):
        raise GradCheckError(f"f evaluated to a non-finite value: {first!r}")

    for _, p in named:
        p.grad = None
    tape = Tape()
    with tape:
        loss = f()
    tape.backward(loss)

    per_tensor: dict[str, float] = {}
    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros(p.data.size)
        if not np.isfinite(analytic).all():
            raise GradCheckError(f"non-finite analytic gradient in {name}")
        worst = 0.0
        for i in range(p.data.size):
            orig = p.data[i]
            p.data[i] = orig + eps
            hi = eval_plain()
            p.data[i] = orig - eps
            lo = eval_plain()
            p.data[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            if not math.isfinite(numeric):
                raise GradCheckError(f"non-finite central difference in {name}[{i}]")
            worst = max(worst, _rel_err(float(analytic[i]), numeric))
        per_tensor[name] = worst
    return GradCheckReport(per_tensor, tol)

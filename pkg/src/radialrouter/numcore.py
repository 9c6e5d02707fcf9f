"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the routing model needs are implemented. Every op
validates its shapes, runs a plain numpy forward pass, and (when a
ComputationRecord is active) appends itself to the record together with a
hand-written backward closure. `backward` replays the record in reverse;
`grad_check` verifies any scalar function against central finite
differences.

Tensors are 2-D throughout: row vectors are (1, d), matrices (m, d),
scalars (1, 1).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, ValidationError

LAYER_NORM_EPS = 1e-5
_LOG_FLOOR = 1e-300  # keeps log() finite; domain is positive values anyway


class Tensor:
    """A 2-D float64 array with an optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got ndim={arr.ndim}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a scalar tensor, shape={self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Computation record (the tape)
# ---------------------------------------------------------------------------

@dataclass
class TapeOp:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    flops: int = 0  # multiply-add count; only matmul-bearing ops report > 0


class ComputationRecord:
    """Ordered log of executed ops; execution order is a topological order."""

    def __init__(self):
        self.ops: list[TapeOp] = []

    def __enter__(self) -> "ComputationRecord":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for op in self.ops:
            counts[op.name] = counts.get(op.name, 0) + 1
        return counts

    def total_flops(self) -> int:
        return sum(op.flops for op in self.ops)


_TAPES = threading.local()


def _stack() -> list[ComputationRecord]:
    if not hasattr(_TAPES, "stack"):
        _TAPES.stack = []
    return _TAPES.stack


def record() -> ComputationRecord:
    """Context manager: ops executed inside are logged for backward()."""
    return ComputationRecord()


def active_record() -> ComputationRecord | None:
    stack = _stack()
    return stack[-1] if stack else None


def _emit(name, inputs: tuple[Tensor, ...], out_values: np.ndarray,
          backward_fn, flops: int = 0) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = out_values
    needs = False
    for t in inputs:
        if t.requires_grad:
            needs = True
            break
    out.requires_grad = needs
    out.grad = None
    stack = getattr(_TAPES, "stack", None)
    if stack:
        stack[-1].ops.append(TapeOp(name, inputs, out, backward_fn, flops))
    return out


def backward(rec: ComputationRecord, loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Repeated calls accumulate; call zero_grads() between steps.
    """
    if loss.values.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(op.output) for op in rec.ops}
    if id(loss) not in produced:
        raise ContractError("loss was not produced by this computation record")
    pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    holders: dict[int, Tensor] = {id(loss): loss}
    for op in reversed(rec.ops):
        g = pending.pop(id(op.output), None)
        if g is None:
            continue
        if op.output.requires_grad:
            _accumulate(op.output, g)
        if not any(t.requires_grad for t in op.inputs):
            continue
        input_grads = op.backward_fn(g)
        for t, gt in zip(op.inputs, input_grads):
            if gt is None:
                continue
            key = id(t)
            if key in pending:
                pending[key] = pending[key] + gt
            else:
                pending[key] = gt
                holders[key] = t
    for key, g in pending.items():  # leaves: tensors not produced on this tape
        t = holders[key]
        if t.requires_grad:
            _accumulate(t, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g.reshape(t.values.shape)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    p, q = av.shape
    q2, r = bv.shape
    if q != q2:
        raise DimensionError(f"matmul inner dims disagree: {av.shape} x {bv.shape}")
    out = av @ bv

    def back(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), out, back, flops=p * q * r)


def transpose(x: Tensor) -> Tensor:
    out = x.values.T.copy()

    def back(g):
        return (g.T,)

    return _emit("transpose", (x,), out, back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_rows needs at least one part")
    blocks = [t.values for t in parts]
    cols = blocks[0].shape[1]
    for b in blocks:
        if b.shape[1] != cols:
            raise DimensionError(
                f"concat_rows column mismatch: {b.shape[1]} != {cols}")
    out = np.concatenate(blocks, axis=0)
    row_counts = [b.shape[0] for b in blocks]

    def back(g):
        grads, at = [], 0
        for rows in row_counts:
            grads.append(g[at:at + rows])
            at += rows
        return grads

    return _emit("concat_rows", tuple(parts), out, back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_cols needs at least one part")
    rows = parts[0].shape[0]
    for t in parts:
        if t.shape[0] != rows:
            raise DimensionError(
                f"concat_cols row mismatch: {t.shape[0]} != {rows}")
    out = np.concatenate([t.values for t in parts], axis=1)
    col_counts = [t.shape[1] for t in parts]

    def back(g):
        grads, at = [], 0
        for cols in col_counts:
            grads.append(g[:, at:at + cols])
            at += cols
        return grads

    return _emit("concat_cols", tuple(parts), out, back)


def add(a: Tensor, b: Tensor, alpha: float = 1.0) -> Tensor:
    """a + alpha * b; b may be a (1, k) row broadcast over a's rows."""
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        broadcast = False
    elif bv.shape == (1, av.shape[1]):
        broadcast = True
    else:
        raise DimensionError(f"add shapes {av.shape} + {bv.shape} not supported")
    out = av + alpha * bv if alpha != 1.0 else av + bv

    def back(g):
        ga = g if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        gb = alpha * (g.sum(axis=0, keepdims=True) if broadcast else g)
        return ga, gb

    return _emit("add", (a, b), out, back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, b, alpha=-1.0)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = a.values * b.values

    def back(g):
        ga = g * b.values if a.requires_grad else None
        gb = g * a.values if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), out, back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.values * c

    def back(g):
        return (g * c,)

    return _emit("scale", (x,), out, back)


def relu(x: Tensor) -> Tensor:
    xv = x.values
    out = np.maximum(xv, 0.0)

    def back(g):
        return (g * (xv > 0.0),)  # subgradient at exactly 0 is 0

    return _emit("relu", (x,), out, back)


def log(x: Tensor) -> Tensor:
    clamped = np.maximum(x.values, _LOG_FLOOR)
    out = np.log(clamped)

    def back(g):
        return (g / clamped,)

    return _emit("log", (x,), out, back)


def sum_all(x: Tensor) -> Tensor:
    out = np.array([[x.values.sum()]])

    def back(g):
        return (np.full_like(x.values, float(g[0, 0])),)

    return _emit("sum_all", (x,), out, back)


def pick(x: Tensor, col: int) -> Tensor:
    """Scalar x[0, col] from a (1, k) row."""
    if x.shape[0] != 1:
        raise DimensionError(f"pick expects a row vector, got {x.shape}")
    if not (0 <= col < x.shape[1]):
        raise IndexError(f"pick column {col} out of range for {x.shape}")
    out = x.values[:, col:col + 1].copy()

    def back(g):
        gx = np.zeros_like(x.values)
        gx[0, col] = g[0, 0]
        return (gx,)

    return _emit("pick", (x,), out, back)


def softmax_row(x: Tensor) -> Tensor:
    xv = x.values
    if xv.shape[0] != 1 or xv.shape[1] < 1:
        raise DimensionError(f"softmax_row expects (1, k>=1), got {xv.shape}")
    shifted = xv - xv.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def back(g):
        dot = float((g * out).sum())
        return (out * (g - dot),)

    return _emit("softmax_row", (x,), out, back)


def log_softmax_row(x: Tensor) -> Tensor:
    if x.shape[0] != 1 or x.shape[1] < 1:
        raise DimensionError(f"log_softmax_row expects (1, k>=1), got {x.shape}")
    shifted = x.values - x.values.max()
    out = shifted - np.log(np.exp(shifted).sum())
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(),)

    return _emit("log_softmax_row", (x,), out, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    xv, gv, bv = x.values, gain.values, bias.values
    d = xv.shape[1]
    if xv.shape[0] != 1 or d < 2:
        raise DimensionError(f"layer_norm expects (1, d>=2), got {xv.shape}")
    if gv.shape != (1, d) or bv.shape != (1, d):
        raise DimensionError("layer_norm gain/bias must match x")
    row = xv[0]
    mu = row.sum() / d
    centered = row - mu
    var = (centered @ centered) / d
    std = math.sqrt(var + LAYER_NORM_EPS)
    xhat = (centered / std).reshape(1, d)
    out = gv * xhat + bv

    def back(g):
        ggain = g * xhat if gain.requires_grad else None
        gbias = g.copy() if bias.requires_grad else None
        if not x.requires_grad:
            return None, ggain, gbias
        dxhat = g * gv
        gx = (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean()) / std
        return gx, ggain, gbias

    return _emit("layer_norm", (x, gain, bias), out, back)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.shape[0] != 1:
        raise DimensionError(f"cosine_sim expects matching rows, got {a.shape}, {b.shape}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity undefined for a zero-norm vector")
    c = float((a.values @ b.values.T)[0, 0]) / (na * nb)
    out = np.array([[c]])

    def back(g):
        gs = float(g[0, 0])
        ga = gs * (b.values / (na * nb) - c * a.values / (na * na)) if a.requires_grad else None
        gb = gs * (a.values / (na * nb) - c * b.values / (nb * nb)) if b.requires_grad else None
        return ga, gb

    return _emit("cosine_sim", (a, b), out, back)


# ---------------------------------------------------------------------------
# Attention (fused: one tape op, hand-written backward)
# ---------------------------------------------------------------------------

def _attention(q: Tensor, ctx: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
               wo: Tensor | None, heads: int, name: str) -> Tensor:
    qv, cv, wqv, wkv, wvv = q.values, ctx.values, wq.values, wk.values, wv.values
    m, d_in = cv.shape
    if m == 0:
        raise DimensionError("attention needs a non-empty context")
    if qv.shape[0] != 1 or qv.shape[1] != wqv.shape[0]:
        raise DimensionError(f"query {qv.shape} does not match Wq {wqv.shape}")
    if d_in != wkv.shape[0] or d_in != wvv.shape[0]:
        raise DimensionError("context width does not match Wk/Wv")
    d_k, d_v = wqv.shape[1], wvv.shape[1]
    if wkv.shape[1] != d_k:
        raise DimensionError("Wq and Wk must project to the same width")
    if d_k % heads or d_v % heads:
        raise ConfigError(f"head count {heads} must divide projection widths {d_k}/{d_v}")
    dh_k, dh_v = d_k // heads, d_v // heads
    inv_scale = 1.0 / math.sqrt(dh_k)  # sqrt of per-head key width

    Q = qv @ wqv                                   # (1, d_k)
    K = cv @ wkv                                   # (m, d_k)
    V = cv @ wvv                                   # (m, d_v)
    Qh = Q.reshape(heads, dh_k)
    Kh = K.reshape(m, heads, dh_k)
    Vh = V.reshape(m, heads, dh_v)
    S = np.einsum("hk,mhk->hm", Qh, Kh) * inv_scale
    S -= S.max(axis=1, keepdims=True)
    E = np.exp(S)
    A = E / E.sum(axis=1, keepdims=True)           # (heads, m)
    O = np.einsum("hm,mhv->hv", A, Vh)
    merged = O.reshape(1, d_v)
    out = merged @ wo.values if wo is not None else merged

    flops = d_in * d_k + m * d_in * d_k + m * d_in * d_v + heads * m * dh_k + heads * m * dh_v
    inputs: tuple[Tensor, ...]
    if wo is not None:
        flops += d_v * wo.values.shape[1]
        inputs = (q, ctx, wq, wk, wv, wo)
    else:
        inputs = (q, ctx, wq, wk, wv)

    def back(g):
        if wo is not None:
            g_wo = merged.T @ g if wo.requires_grad else None
            g_merged = g @ wo.values.T
        else:
            g_wo = None
            g_merged = g
        gOh = g_merged.reshape(heads, dh_v)
        gV = np.einsum("hm,hv->mhv", A, gOh)
        gA = np.einsum("hv,mhv->hm", gOh, Vh)
        dot = (gA * A).sum(axis=1, keepdims=True)
        gS = A * (gA - dot) * inv_scale
        gQ = np.einsum("hm,mhk->hk", gS, Kh).reshape(1, d_k)
        gK = np.einsum("hm,hk->mhk", gS, Qh).reshape(m, d_k)
        gV = gV.reshape(m, d_v)
        g_q = gQ @ wqv.T if q.requires_grad else None
        g_wq = qv.T @ gQ if wq.requires_grad else None
        g_ctx = gK @ wkv.T + gV @ wvv.T if ctx.requires_grad else None
        g_wk = cv.T @ gK if wk.requires_grad else None
        g_wv = cv.T @ gV if wv.requires_grad else None
        if wo is not None:
            return g_q, g_ctx, g_wq, g_wk, g_wv, g_wo
        return g_q, g_ctx, g_wq, g_wk, g_wv

    return _emit(name, inputs, out, back, flops=flops)


def scaled_dot_attention(q: Tensor, ctx: Tensor, wq: Tensor, wk: Tensor,
                         wv: Tensor) -> Tensor:
    """softmax(q Wq (ctx Wk)^T / sqrt(d_k)) @ (ctx Wv), a (1, d_v) row."""
    return _attention(q, ctx, wq, wk, wv, wo=None, heads=1, name="attention")


def multi_head_attention(q: Tensor, ctx: Tensor, wq: Tensor, wk: Tensor,
                         wv: Tensor, wo: Tensor, heads: int) -> Tensor:
    """h parallel attention heads, concatenated and projected by Wo."""
    return _attention(q, ctx, wq, wk, wv, wo=wo, heads=heads, name="attention")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    message: str = ""


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, dict):
        return list(params.items())
    out = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            out.append(p)
        else:
            out.append((f"p{i}", p))
    return out


def grad_check(f: Callable[[], Tensor], params, step: float = 1e-5,
               tol: float = 1e-4, abs_tol: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of the scalar f() against central differences.

    f must rebuild its computation from the current parameter values on
    every call. Entries where both sides are below abs_tol pass on the
    absolute fallback.
    """
    if not (0.0 < step <= 1e-3):
        raise ConfigError(f"finite-difference step must be in (0, 1e-3], got {step}")
    named = _named(params)
    zero_grads(t for _, t in named)
    with record() as tape:
        loss = f()
    if loss.values.size != 1:
        raise ContractError("grad_check target must be scalar")
    if not np.isfinite(loss.values).all():
        return GradCheckReport(False, math.inf, {}, "loss is not finite")
    backward(tape, loss)
    analytic = {name: (np.zeros_like(t.values) if t.grad is None else t.grad.copy())
                for name, t in named}

    per_param: dict[str, float] = {}
    worst = 0.0
    ok = True
    for name, t in named:
        base = t.values
        a = analytic[name]
        max_err = 0.0
        for idx in np.ndindex(*base.shape):
            orig = base[idx]
            base[idx] = orig + step
            f_plus = f().item()
            base[idx] = orig - step
            f_minus = f().item()
            base[idx] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                return GradCheckReport(False, math.inf, per_param,
                                       f"non-finite perturbed loss at {name}{idx}")
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(a[idx] - numeric)
            denom = max(abs(a[idx]), abs(numeric))
            rel = 0.0 if err <= abs_tol else err / denom
            if rel > max_err:
                max_err = rel
        per_param[name] = max_err
        worst = max(worst, max_err)
        if max_err > tol:
            ok = False
    msg = "" if ok else f"max relative error {worst:.3e} exceeds tol {tol:.1e}"
    return GradCheckReport(ok, worst, per_param, msg)

"""Dense float64 tensors with tape-based reverse-mode autodiff.

Desk-scale engine built for correctness over speed: 64-bit floats
throughout (so finite-difference checks hold at tight tolerances), a
dynamic tape rebuilt per forward pass, and hard errors on any shape
mismatch. The only broadcasting allowed is multiplication by a scalar;
everything else must line up exactly, because silent broadcasting hides
alignment bugs.

Tensors are immutable after creation except for gradient accumulation.
A tape is single-threaded; independent tapes may run on separate threads
(the active tape is thread-local) as long as they do not share parameter
gradient buffers.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, RavenError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "parameter",
    "backward",
    "make_node",
    "accumulate_grad",
    "set_debug_validation",
    "matmul",
    "add",
    "sub",
    "hadamard",
    "scale",
    "smul",
    "sigmoid",
    "tanh",
    "concat",
    "l2_norm",
    "tsum",
    "dot",
    "div",
    "minimum",
    "absolute",
    "mean_rows",
    "stack_rows",
    "GradCheckReport",
    "grad_check",
]

_STATE = threading.local()

_DEBUG_VALIDATE = False


def set_debug_validation(enabled: bool) -> None:
    """Toggle finiteness checks on every op (off by default; costs time)."""
    global _DEBUG_VALIDATE
    _DEBUG_VALIDATE = bool(enabled)


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tape:
    """Recording of one forward pass, in creation order.

    Creation order is a valid topological order: an op can only consume
    tensors that already exist, so walking the node list in reverse
    visits every node after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RavenError("tapes do not nest; finish the active tape first")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.tape = None

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A dense, row-major float64 value grid with optional grad and lineage."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        op = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={self.shape}{op})"


def tensor(data) -> Tensor:
    """Constant tensor: participates in math, never receives gradients."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates gradients across backward passes."""
    return Tensor(data, requires_grad=True)


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


#: Public alias for fused ops defined outside this module: add ``g`` into
#: ``t.grad`` (no-op when ``t`` does not require grad).
accumulate_grad = _accum


def make_node(data, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create an op output, recording lineage on the active tape.

    This is also the extension point for fused operations (LSTM steps,
    losses) whose backward pass is hand-derived rather than composed:
    ``backward_fn(grad_out)`` must accumulate into each parent's grad.
    Lineage is recorded only when some parent requires grad and a tape
    is active; otherwise the result is a plain constant (fast inference).
    """
    if _DEBUG_VALIDATE:
        for p in parents:
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteError(f"non-finite input to op {op!r}")
        if not np.all(np.isfinite(np.asarray(data))):
            raise NonFiniteError(f"op {op!r} produced a non-finite value")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = parents
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def backward(root: Tensor) -> None:
    """Reverse sweep from a scalar root over the active tape.

    Populates ``grad`` on every parameter reachable from ``root``;
    gradients accumulate additively across uses and across calls.
    """
    if root.data.size != 1:
        raise RavenError(f"backward() needs a scalar root, got shape {root.shape}")
    tape = _active_tape()
    if tape is None:
        raise RavenError("backward() must run inside a Tape context")
    idx = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i] is root:
            idx = i
            break
    if idx is None:
        raise RavenError("root is not on the active tape (was it recorded?)")
    _accum(root, np.ones_like(root.data))
    for node in reversed(tape.nodes[: idx + 1]):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs equal shapes, got {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: [m,k] @ [k,n] -> [m,n], or [m,k] @ [k] -> [m]."""
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul needs a matrix and a matrix/vector, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if b.data.ndim == 1:
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)
        else:
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    return make_node(out_data, "matmul", (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return make_node(a.data + b.data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return make_node(a.data - b.data, "sub", (a, b), bwd)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shaped tensors."""
    _require_same_shape("hadamard", a, b)

    def bwd(g):
        _accum(a, b.data * g)
        _accum(b, a.data * g)

    return make_node(a.data * b.data, "hadamard", (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a plain (non-differentiable) scalar constant."""
    c = float(c)

    def bwd(g):
        _accum(x, c * g)

    return make_node(x.data * c, "scale", (x,), bwd)


def smul(s: Tensor, x: Tensor) -> Tensor:
    """Multiply a tensor by a single-element tensor (differentiable scalar)."""
    if s.data.size != 1:
        raise ShapeError(f"smul scalar factor must have one element, got shape {s.shape}")
    sval = s.data.reshape(-1)[0]

    def bwd(g):
        _accum(s, np.sum(x.data * g).reshape(s.shape))
        _accum(x, sval * g)

    return make_node(sval * x.data, "smul", (s, x), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function 1 / (1 + exp(-x)), saturating cleanly at the ends."""
    with np.errstate(over="ignore"):
        out_data = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        _accum(x, out_data * (1.0 - out_data) * g)

    return make_node(out_data, "sigmoid", (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def bwd(g):
        _accum(x, (1.0 - out_data * out_data) * g)

    return make_node(out_data, "tanh", (x,), bwd)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two vectors; gradient splits back by index range."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"concat needs rank-1 tensors, got ranks {a.data.ndim} and {b.data.ndim}")
    n = a.shape[0]

    def bwd(g):
        _accum(a, g[:n])
        _accum(b, g[n:])

    return make_node(np.concatenate([a.data, b.data]), "concat", (a, b), bwd)


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of a vector; the gradient at the zero vector is zero.

    The zero-vector subgradient choice is safe for the shift path: the
    scaling factor there is gated to zero whenever this norm is zero.
    """
    if x.data.ndim != 1:
        raise ShapeError(f"l2_norm needs a rank-1 tensor, got shape {x.shape}")
    n = float(np.sqrt(np.sum(x.data * x.data)))

    def bwd(g):
        if n > 0.0:
            _accum(x, (x.data / n) * float(g))

    return make_node(np.float64(n), "l2_norm", (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return make_node(np.sum(x.data), "tsum", (x,), bwd)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equal-length vectors, as a scalar tensor."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"dot needs rank-1 tensors, got shapes {a.shape} and {b.shape}")
    _require_same_shape("dot", a, b)

    def bwd(g):
        _accum(a, b.data * float(g))
        _accum(b, a.data * float(g))

    return make_node(np.dot(a.data, b.data), "dot", (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Scalar division a / b; callers must guard b == 0."""
    if a.data.size != 1 or b.data.size != 1:
        raise ShapeError(f"div is scalar-only, got shapes {a.shape} and {b.shape}")
    av = float(a.data.reshape(-1)[0])
    bv = float(b.data.reshape(-1)[0])

    def bwd(g):
        gv = float(np.asarray(g).reshape(-1)[0])
        _accum(a, np.full_like(a.data, gv / bv))
        _accum(b, np.full_like(b.data, -gv * av / (bv * bv)))

    return make_node(a.data / bv, "div", (a, b), bwd)


def minimum(x: Tensor, cap: float) -> Tensor:
    """Scalar min(x, cap); at the kink (x == cap) the gradient is zero."""
    if x.data.size != 1:
        raise ShapeError(f"minimum is scalar-only, got shape {x.shape}")
    cap = float(cap)
    below = float(x.data.reshape(-1)[0]) < cap

    def bwd(g):
        if below:
            _accum(x, g)

    return make_node(np.minimum(x.data, cap), "minimum", (x,), bwd)


def absolute(x: Tensor) -> Tensor:
    """Elementwise |x|; subgradient 0 at 0."""

    def bwd(g):
        _accum(x, np.sign(x.data) * g)

    return make_node(np.abs(x.data), "absolute", (x,), bwd)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the rows of a [T,k] matrix -> [k] vector."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows needs a rank-2 tensor, got shape {x.shape}")
    t = x.shape[0]
    if t < 1:
        raise ShapeError("mean_rows needs at least one row")

    def bwd(g):
        _accum(x, np.broadcast_to(g / t, x.shape))

    return make_node(x.data.mean(axis=0), "mean_rows", (x,), bwd)


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack equal-length vectors into a [T,k] matrix; gradient splits by row."""
    if not rows:
        raise ShapeError("stack_rows needs at least one row")
    k = rows[0].shape
    for r in rows:
        if r.data.ndim != 1:
            raise ShapeError(f"stack_rows needs rank-1 tensors, got shape {r.shape}")
        if r.shape != k:
            raise ShapeError(f"stack_rows rows differ in length: {k} vs {r.shape}")
    parents = tuple(rows)

    def bwd(g):
        for i, r in enumerate(parents):
            _accum(r, g[i])

    return make_node(np.stack([r.data for r in rows]), "stack_rows", parents, bwd)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter comparison of reverse-mode and finite-difference grads."""

    step: float
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max rel err {self.max_rel_err:.3e} over {len(self.per_param)} parameters"


def grad_check(f, params: dict[str, Tensor], step: float = 1e-5, tolerance: float = 1e-5) -> GradCheckReport:
    """Compare gradients of the scalar ``f()`` against central differences.

    ``f`` must be deterministic and close over ``params`` (name -> leaf
    tensor). Mismatches never raise; parameters whose error exceeds
    ``tolerance`` are listed in the report's ``failures``.

    The reported number for a parameter is
    ``max_i |ad_i - fd_i| / max(|ad_i|, |fd_i|, gscale, 1e-12)`` where
    ``gscale`` is that parameter's largest gradient magnitude. Scaling
    near-zero entries by the parameter's own gradient scale keeps
    finite-difference roundoff on flat coordinates from dominating.
    """
    for t in params.values():
        t.zero_grad()
    with Tape():
        out = f()
        if out.requires_grad:
            backward(out)
        # else: f() is constant w.r.t. everything tracked; grads are zero
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
    for t in params.values():
        t.zero_grad()

    report = GradCheckReport(step=step, tolerance=tolerance)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f().item()
            flat[i] = orig - step
            f_minus = f().item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * step)
        ana = analytic[name].reshape(-1)
        gscale = float(np.max(np.abs(ana))) if ana.size else 0.0
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(numeric)), max(gscale, 1e-12))
        err = float(np.max(np.abs(ana - numeric) / denom)) if ana.size else 0.0
        report.per_param[name] = err
        if err >= tolerance:
            report.failures.append(name)
    return report

"""Neural building blocks: LSTM cell/runner, affine layers, parameters.

The LSTM forward is written once as a plain-numpy step function; both
the single-cell op and the sequence runner wrap it, so running a
sequence is bitwise identical to folding the cell step by hand. Their
backward passes are hand-derived (backprop through time for the runner)
and verified against finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, RavenError, ShapeError
from .tensor import Tensor, accumulate_grad, add, make_node, matmul, parameter

__all__ = [
    "LstmParams",
    "AffineParams",
    "ParamStore",
    "lstm_params",
    "affine_params",
    "lstm_cell_step",
    "lstm_run",
    "affine",
    "init_params",
    "save_checkpoint",
    "load_checkpoint",
]

GATE_NAMES = ("i", "f", "o", "g")


@dataclass
class LstmParams:
    """Per-gate weights of a single LSTM: input, recurrent, bias x {i,f,o,g}."""

    w_i: Tensor
    u_i: Tensor
    b_i: Tensor
    w_f: Tensor
    u_f: Tensor
    b_f: Tensor
    w_o: Tensor
    u_o: Tensor
    b_o: Tensor
    w_g: Tensor
    u_g: Tensor
    b_g: Tensor

    @property
    def input_size(self) -> int:
        return self.w_i.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.w_i.shape[0]

    def tensors(self) -> tuple[Tensor, ...]:
        return (
            self.w_i, self.u_i, self.b_i,
            self.w_f, self.u_f, self.b_f,
            self.w_o, self.u_o, self.b_o,
            self.w_g, self.u_g, self.b_g,
        )


@dataclass
class AffineParams:
    """Weight matrix plus optional bias; bias length equals weight rows."""

    weight: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"affine bias length {self.bias.shape} does not match weight rows {self.weight.shape}"
            )


class ParamStore:
    """Named map of parameter tensors with deterministic iteration order.

    Names are unique; iteration follows registration order, which is what
    makes initialization and checkpoints reproducible from a seed.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise RavenError(f"parameter {name!r} registered twice")
        self._params[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._params)

    def total_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Copies of all parameter values, keyed by name."""
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must agree."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise CheckpointError(
                f"parameter names disagree (missing {sorted(missing)}, unexpected {sorted(extra)})"
            )
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {t.data.shape}"
                )
            t.data[...] = arr

    def checksum(self) -> float:
        """Cheap mutation detector over all parameter values."""
        return float(sum(np.sum(t.data) + np.sum(t.data * t.data) for t in self._params.values()))


def lstm_params(store: ParamStore, prefix: str, input_size: int, hidden_size: int) -> LstmParams:
    """Register the twelve tensors of one LSTM under ``prefix/``."""
    kwargs = {}
    for gate in GATE_NAMES:
        kwargs[f"w_{gate}"] = store.register(f"{prefix}/w_{gate}", parameter(np.zeros((hidden_size, input_size))))
        kwargs[f"u_{gate}"] = store.register(f"{prefix}/u_{gate}", parameter(np.zeros((hidden_size, hidden_size))))
        kwargs[f"b_{gate}"] = store.register(f"{prefix}/b_{gate}", parameter(np.zeros(hidden_size)))
    return LstmParams(**kwargs)


def affine_params(store: ParamStore, prefix: str, out_size: int, in_size: int, bias: bool = True) -> AffineParams:
    weight = store.register(f"{prefix}/weight", parameter(np.zeros((out_size, in_size))))
    b = store.register(f"{prefix}/bias", parameter(np.zeros(out_size))) if bias else None
    return AffineParams(weight=weight, bias=b)


# ---------------------------------------------------------------------------
# Forward / backward cores (plain numpy, shared by cell step and runner)
# ---------------------------------------------------------------------------


def _sigma(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _pack(p: LstmParams):
    """Stack the per-gate weights into [4d, .] blocks (i, f, o, g order).

    Both the cell step and the runner go through the packed core, so
    folding the cell step by hand reproduces the runner bitwise.
    """
    w = np.concatenate([p.w_i.data, p.w_f.data, p.w_o.data, p.w_g.data])
    u = np.concatenate([p.u_i.data, p.u_f.data, p.u_o.data, p.u_g.data])
    b = np.concatenate([p.b_i.data, p.b_f.data, p.b_o.data, p.b_g.data])
    return w, u, b


def _cell_forward(packed, d: int, x, h, c):
    w, u, b = packed
    z = (w @ x + u @ h) + b
    gates = np.empty_like(z)
    gates[: 3 * d] = _sigma(z[: 3 * d])
    gates[3 * d :] = np.tanh(z[3 * d :])
    i, f, o, g = gates[:d], gates[d : 2 * d], gates[2 * d : 3 * d], gates[3 * d :]
    c2 = f * c + i * g
    tc2 = np.tanh(c2)
    h2 = o * tc2
    return h2, c2, (x, h, c, gates, tc2)


def _cell_backward(packed, d: int, cache, dh2, dc2):
    """One step of the cell's reverse pass.

    Returns (dz, dh, dc): the pre-activation gate gradient (from which
    weight gradients follow as outer products with x and h) and the
    gradients flowing to the previous step's state.
    """
    _, u, _ = packed
    x, h, c, gates, tc2 = cache
    i, f, o, g = gates[:d], gates[d : 2 * d], gates[2 * d : 3 * d], gates[3 * d :]
    do = dh2 * tc2
    dc_total = dc2 + dh2 * o * (1.0 - tc2 * tc2)
    dz = np.empty_like(gates)
    dz[:d] = (dc_total * g) * (i * (1.0 - i))
    dz[d : 2 * d] = (dc_total * c) * (f * (1.0 - f))
    dz[2 * d : 3 * d] = do * (o * (1.0 - o))
    dz[3 * d :] = (dc_total * i) * (1.0 - g * g)
    return dz, u.T @ dz, dc_total * f


def _flush_param_grads(p: LstmParams, dw, du, db) -> None:
    d = p.hidden_size
    for slot, (w, u, b) in enumerate(
        ((p.w_i, p.u_i, p.b_i), (p.w_f, p.u_f, p.b_f), (p.w_o, p.u_o, p.b_o), (p.w_g, p.u_g, p.b_g))
    ):
        rows = slice(slot * d, (slot + 1) * d)
        accumulate_grad(w, dw[rows])
        accumulate_grad(u, du[rows])
        accumulate_grad(b, db[rows])


def lstm_cell_step(p: LstmParams, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM update: returns (h', c').

    Implemented as a fused node holding the stacked [h'; c'] pair so the
    hand-derived backward runs exactly once however the outputs are used.
    """
    if x.shape != (p.input_size,):
        raise ShapeError(f"lstm input shape {x.shape} does not match params ({p.input_size},)")
    if h.shape != (p.hidden_size,) or c.shape != (p.hidden_size,):
        raise ShapeError(
            f"lstm state shapes {h.shape}/{c.shape} do not match hidden size ({p.hidden_size},)"
        )
    packed = _pack(p)
    with np.errstate(over="ignore"):
        h2, c2, cache = _cell_forward(packed, p.hidden_size, x.data, h.data, c.data)
    parents = (x, h, c) + p.tensors()

    def bwd(g):
        dz, dh, dc = _cell_backward(packed, p.hidden_size, cache, g[0], g[1])
        _flush_param_grads(p, dz[:, None] * x.data, dz[:, None] * h.data, dz)
        accumulate_grad(x, packed[0].T @ dz)
        accumulate_grad(h, dh)
        accumulate_grad(c, dc)

    pair = make_node(np.stack([h2, c2]), "lstm_cell", parents, bwd)
    return _row(pair, 0), _row(pair, 1)


def _row(m: Tensor, i: int) -> Tensor:
    def bwd(g):
        if m.grad is None:
            m.grad = np.zeros_like(m.data)
        m.grad[i] += g  # row-scatter; shapes differ so accumulate_grad does not apply

    return make_node(m.data[i].copy(), "row", (m,), bwd)


def lstm_run(p: LstmParams, seq: Tensor) -> Tensor:
    """Run the LSTM over a [T, k] sequence from zero state; returns h_T.

    A single fused node: the forward loop reuses the cell-step numpy
    core (so values match manual folding bitwise) and the backward is
    ordinary backprop through time.
    """
    if seq.data.ndim != 2:
        raise ShapeError(f"lstm_run needs a [T,k] sequence, got shape {seq.shape}")
    steps = seq.shape[0]
    if steps == 0:
        raise ShapeError("lstm_run needs a nonempty sequence (impute upstream)")
    if seq.shape[1] != p.input_size:
        raise ShapeError(f"sequence feature size {seq.shape[1]} does not match params {p.input_size}")
    d = p.hidden_size
    packed = _pack(p)
    h = np.zeros(d)
    c = np.zeros(d)
    caches = []
    with np.errstate(over="ignore"):
        for t in range(steps):
            h, c, cache = _cell_forward(packed, d, seq.data[t], h, c)
            caches.append(cache)

    def bwd(g):
        # Per-step recurrence stays in the loop; weight gradients batch
        # into three matrix products over all steps at the end.
        dzs = np.empty((steps, 4 * d))
        dh = np.asarray(g, dtype=np.float64).copy()
        dc = np.zeros(d)
        for t in range(steps - 1, -1, -1):
            dzs[t], dh, dc = _cell_backward(packed, d, caches[t], dh, dc)
        h_in = np.stack([caches[t][1] for t in range(steps)])
        _flush_param_grads(p, dzs.T @ seq.data, dzs.T @ h_in, dzs.sum(axis=0))
        accumulate_grad(seq, dzs @ packed[0])

    return make_node(h, "lstm_run", (seq,) + p.tensors(), bwd)


def affine(p: AffineParams, x: Tensor) -> Tensor:
    """W x + b (or W x when the layer has no bias)."""
    y = matmul(p.weight, x)
    if p.bias is not None:
        y = add(y, p.bias)
    return y


def init_params(store: ParamStore, seed: int, forget_bias: float = 1.0) -> None:
    """Fill a registered store: Glorot-uniform weights, zero biases.

    LSTM forget-gate biases (names ending in ``b_f``) are set to
    ``forget_bias`` to stabilize short-sequence training. Fully
    determined by the seed and registration order.
    """
    rng = np.random.default_rng(seed)
    for name, t in store.items():
        if t.data.ndim == 2:
            fan_out, fan_in = t.data.shape
            s = np.sqrt(6.0 / (fan_in + fan_out))
            t.data[...] = rng.uniform(-s, s, size=t.data.shape)
        elif name.endswith("b_f"):
            t.data[...] = forget_bias
        else:
            t.data[...] = 0.0


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------
#
#   magic   b"RVNCKPT1\n"
#   u64     little-endian byte length of the JSON header
#   header  UTF-8 JSON {"tensors": [{"name": ..., "shape": [...]}, ...]}
#           listing tensors in registration order
#   payload raw little-endian float64 values, row-major, concatenated in
#           header order
#
# The payload is copied bit-for-bit, so a save/load round trip is
# lossless.

_MAGIC = b"RVNCKPT1\n"


def save_checkpoint(path, store: ParamStore) -> None:
    header = {
        "tensors": [{"name": name, "shape": list(t.data.shape)} for name, t in store.items()]
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in store.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into a name -> array map (registration order)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not a parameter checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt checkpoint header: {exc}") from exc
        arrays: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return arrays

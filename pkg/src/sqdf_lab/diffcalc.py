"""Small reverse-mode autodiff engine over float64 numpy arrays.

A :class:`Tape` records every primitive applied to :class:`Var` nodes during a
forward pass. :func:`backward` walks the tape once in reverse and accumulates
vector-Jacobian products into the leaves. Plain ``numpy`` arrays mixed into an
expression are treated as constants.

The module also carries the pieces every model in the package is built from:
tanh/softplus MLPs, an AdamW optimizer, seeded Philox generators and a binary
checkpoint container.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DiffcalcError",
    "ShapeError",
    "ContractError",
    "NumericError",
    "CheckpointError",
    "tensor",
    "Var",
    "Tape",
    "backward",
    "affine",
    "tanh",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "safe_sqrt",
    "square",
    "vsum",
    "vmean",
    "concat",
    "MlpParams",
    "mlp_forward",
    "finite_diff_check",
    "OptimizerState",
    "adamw_step",
    "seed_rng",
    "spawn_rng",
    "save_checkpoint",
    "load_checkpoint",
    "params_digest",
]


class DiffcalcError(Exception):
    """Base class for errors raised by the autodiff substrate."""


class ShapeError(DiffcalcError, ValueError):
    pass


class ContractError(DiffcalcError, ValueError):
    pass


class NumericError(DiffcalcError, ArithmeticError):
    pass


class CheckpointError(DiffcalcError, OSError):
    pass


def tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validated float64 array: reshaped to ``shape`` if given, finite entries only."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    return arr


# ---------------------------------------------------------------------------
# Tape and nodes
# ---------------------------------------------------------------------------


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "name", "grad", "__weakref__")

    __array_ufunc__ = None  # ndarray <op> Var defers to the reflected Var method

    def __init__(self, value: np.ndarray, tape: "Tape", index: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(other))

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return _mul(self, _reciprocal(other))
        return _mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return _mul(_reciprocal(self), other)

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __pow__(self, power):
        if power == 2:
            return square(self)
        raise ContractError("only squaring is supported")

    def __getitem__(self, key):
        return _getitem(self, key)

    @property
    def T(self):
        return _transpose(self)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in evaluation order, so every node's inputs precede it.
    Named parameter leaves are deduplicated: asking twice for the same name
    returns the same :class:`Var`.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Var, tuple, Callable | None]] = []
        self.params: dict[str, Var] = {}
        self.inputs: list[Var] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, value: np.ndarray, parents: tuple, vjp: Callable | None, name=None) -> Var:
        var = Var(value, self, len(self.nodes), name)
        self.nodes.append((var, parents, vjp))
        return var

    def param(self, value: np.ndarray, name: str) -> Var:
        var = self.params.get(name)
        if var is not None:
            if var.value is not value:
                raise ContractError(f"parameter name {name!r} already bound to another array")
            return var
        var = self._push(value, (), None, name)
        self.params[name] = var
        return var

    def input(self, value, name: str | None = None) -> Var:
        var = self._push(tensor(value), (), None, name)
        self.inputs.append(var)
        return var

    def record(self, value: np.ndarray, parents: tuple, vjp: Callable) -> Var:
        return self._push(value, parents, vjp)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise ContractError("operation needs at least one Var operand")


def _val(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, output: Var) -> dict[str, np.ndarray]:
    """Reverse pass from a scalar ``output``.

    Sets ``.grad`` on every leaf (parameters and inputs) and returns the
    gradients of all named parameters on the tape. Parameters the output does
    not depend on get exact zeros.
    """
    if output.tape is not tape:
        raise ContractError("output was not recorded on this tape")
    if output.value.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.value.shape}")
    grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
    for var, parents, vjp in reversed(tape.nodes[: output.index + 1]):
        g = grads.pop(var.index, None)
        if not parents:
            var.grad = np.array(g) if g is not None else np.zeros_like(var.value)
            continue
        if g is None:
            continue
        contributions = vjp(g)
        for parent, contrib in zip(parents, contributions):
            if not isinstance(parent, Var) or contrib is None:
                continue
            contrib = _unbroadcast(contrib, parent.value.shape)
            prev = grads.get(parent.index)
            grads[parent.index] = contrib if prev is None else prev + contrib
    for var, parents, _ in tape.nodes[output.index + 1 :]:
        if not parents:
            var.grad = np.zeros_like(var.value)
    return {name: var.grad for name, var in tape.params.items()}


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _add(a, b) -> Var:
    tape = _tape_of(a, b)
    return tape.record(_val(a) + _val(b), (a, b), lambda g: (g, g))


def _neg(a):
    if not isinstance(a, Var):
        return -np.asarray(a, dtype=np.float64)
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def _mul(a, b) -> Var:
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    return tape.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def _reciprocal(a: Var) -> Var:
    out = 1.0 / a.value
    return a.tape.record(out, (a,), lambda g: (-g * out * out,))


def _matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError("matmul operands must be 2-D")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    return tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def _getitem(a: Var, key) -> Var:
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return a.tape.record(a.value[key], (a,), vjp)


def _transpose(a: Var) -> Var:
    return a.tape.record(a.value.T, (a,), lambda g: (g.T,))


def affine(x, W, b) -> Var:
    """``x @ W + b`` as a single node; any operand may be a constant."""
    tape = _tape_of(x, W, b)
    xv, Wv, bv = _val(x), _val(W), _val(b)
    if xv.ndim != 2 or xv.shape[1] != Wv.shape[0]:
        raise ShapeError(f"affine input shape {xv.shape} incompatible with weight {Wv.shape}")
    out = xv @ Wv + bv

    def vjp(g):
        return (
            g @ Wv.T if isinstance(x, Var) else None,
            xv.T @ g if isinstance(W, Var) else None,
            g.sum(axis=0) if isinstance(b, Var) else None,
        )

    return tape.record(out, (x, W, b), vjp)


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: Var) -> Var:
    v = a.value
    out = np.logaddexp(0.0, v)
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return a.tape.record(out, (a,), lambda g: (g * sig,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    v = a.value
    return a.tape.record(np.log(v), (a,), lambda g: (g / v,))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record(out, (a,), lambda g: (0.5 * g / out,))


def safe_sqrt(a: Var) -> Var:
    """Square root whose gradient is taken as 0 where the argument is 0."""
    out = np.sqrt(a.value)
    inv = np.divide(0.5, out, out=np.zeros_like(out), where=out > 0)
    return a.tape.record(out, (a,), lambda g: (g * inv,))


def square(a: Var) -> Var:
    v = a.value
    return a.tape.record(v * v, (a,), lambda g: (2.0 * g * v,))


def vsum(a: Var, axis: int | None = None) -> Var:
    v = a.value
    if axis is None:
        return a.tape.record(np.asarray(v.sum()), (a,), lambda g: (np.broadcast_to(g, v.shape),))
    axis = axis % v.ndim
    return a.tape.record(
        v.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), v.shape),),
    )


def vmean(a: Var, axis: int | None = None) -> Var:
    n = a.value.size if axis is None else a.value.shape[axis]
    return vsum(a, axis) * (1.0 / n)


def concat(parts: Sequence, axis: int = -1) -> Var:
    tape = _tape_of(*parts)
    values = [np.asarray(_val(p), dtype=np.float64) for p in parts]
    axis = axis % values[0].ndim
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record(np.concatenate(values, axis=axis), tuple(parts), vjp)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

_ACTIVATIONS = {
    "tanh": (np.tanh, tanh),
    "softplus": (lambda v: np.logaddexp(0.0, v), softplus),
    "identity": (lambda v: v, lambda a: a),
}


@dataclass
class MlpParams:
    """Dense network weights; hidden layers use ``activation``, the output layer is linear."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ShapeError(f"layer {i}: weight {W.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ShapeError(f"layer {i} input width {W.shape[0]} != previous output")

    @classmethod
    def init(cls, widths: Sequence[int], rng: np.random.Generator, activation: str = "tanh",
             out_scale: float = 1.0) -> "MlpParams":
        """LeCun-normal initialisation; the last layer is scaled by ``out_scale``."""
        weights, biases = [], []
        n_layers = len(widths) - 1
        for i in range(n_layers):
            fan_in, fan_out = widths[i], widths[i + 1]
            W = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
            if i == n_layers - 1:
                W *= out_scale
            weights.append(W)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation)

    @classmethod
    def zeros(cls, widths: Sequence[int], activation: str = "tanh") -> "MlpParams":
        return cls(
            [np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
            [np.zeros(b) for b in widths[1:]],
            activation,
        )

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def named(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = W
            out[f"{prefix}b{i}"] = b
        return out

    @classmethod
    def from_named(cls, named: Mapping[str, np.ndarray], prefix: str = "",
                   activation: str = "tanh") -> "MlpParams":
        weights, biases = [], []
        i = 0
        while f"{prefix}W{i}" in named:
            weights.append(np.array(named[f"{prefix}W{i}"], dtype=np.float64))
            biases.append(np.array(named[f"{prefix}b{i}"], dtype=np.float64))
            i += 1
        if not weights:
            raise CheckpointError(f"no layers with prefix {prefix!r}")
        return cls(weights, biases, activation)

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.activation)


def mlp_forward(params: MlpParams, x, tape: Tape | None = None, prefix: str = "",
                trainable: bool = True):
    """Evaluate the network on a batch ``x`` of shape (n, in_width).

    Without a tape this is a plain numpy evaluation. With a tape the
    computation is recorded; ``trainable`` parameters become named leaves
    (``{prefix}W{i}``/``{prefix}b{i}``), otherwise they enter as constants and
    only ``x`` can receive gradient.
    """
    xv = _val(x)
    if xv.ndim != 2 or xv.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(f"input shape {xv.shape} does not match input width {params.weights[0].shape[0]}")
    act_np, act_var = _ACTIVATIONS[params.activation]
    last = len(params.weights) - 1
    if tape is None:
        h = xv
        for i, (W, b) in enumerate(zip(params.weights, params.biases)):
            h = h @ W + b
            if i < last:
                h = act_np(h)
        return h
    if not isinstance(x, Var):
        x = tape.input(x)
    h = x
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        if trainable:
            W = tape.param(W, f"{prefix}W{i}")
            b = tape.param(b, f"{prefix}b{i}")
        h = affine(h, W, b)
        if i < last:
            h = act_var(h)
    return h


def finite_diff_check(params: Mapping[str, np.ndarray], loss_fn: Callable[[Tape], Var],
                      h: float = 1e-5, max_entries: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative disagreement between tape gradients and central differences.

    ``params`` maps tape parameter names to the arrays ``loss_fn`` binds; they
    are perturbed in place and restored. The error for each parameter array is
    ``||analytic - fd|| / (||fd|| + 1e-12)``; the maximum over arrays is returned.
    ``max_entries`` limits the number of probed coordinates per array.
    """
    if not 0.0 < h <= 1e-2:
        raise ContractError("finite-difference step must lie in (0, 1e-2]")
    tape = Tape()
    out = loss_fn(tape)
    analytic = backward(tape, out)
    worst = 0.0
    for name, arr in params.items():
        g = analytic.get(name)
        if g is None:
            g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        fd = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn(Tape()).value)
            flat[i] = orig - h
            down = float(loss_fn(Tape()).value)
            flat[i] = orig
            fd[k] = (up - down) / (2.0 * h)
        an = g.reshape(-1)[idx]
        err = np.linalg.norm(an - fd) / (np.linalg.norm(fd) + 1e-12)
        worst = max(worst, float(err))
    return worst


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: OptimizerState, params: Mapping[str, np.ndarray],
               grads: Mapping[str, np.ndarray]) -> Mapping[str, np.ndarray]:
    """One AdamW update (decoupled weight decay, bias-corrected moments), in place."""
    for name, g in grads.items():
        if name not in params:
            continue
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


def seed_rng(seed: int) -> np.random.Generator:
    """Philox-4x64 (counter-based) generator keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def spawn_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent child stream of ``seed`` identified by ``keys``.

    String keys are mapped to integers with CRC-32 so the split is stable
    across processes and platforms.
    """
    spawn_key = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=spawn_key)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"SQDF"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays: magic, u32 version, then one record per array.

    Record layout (little-endian): u32 name length, name bytes (utf-8),
    u32 rank, u64 per dimension, raw float64 payload.
    """
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in arrays.items():
        # ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = math.prod(dims)
            if pos + 8 * count > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return out


def params_digest(arrays: Mapping[str, np.ndarray] | Iterable[np.ndarray]) -> str:
    """Stable hex digest of parameter bytes, used for before/after integrity checks."""
    import hashlib

    h = hashlib.sha256()
    items = sorted(arrays.items()) if isinstance(arrays, Mapping) else enumerate(arrays)
    for key, arr in items:
        h.update(str(key).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()

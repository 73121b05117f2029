"""
Dense tensor arithmetic with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 for training and inference,
float64 for gradient checking). Operations executed while a GradientTape is
active are recorded in execution order; ``GradientTape.backward`` replays the
record in reverse and returns gradients for exactly the requested parameter
units.

A parameter unit is addressed as ``name`` (whole tensor), ``name[r]`` (one
row) or ``name[a:b]`` (a row range). Row units let a single embedding table
be split between frozen vocabulary rows and trainable pseudotoken rows.
"""

from __future__ import annotations

import math
import re
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from errors import DimensionError, InputError, InvalidTensorError, StateError, TargetIndexError, TokenIndexError

logger = structlog.get_logger(__name__)

FLOAT32 = np.float32
FLOAT64 = np.float64

GELU_COEFF = 0.044715
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_UNIT_PATTERN = re.compile(r"^(?P<name>[^\[\]]+)(?:\[(?P<start>\d+)(?::(?P<stop>\d+))?\])?$")

RowSelector = Union[None, int, slice]


class Tensor:
    """Immutable n-d array of floats with an optional parameter name"""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (FLOAT32, FLOAT64) else FLOAT32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def is_valid(self) -> bool:
        """True when every entry is finite"""
        return bool(np.isfinite(self.data).all())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name, dtype=dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def check_finite(t: Tensor, where: str) -> None:
    if not t.is_valid():
        raise InvalidTensorError(f"{where}: tensor of shape {t.shape} contains NaN or Inf")


@dataclass
class RowGradient:
    """Sparse adjoint of a row gather: values[i] belongs to table row rows[i]"""

    rows: np.ndarray
    values: np.ndarray
    table_shape: Tuple[int, ...]

    def dense(self) -> np.ndarray:
        out = np.zeros(self.table_shape, dtype=self.values.dtype)
        np.add.at(out, self.rows, self.values)
        return out


VJP = Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[Union[np.ndarray, RowGradient]]]]


@dataclass
class _Record:
    out: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: VJP


_local = threading.local()


def _tape_stack() -> List["GradientTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["GradientTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def parse_unit(unit: str) -> Tuple[str, RowSelector]:
    """Split a unit id into parameter name and row selector"""
    match = _UNIT_PATTERN.match(unit)
    if match is None:
        raise InputError(f"malformed parameter unit {unit!r}")
    name, start, stop = match.group("name"), match.group("start"), match.group("stop")
    if start is None:
        return name, None
    if stop is None:
        return name, int(start)
    return name, slice(int(start), int(stop))


def unit_view(data: np.ndarray, selector: RowSelector) -> np.ndarray:
    return data if selector is None else data[selector]


class GradientTape:
    """Ordered record of primitive operations supporting one backward pass"""

    def __init__(self):
        self._records: List[_Record] = []
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        if self._consumed:
            raise StateError("gradient tape already consumed by a backward pass")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], vjp: VJP) -> None:
        if self._consumed:
            raise StateError("cannot record on a consumed gradient tape")
        self._records.append(_Record(out, inputs, vjp))

    def backward(
        self,
        loss: Tensor,
        wanted: Iterable[str],
        params: Optional[Mapping[str, Tensor]] = None,
    ) -> Dict[str, Tensor]:
        """Gradients of a scalar loss for exactly the wanted parameter units.

        Units whose tensor the loss does not depend on receive zeros; their
        shape is taken from ``params`` when the tensor never reached the tape.
        """
        if self._consumed:
            raise StateError("backward called on a consumed gradient tape")
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

        selectors: Dict[str, List[Tuple[str, RowSelector]]] = {}
        for unit in sorted(set(wanted)):
            name, selector = parse_unit(unit)
            selectors.setdefault(name, []).append((unit, selector))

        produced = {id(rec.out) for rec in self._records}
        relevant = set()
        leaves: Dict[str, Tensor] = {}
        for rec in self._records:
            for t in rec.inputs:
                if id(t) not in produced and t.name in selectors:
                    if not t.requires_grad:
                        raise StateError(f"parameter {t.name!r} is not marked requires_grad")
                    relevant.add(id(t))
                    leaves[t.name] = t
            if any(id(t) in relevant for t in rec.inputs):
                relevant.add(id(rec.out))

        grads: Dict[str, np.ndarray] = {}
        adjoints: Dict[int, np.ndarray] = {}
        if id(loss) in relevant:
            adjoints[id(loss)] = np.ones_like(loss.data)

        for rec in reversed(self._records):
            g = adjoints.pop(id(rec.out), None)
            if g is None:
                continue
            needs = tuple(id(t) in relevant for t in rec.inputs)
            input_grads = rec.vjp(g, needs)
            for t, need, gi in zip(rec.inputs, needs, input_grads):
                if not need or gi is None:
                    continue
                if id(t) in produced:
                    dense = gi.dense() if isinstance(gi, RowGradient) else gi
                    prev = adjoints.get(id(t))
                    adjoints[id(t)] = dense if prev is None else prev + dense
                else:
                    _accumulate_leaf(grads, selectors[t.name], gi)

        result: Dict[str, Tensor] = {}
        for name, units in selectors.items():
            base = leaves.get(name)
            if base is None and params is not None:
                base = params.get(name)
            for unit, selector in units:
                if unit in grads:
                    result[unit] = Tensor(grads[unit], name=unit)
                elif base is not None:
                    result[unit] = Tensor(np.zeros_like(unit_view(base.data, selector)), name=unit)
                else:
                    raise StateError(f"wanted parameter {unit!r} is unknown to the tape")

        self._records.clear()
        self._consumed = True
        return result


def _accumulate_leaf(
    grads: Dict[str, np.ndarray],
    units: List[Tuple[str, RowSelector]],
    gi: Union[np.ndarray, RowGradient],
) -> None:
    for unit, selector in units:
        if isinstance(gi, RowGradient):
            part = _select_rows(gi, selector)
        else:
            part = np.array(unit_view(gi, selector), copy=True)
        prev = grads.get(unit)
        grads[unit] = part if prev is None else prev + part


def _select_rows(gi: RowGradient, selector: RowSelector) -> np.ndarray:
    d = gi.table_shape[1:]
    if selector is None:
        return gi.dense()
    if isinstance(selector, int):
        hit = gi.rows == selector
        out = np.zeros(d, dtype=gi.values.dtype)
        for value in gi.values[hit]:
            out += value
        return out
    start, stop = selector.start, selector.stop
    out = np.zeros((stop - start,) + d, dtype=gi.values.dtype)
    hit = (gi.rows >= start) & (gi.rows < stop)
    np.add.at(out, gi.rows[hit] - start, gi.values[hit])
    return out


def _track(out_data: np.ndarray, inputs: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    tape.record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast adjoint back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast"""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g, needs):
        ga = _unbroadcast(np.matmul(g, _swap_last(b.data)), a.shape) if needs[0] else None
        gb = _unbroadcast(np.matmul(_swap_last(a.data), g), b.shape) if needs[1] else None
        return ga, gb

    return _track(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _track(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def vjp(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _track(out, (a, b), vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    c = a.dtype.type(factor)
    return _track(a.data * c, (a,), lambda g, needs: (g * c,))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _track(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _track(np.transpose(a.data, axes), (a,), lambda g, needs: (np.transpose(g, inverse),))


def index(a: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; the adjoint scatters with accumulation"""
    out = np.array(a.data[key], copy=True)
    parts = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (np.ndarray, list)) for k in parts)

    def vjp(g, needs):
        ga = np.zeros_like(a.data)
        if fancy:
            np.add.at(ga, key, g)
        else:
            ga[key] += g
        return (ga,)

    return _track(out, (a,), vjp)


def replace_rows(x: Tensor, positions: Tuple[np.ndarray, ...], rows: Tensor) -> Tensor:
    """Copy of ``x`` with the vectors at ``positions`` replaced by ``rows``.

    ``positions`` indexes all but the last axis of ``x`` and must not repeat.
    """
    out = np.array(x.data, copy=True)
    try:
        out[positions] = rows.data
    except (ValueError, IndexError):
        raise DimensionError(f"replace_rows cannot place rows {rows.shape} into {x.shape}")

    def vjp(g, needs):
        gx = None
        if needs[0]:
            gx = np.array(g, copy=True)
            gx[positions] = 0
        grows = np.array(g[positions], copy=True) if needs[1] else None
        return gx, grows

    return _track(out, (x, rows), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _track(out, (a,), lambda g, needs: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def softmax_rows(t: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction"""
    check_finite(t, "softmax_rows")
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _track(s, (t,), vjp)


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift"""
    if eps <= 0:
        raise InputError(f"layer_norm eps must be positive, got {eps}")
    x = t.data
    n = x.shape[-1]
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def vjp(g, needs):
        gx = ggain = gbias = None
        if needs[0]:
            gxhat = g * gain.data
            gx = (inv / n) * (
                n * gxhat
                - gxhat.sum(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
            )
        if needs[1]:
            ggain = _unbroadcast(g * xhat, gain.shape)
        if needs[2]:
            gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _track(out, (t, gain, bias), vjp)


def gelu(t: Tensor, variant: str = "tanh") -> Tensor:
    """Gaussian-error linear unit; ``tanh`` approximation or exact ``erf`` form"""
    x = t.data
    if variant == "tanh":
        inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x ** 3)
        th = np.tanh(inner)
        out = 0.5 * x * (1.0 + th)
        deriv = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
    elif variant == "erf":
        erf = np.vectorize(math.erf, otypes=[x.dtype])(x / math.sqrt(2.0))
        out = 0.5 * x * (1.0 + erf)
        deriv = 0.5 * (1.0 + erf) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    else:
        raise InputError(f"unknown gelu variant {variant!r}")
    out = out.astype(x.dtype)
    deriv = deriv.astype(x.dtype)
    return _track(out, (t,), lambda g, needs: (g * deriv,))


def dropout(t: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return t
    keep = (rng.random(t.shape) >= p).astype(t.dtype) / t.dtype.type(1.0 - p)
    return _track(t.data * keep, (t,), lambda g, needs: (g * keep,))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the adjoint touches only the gathered rows"""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    bad = ids[(ids < 0) | (ids >= rows)]
    if bad.size:
        raise TokenIndexError(f"token id {int(bad[0])} out of range for embedding table with {rows} rows")
    out = table.data[ids]

    def vjp(g, needs):
        return (RowGradient(ids.reshape(-1), g.reshape(-1, table.shape[1]), table.shape),)

    return _track(out, (table,), vjp)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-softmax probability of each row's target class"""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects n x C logits, got {logits.shape}")
    n, c = logits.shape
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if target.shape[0] != n:
        raise DimensionError(f"cross_entropy got {target.shape[0]} targets for {n} rows")
    bad = target[(target < 0) | (target >= c)]
    if bad.size:
        raise TargetIndexError(f"target class {int(bad[0])} out of range for {c} classes")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    log_probs = x - m - np.log(z)
    rows = np.arange(n)
    loss = np.asarray(-log_probs[rows, target].mean(), dtype=x.dtype)
    probs = e / z

    def vjp(g, needs):
        grad = probs.copy()
        grad[rows, target] -= 1.0
        return (grad * (g / x.dtype.type(n)),)

    return _track(loss, (logits,), vjp)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    """Step count and first/second moments per parameter unit"""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Dict[str, Tensor], AdamWState]:
    """One decoupled-weight-decay Adam update; inputs are left untouched.

    A parameter without a gradient entry is updated with a zero gradient.
    """
    step = state.step + 1
    new_m: Dict[str, np.ndarray] = dict(state.m)
    new_v: Dict[str, np.ndarray] = dict(state.v)
    updated: Dict[str, Tensor] = {}

    for unit, param in params.items():
        p = param.data
        grad = grads.get(unit)
        g = np.zeros_like(p) if grad is None else grad.data.astype(p.dtype)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {unit} has shape {g.shape}, parameter has {p.shape}")
        m_prev = state.m.get(unit)
        v_prev = state.v.get(unit)
        if m_prev is None:
            m_prev = np.zeros_like(p)
            v_prev = np.zeros_like(p)
        elif m_prev.shape != p.shape or v_prev.shape != p.shape:
            raise DimensionError(f"optimizer moments for {unit} have shape {m_prev.shape}, parameter has {p.shape}")

        m = beta1 * m_prev + (1.0 - beta1) * g
        v = beta2 * v_prev + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        new_p = p * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)

        updated[unit] = Tensor(new_p.astype(p.dtype), requires_grad=param.requires_grad, name=param.name)
        new_m[unit] = m.astype(p.dtype)
        new_v[unit] = v.astype(p.dtype)

    return updated, AdamWState(step=step, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def numerical_gradient(
    loss_fn: Callable[[], float],
    data: np.ndarray,
    eps: float = 1e-4,
) -> np.ndarray:
    """Central finite differences of ``loss_fn`` w.r.t. ``data`` (mutated in place and restored)"""
    grad = np.zeros_like(data, dtype=FLOAT64)
    flat = data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = loss_fn()
        flat[i] = original - eps
        minus = loss_fn()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a| + |n|, floor), elementwise"""
    analytic = np.asarray(analytic, dtype=FLOAT64)
    numeric = np.asarray(numeric, dtype=FLOAT64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))

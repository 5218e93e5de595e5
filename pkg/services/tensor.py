"""
Tensor Autodiff Module - Dense tensor numerics với reverse-mode autodiff
Matmul, Conv2D, ReLU, MaxPool, Dropout, Softmax Cross-Entropy trên numpy float64

Every op records a TapeEntry (inputs, output, backward rule) on the
thread-local ComputationTape when any input requires gradients.
backward() replays the tape in reverse and clears it.
"""
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import ConfigurationError, ContractError, DimensionError, LabelRangeError

DTYPE = np.float64


class Tensor:
    """
    n-dimensional float64 array with an optional gradient slot.

    Tensors are immutable once created; parameters change only through
    apply_update_() / assign_() and gradients through zero_grad().
    """

    def __init__(self, data, requires_grad: bool = False, copy: bool = True):
        self.data = np.array(data, dtype=DTYPE, copy=True) if copy else np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._op: Optional[str] = None
        self._tape: Optional["ComputationTape"] = None
        self._generation = -1

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def apply_update_(self, delta: np.ndarray):
        """In-place parameter update: data -= delta"""
        self.data -= delta

    def assign_(self, values: np.ndarray):
        """In-place overwrite (checkpoint restore)"""
        values = np.asarray(values, dtype=DTYPE)
        if values.shape != self.data.shape:
            raise DimensionError(f"assign shape mismatch: {self.shape} vs {values.shape}")
        self.data[...] = values

    def _accumulate(self, grad: np.ndarray):
        grad = np.array(grad, dtype=DTYPE, copy=True).reshape(self.data.shape)
        self.grad = grad if self.grad is None else self.grad + grad

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"


@dataclass
class TapeEntry:
    """One recorded primitive op"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ComputationTape:
    """Append-only record of the current forward pass"""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self.generation = 0

    def record(self, entry: TapeEntry):
        self.entries.append(entry)

    def clear(self):
        self.entries = []
        self.generation += 1

    def __len__(self):
        return len(self.entries)


_state = threading.local()


def current_tape() -> ComputationTape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = ComputationTape()
        _state.tape = tape
    return tape


def reset_tape():
    """Drop any entries left by a forward pass that was never differentiated"""
    current_tape().clear()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Forward evaluation without recording"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _output(op: str, data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    requires = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires, copy=False)
    if requires:
        tape = current_tape()
        out._op = op
        out._tape = tape
        out._generation = tape.generation
        tape.record(TapeEntry(op, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum grad over the axes that broadcasting expanded"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ============== ELEMENTWISE ==============

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}") from exc

    def backward_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _output("add", data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}") from exc

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _output("mul", data, (a, b), backward_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _output("scale", a.data * factor, (a,), lambda g: (g * factor,))


def square(a: Tensor) -> Tensor:
    return _output("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor"""
    return _output("sum", np.array(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _output("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(...))"""
    return reshape(a, (a.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _output("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0"""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return _output("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ============== LINEAR ALGEBRA ==============

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of a (m×k) and b (k×n).

    Backward: dA = dC·Bᵀ, dB = Aᵀ·dC
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} vs {b.shape}")

    def backward_fn(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _output("matmul", a.data @ b.data, (a, b), backward_fn)


# ============== CONVOLUTION & POOLING ==============

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """H' = (H + 2p - k) / stride + 1, division must be exact"""
    span = size + 2 * padding - kernel
    if kernel < 1 or stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid conv geometry kernel={kernel} stride={stride} padding={padding}")
    if span < 0:
        raise ConfigurationError(f"kernel {kernel} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ConfigurationError(
            f"non-integral conv output size: ({size} + 2*{padding} - {kernel}) / {stride}")
    return span // stride + 1


def pool_output_size(size: int, kernel: int, stride: int) -> int:
    """Floor semantics; trailing rows/cols that do not fill a window are dropped"""
    if kernel < 1 or stride < 1:
        raise ConfigurationError(f"invalid pool geometry kernel={kernel} stride={stride}")
    if kernel > size:
        raise ConfigurationError(f"pool kernel {kernel} larger than input {size}")
    return (size - kernel) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Read-only strided view (N, C, H', W', kh, kw) over a contiguous array"""
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(xp.shape[0], xp.shape[1], out_h, out_w, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation.

    Args:
        x: Input (N, C, H, W)
        w: Kernels (F, C, kh, kw)
        b: Optional bias (F,)
        stride: Window step
        padding: Zero padding on every side

    Returns:
        Tensor (N, F, H', W')
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape} vs kernel {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    out_h = conv_output_size(h, kh, stride, padding)
    out_w = conv_output_size(wd, kw, stride, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = np.ascontiguousarray(x.data)
    win = _windows(xp, kh, kw, stride, out_h, out_w)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        grad_x = grad_w = grad_b = None
        if w.requires_grad:
            grad_w = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            grad_b = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dwin = np.tensordot(g, w.data, axes=([1], [0]))  # (N, H', W', C, kh, kw)
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                        dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grad_x = dxp[:, :, padding:padding + h, padding:padding + wd]
        return grad_x, grad_w, grad_b

    inputs = (x, w) if b is None else (x, w, b)
    return _output("conv2d", out, inputs, lambda g: backward_fn(g)[:len(inputs)])


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max over kernel×kernel windows; gradient routed to the first maximum"""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d needs (N, C, H, W), got {x.shape}")
    n, c, h, wd = x.shape
    out_h = pool_output_size(h, kernel, stride)
    out_w = pool_output_size(wd, kernel, stride)
    win = _windows(np.ascontiguousarray(x.data), kernel, kernel, stride, out_h, out_w)
    flat = win.reshape(n, c, out_h, out_w, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        grad = np.zeros(x.shape, dtype=DTYPE)
        rows = np.arange(out_h).reshape(1, 1, out_h, 1) * stride + arg // kernel
        cols = np.arange(out_w).reshape(1, 1, 1, out_w) * stride + arg % kernel
        batch = np.arange(n).reshape(n, 1, 1, 1)
        chans = np.arange(c).reshape(1, c, 1, 1)
        np.add.at(grad, (batch, chans, rows, cols), g)
        return (grad,)

    return _output("maxpool2d", np.ascontiguousarray(out), (x,), backward_fn)


# ============== LOSS ==============

def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n:
        raise DimensionError(f"labels shape {labels.shape} does not match batch of {n}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelRangeError(f"labels must be integer class indices, got {labels.dtype}")
    labels = labels.astype(np.int64)
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        index = int(np.flatnonzero(bad)[0])
        raise LabelRangeError(f"label {labels[index]} at position {index} outside [0, {num_classes})")
    return labels


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax via max-subtracted log-sum-exp"""
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_per_sample(logits: np.ndarray, labels) -> np.ndarray:
    """−log softmax(logits)[label] per row (no tape)"""
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(logits.shape[0]), labels]


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """
    Softmax cross-entropy loss.

    Args:
        logits: (N, num_classes)
        labels: N class indices in [0, num_classes)
        reduction: "mean" (training) or "sum" (attack input gradients)

    Returns:
        Scalar tensor
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, num_classes), got {logits.shape}")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    n = logits.shape[0]
    labels = _check_labels(labels, n, logits.shape[1])
    log_probs = log_softmax(logits.data)
    rows = np.arange(n)
    per_sample = -log_probs[rows, labels]
    value = per_sample.mean() if reduction == "mean" else per_sample.sum()

    def backward_fn(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        factor = g / n if reduction == "mean" else g
        return (grad * factor,)

    return _output("softmax_cross_entropy", np.array(value), (logits,), backward_fn)


# ============== BACKWARD ==============

def backward(loss: Tensor) -> None:
    """
    Populate .grad on every requires-grad leaf reachable from loss.

    Gradients accumulate into existing .grad slots; the tape is cleared.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    try:
        if not loss.requires_grad:
            return
        if loss.is_leaf:
            loss._accumulate(np.ones_like(loss.data))
            return
        if loss._tape is not tape or loss._generation != tape.generation:
            raise ContractError("loss was not produced on the current tape")

        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(tape.entries):
            upstream = pending.pop(id(entry.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    tensor._accumulate(grad)
                else:
                    key = id(tensor)
                    pending[key] = grad if key not in pending else pending[key] + grad
    finally:
        tape.clear()


# ============== GRADIENT CHECK ==============

@dataclass
class GradCheckReport:
    """Max relative error per parameter tensor (central differences)"""
    h: float
    tolerance: float
    max_relative_error: Dict[str, float] = field(default_factory=dict)
    checked: Dict[str, int] = field(default_factory=dict)
    skipped: Dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_relative_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "parameter": list(self.max_relative_error),
            "max_rel_err": list(self.max_relative_error.values()),
            "checked": [self.checked[k] for k in self.max_relative_error],
            "skipped": [self.skipped[k] for k in self.max_relative_error],
        })


GRADCHECK_FLOOR = 1e-6  # denominator floor for relative error
GRADCHECK_REFINE = (10.0, 100.0)  # step divisors tried when an entry fails at h


def _central_difference(model, x, y, flat: np.ndarray, i: int, h: float) -> float:
    original = flat[i]
    flat[i] = original + h
    plus = model.loss(x, y).item()
    flat[i] = original - h
    minus = model.loss(x, y).item()
    flat[i] = original
    return (plus - minus) / (2.0 * h)


def _relative_error(a: float, numeric: float) -> float:
    return abs(a - numeric) / max(abs(a), abs(numeric), GRADCHECK_FLOOR)


def finite_diff_check(model, batch, h: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """
    Compare analytic parameter gradients with central finite differences.

    Args:
        model: Object exposing named_parameters() -> {name: Tensor} and
               loss(x, y) -> scalar Tensor (deterministic)
        batch: (x, y) passed to model.loss
        h: Finite-difference step
        tolerance: Pass threshold on max relative error

    Returns:
        GradCheckReport; entries whose analytic gradient is exactly zero and
        whose numeric estimate is below the floor are skipped (dead units).
        An entry over tolerance at h is measured again at h/10 and h/100 and
        keeps its smallest error (steps that straddle a ReLU or max-pool
        switch).
    """
    if h <= 0:
        raise ContractError(f"finite difference step must be positive, got {h}")
    x, y = batch
    params = model.named_parameters()
    for p in params.values():
        p.zero_grad()
    reset_tape()
    backward(model.loss(x, y))
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    report = GradCheckReport(h=h, tolerance=tolerance)
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            grad = analytic[name].reshape(-1)
            worst, checked, skipped = 0.0, 0, 0
            for i in range(flat.size):
                numeric = _central_difference(model, x, y, flat, i, h)
                a = float(grad[i])
                if a == 0.0 and abs(numeric) < GRADCHECK_FLOOR:
                    skipped += 1
                    continue
                rel = _relative_error(a, numeric)
                for divisor in GRADCHECK_REFINE:
                    if rel < tolerance:
                        break
                    rel = min(rel, _relative_error(a, _central_difference(model, x, y, flat, i, h / divisor)))
                worst = max(worst, rel)
                checked += 1
            report.max_relative_error[name] = worst
            report.checked[name] = checked
            report.skipped[name] = skipped
    for p in params.values():
        p.zero_grad()
    return report

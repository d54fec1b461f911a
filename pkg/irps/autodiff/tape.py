"""
Tensors and the recording tape

Primitives record (name, inputs, output, vjp) on the tape active in the current
context; `backward` replays the records in exact reverse order.
"""

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import AutodiffError

_ACTIVE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("irps_tape", default=None)


class Tensor:
    """Dense float64 array with a lazily allocated gradient buffer"""

    __slots__ = ("data", "_grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self._grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    """One recorded primitive call"""
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of primitive calls; use as a context manager to activate"""
    nodes: list[Node] = field(default_factory=list)
    _token: Optional[contextvars.Token] = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise AutodiffError("tape is already active")
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp) -> None:
        self.nodes.append(Node(op, inputs, output, vjp))

    def tensors(self):
        seen = set()
        for node in self.nodes:
            for t in node.inputs + (node.output,):
                if id(t) not in seen:
                    seen.add(id(t))
                    yield t

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def backward(self, loss: Tensor, seed_grad: Optional[np.ndarray] = None) -> None:
        backward(self, loss, seed_grad)


def current_tape() -> Optional[Tape]:
    return _ACTIVE.get()


def record(op: str, inputs: tuple[Tensor, ...], data: np.ndarray, vjp) -> Tensor:
    """Wrap a primitive's forward value; recorded only when some input needs a gradient"""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _ACTIVE.get()
    if needs and tape is not None:
        tape.record(op, inputs, out, vjp)
    return out


def backward(tape: Tape, loss: Tensor, seed_grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(t) into every tensor recorded on the tape

    Raises:
        AutodiffError: loss is not scalar or was not produced on this tape
    """
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    last = None
    for k in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[k].output is loss:
            last = k
            break
    if last is None:
        raise AutodiffError("loss was not recorded on this tape")

    seed = np.ones_like(loss.data) if seed_grad is None else np.asarray(seed_grad, dtype=np.float64)
    loss.accumulate(seed.reshape(loss.shape))
    for node in reversed(tape.nodes[: last + 1]):
        if node.output._grad is None:
            continue
        grads = node.vjp(node.output._grad)
        for t, g in zip(node.inputs, grads):
            if g is not None and t.requires_grad:
                t.accumulate(g)

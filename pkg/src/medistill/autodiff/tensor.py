"""Dense tensors with a reverse-mode tape.

Every differentiable op builds its output with :func:`make_result`, which
records the parents and a closure mapping the output gradient to one
gradient per parent.  :meth:`Tensor.backward` walks that graph in reverse
topological order and accumulates into leaf ``.grad`` buffers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from medistill.errors import ContractError

NUMERIC_MODES = {"verify": np.float64, "train": np.float32}

_dtype = np.float64
_grad_enabled = True


def set_mode(mode: str) -> None:
    """Select the floating point width used for newly created tensors."""
    global _dtype
    if mode not in NUMERIC_MODES:
        raise ValueError(f"unknown numeric mode {mode!r}; expected one of {sorted(NUMERIC_MODES)}")
    _dtype = NUMERIC_MODES[mode]


def get_mode() -> str:
    return "verify" if _dtype == np.float64 else "train"


def get_dtype():
    return _dtype


@contextlib.contextmanager
def numeric_mode(mode: str) -> Iterator[None]:
    previous = get_mode()
    set_mode(mode)
    try:
        yield
    finally:
        set_mode(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = ""

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, no history."""
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators delegate to the functional module ------------------------
    def __add__(self, other):
        from medistill.autodiff import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from medistill.autodiff import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from medistill.autodiff import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from medistill.autodiff import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from medistill.autodiff import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from medistill.autodiff import functional as F
        return F.div(other, self)

    def __neg__(self):
        from medistill.autodiff import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from medistill.autodiff import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from medistill.autodiff import functional as F
        return F.getitem(self, index)

    def reshape(self, *shape):
        from medistill.autodiff import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from medistill.autodiff import functional as F
        return F.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from medistill.autodiff import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from medistill.autodiff import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    # -- reverse pass --------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad.

        Calling it twice without clearing grads adds the contributions.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that is not on the tape")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str = "") -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)

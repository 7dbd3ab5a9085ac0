"""
Dense linear algebra, gradient recording and parameter storage.

Everything runs in float64 on the CPU. Gradients come from a GradTape that
records a scalar loss over leaves copied out of a ParamStore; every analytic
gradient in the package is checked against central differences with
finite_diff_check.
"""

import copy
import hashlib
import logging
from collections import OrderedDict
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import torch

from labelnav.errors import (DimensionError, FrozenParametersError, GradientKeyError,
                             NonDeterministicLossError)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
GROUP_TAGS = ('alpha', 'beta', 'psi')

Params = Dict[str, torch.Tensor]


def matrix(data, rows: Optional[int] = None, cols: Optional[int] = None) -> torch.Tensor:
    """
    Build a finite float64 matrix.

    Args:
        data: nested sequence, flat sequence (with rows/cols) or tensor

    Returns:
        2-D tensor
    """
    t = torch.as_tensor(data, dtype=DTYPE).clone()
    if rows is not None and cols is not None:
        if t.numel() != rows * cols:
            raise DimensionError(f"{t.numel()} values cannot fill a {rows}x{cols} matrix")
        t = t.reshape(rows, cols)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if t.dim() != 2:
        raise DimensionError(f"Expected a matrix, got {t.dim()} dimensions")
    if not torch.isfinite(t).all():
        raise ValueError("Matrix entries must be finite")
    return t


def identity(n: int) -> torch.Tensor:
    return torch.eye(n, dtype=DTYPE)


def zeros(*shape: int) -> torch.Tensor:
    return torch.zeros(*shape, dtype=DTYPE)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product; the last axis of a must match the first axis of b."""
    if a.dim() < 1 or b.dim() != 2:
        raise DimensionError(f"matmul expects a matrix right operand, got {tuple(b.shape)}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"Cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softmax(v: torch.Tensor) -> torch.Tensor:
    # torch subtracts the running max before exponentiating
    return torch.softmax(v, dim=-1)


def uniform_init(shape: Tuple[int, ...], generator: torch.Generator) -> torch.Tensor:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] with fan_in = shape[0]."""
    bound = 1.0 / float(shape[0]) ** 0.5
    return (torch.rand(shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound


class ParamStore:
    """
    Named parameter groups.

    Each parameter belongs to one group tag (alpha, beta or psi) and has a
    name unique across the store. Shapes are fixed once a parameter is added.
    """

    def __init__(self, name: str = 'params'):
        self.name = name
        self._params: 'OrderedDict[str, torch.Tensor]' = OrderedDict()
        self._groups: Dict[str, str] = {}
        self.frozen = False

    def add(self, group: str, name: str, shape: Tuple[int, ...],
            generator: Optional[torch.Generator] = None,
            value: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Register a parameter, either seeded-uniform or from an explicit value.
        """
        if group not in GROUP_TAGS:
            raise ValueError(f"Unknown parameter group '{group}'")
        if name in self._params:
            raise ValueError(f"Parameter '{name}' already registered")
        if value is None:
            if generator is None:
                raise ValueError("Either a generator or an explicit value is required")
            value = uniform_init(tuple(shape), generator)
        value = torch.as_tensor(value, dtype=DTYPE).clone().reshape(shape)
        self._params[name] = value
        self._groups[name] = group
        return value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self, groups: Optional[Iterable[str]] = None) -> List[str]:
        if groups is None:
            return list(self._params)
        wanted = set(groups)
        return [n for n in self._params if self._groups[n] in wanted]

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def group(self, tag: str) -> Params:
        return OrderedDict((n, self._params[n]) for n in self.names([tag]))

    def items(self) -> Iterator[Tuple[str, torch.Tensor]]:
        return iter(self._params.items())

    def as_dict(self) -> Params:
        return OrderedDict(self._params)

    def copy(self, groups: Optional[Iterable[str]] = None, name: Optional[str] = None) -> 'ParamStore':
        """Deep copy of the selected groups; the copy never aliases this store."""
        out = ParamStore(name or f'{self.name}-copy')
        for n in self.names(groups):
            out.add(self._groups[n], n, tuple(self._params[n].shape), value=self._params[n].detach().clone())
        return out

    def assign(self, other: 'ParamStore', groups: Optional[Iterable[str]] = None):
        """Overwrite values from another store with the same names and shapes."""
        self._check_writable()
        for n in other.names(groups):
            if n not in self._params or self._params[n].shape != other[n].shape:
                raise DimensionError(f"Cannot assign parameter '{n}'")
            self._params[n] = other[n].detach().clone()

    def freeze(self):
        self.frozen = True

    def _check_writable(self):
        if self.frozen:
            raise FrozenParametersError(f"Parameter store '{self.name}' is frozen")

    def update(self, name: str, value: torch.Tensor):
        self._check_writable()
        if value.shape != self._params[name].shape:
            raise DimensionError(f"Shape change for '{name}'")
        self._params[name] = value.detach().clone()

    def digest(self, groups: Optional[Iterable[str]] = None) -> str:
        """SHA-256 over names, shapes and raw float64 bytes, in name order."""
        h = hashlib.sha256()
        for n in sorted(self.names(groups)):
            t = self._params[n].detach().contiguous()
            h.update(n.encode())
            h.update(repr(tuple(t.shape)).encode())
            h.update(t.numpy().tobytes())
        return h.hexdigest()

    def to_dict(self) -> Dict[str, Dict]:
        """Serializable form; float repr round-trips bit-exactly."""
        return {
            n: {
                'group': self._groups[n],
                'shape': list(t.shape),
                'data': [float(x) for x in t.detach().reshape(-1).tolist()],
            }
            for n, t in self._params.items()
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Dict], name: str = 'params') -> 'ParamStore':
        store = cls(name)
        for n, entry in payload.items():
            store.add(entry['group'], n, tuple(entry['shape']),
                      value=torch.tensor(entry['data'], dtype=DTYPE))
        return store


class GradTape:
    """
    Records a scalar loss built from leaves of a ParamStore.

    Leaves of the watched groups require gradients; every other parameter is
    exposed as a detached constant so one params dict feeds the whole forward
    pass.

    Example:
        >>> tape = GradTape(store, groups=['alpha'])
        >>> loss = score(tape.params)
        >>> grads = tape.gradient(loss)
    """

    def __init__(self, store: ParamStore, groups: Optional[Iterable[str]] = None,
                 names: Optional[Sequence[str]] = None):
        self.store = store
        if names is None:
            names = store.names(groups)
        self.watched = list(names)
        self.params: Params = OrderedDict()
        for n, t in store.items():
            leaf = t.detach().clone()
            if n in self.watched:
                leaf.requires_grad_(True)
            self.params[n] = leaf

    def gradient(self, loss: torch.Tensor) -> Params:
        """Exact gradients of a scalar loss for every watched parameter."""
        if loss.numel() != 1:
            raise DimensionError("GradTape.gradient needs a scalar loss")
        leaves = [self.params[n] for n in self.watched]
        if not loss.requires_grad:
            return OrderedDict((n, torch.zeros_like(self.params[n])) for n in self.watched)
        grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
        return OrderedDict(
            (n, g.detach() if g is not None else torch.zeros_like(self.params[n]))
            for n, g in zip(self.watched, grads)
        )


def sgd_step(store: ParamStore, grads: Params, lr: float,
             groups: Optional[Iterable[str]] = None,
             names: Optional[Sequence[str]] = None) -> ParamStore:
    """
    In-place step p <- p - lr * g over the selected groups (or names).

    Raises:
        GradientKeyError: if grads is not keyed exactly like the parameters
    """
    names = store.names(groups) if names is None else list(names)
    missing = [n for n in names if n not in grads]
    extra = [n for n in grads if n not in names]
    if missing or extra:
        raise GradientKeyError(f"Gradient keys mismatch: missing={missing} unexpected={extra}")
    for n in names:
        g = grads[n]
        if g.shape != store[n].shape:
            raise DimensionError(f"Gradient for '{n}' has shape {tuple(g.shape)}")
        store.update(n, store[n] - lr * g)
    return store


def add_grads(total: Optional[Params], grads: Params) -> Params:
    """Accumulate gradient dicts in a fixed key order."""
    if total is None:
        return OrderedDict((n, g.clone()) for n, g in grads.items())
    for n, g in grads.items():
        total[n] = total[n] + g
    return total


def finite_diff_check(loss_fn: Callable[[Params], torch.Tensor], store: ParamStore,
                      eps: float = 1e-5, groups: Optional[Iterable[str]] = None) -> float:
    """
    Compare tape gradients against central differences.

    Args:
        loss_fn: maps a params dict to a scalar tensor; must be deterministic
        store: parameters at which gradients are checked
        eps: perturbation, in [1e-6, 1e-4]
        groups: groups to check (all by default)

    Returns:
        max |g_analytic - g_fd| / max(1, |g_fd|) over every checked entry
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must be in [1e-6, 1e-4], got {eps}")

    base = {n: t.detach().clone() for n, t in store.items()}
    first = float(loss_fn(copy.copy(base)))
    second = float(loss_fn(copy.copy(base)))
    if first != second:
        raise NonDeterministicLossError(f"Loss changed between identical calls: {first} vs {second}")

    tape = GradTape(store, groups)
    analytic = tape.gradient(loss_fn(tape.params))

    worst = 0.0
    with torch.no_grad():
        for n in tape.watched:
            flat = base[n].reshape(-1)
            for i in range(flat.numel()):
                plus = dict(base)
                minus = dict(base)
                p = flat.clone()
                p[i] += eps
                plus[n] = p.reshape(base[n].shape)
                m = flat.clone()
                m[i] -= eps
                minus[n] = m.reshape(base[n].shape)
                fd = (float(loss_fn(plus)) - float(loss_fn(minus))) / (2.0 * eps)
                ga = float(analytic[n].reshape(-1)[i])
                worst = max(worst, abs(ga - fd) / max(1.0, abs(fd)))
    logger.debug(f"finite_diff_check max relative error {worst:.3e}")
    return worst

"""Small differentiable-tensor layer on top of torch autograd.

The model and the differentiable solver only need a handful of primitives;
they are collected here so the rest of the package never touches autograd
directly. Float64 is the default so gradient checks hold tightly.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

DEFAULT_DTYPE = torch.float64
LN_EPS = 1e-5

Tensor = torch.Tensor

__all__ = [
    "Tensor",
    "ParamSet",
    "as_tensor",
    "contract",
    "softmax",
    "layer_norm",
    "gelu",
    "backward",
    "finite_difference_grad",
    "gradient_check",
]


def as_tensor(x, dtype: torch.dtype = DEFAULT_DTYPE) -> Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


class ParamSet(OrderedDict):
    """Named parameters with stable ordering (insertion order)."""

    def __setitem__(self, name: str, value):
        if not isinstance(name, str) or not name:
            raise KeyError("parameter names must be non-empty strings")
        super().__setitem__(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = as_tensor(value).clone()
        self[name] = t
        return t

    def tracked(self) -> "ParamSet":
        """Copy whose tensors record gradients."""
        return ParamSet((k, v.detach().clone().requires_grad_(True)) for k, v in self.items())

    def detached(self) -> "ParamSet":
        return ParamSet((k, v.detach().clone()) for k, v in self.items())

    def to(self, dtype: torch.dtype) -> "ParamSet":
        return ParamSet((k, v.detach().to(dtype)) for k, v in self.items())

    def numel(self) -> int:
        return sum(v.numel() for v in self.values())

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.items()}


def contract(a: Tensor, b: Tensor, axes) -> Tensor:
    """Generalized tensor contraction.

    ``axes`` is either an int (last ``axes`` dims of ``a`` with first of ``b``),
    a pair of axis lists, or an einsum subscript string.
    """
    if isinstance(axes, str):
        return torch.einsum(axes, a, b)
    if isinstance(axes, int):
        pa = list(range(a.ndim - axes, a.ndim))
        pb = list(range(axes))
    else:
        pa, pb = (list(np.atleast_1d(x)) for x in axes)
    for i, j in zip(pa, pb):
        if a.shape[i] != b.shape[j]:
            raise ValueError(f"cannot pair axis {i} (extent {a.shape[i]}) with axis {j} (extent {b.shape[j]})")
    return torch.tensordot(a, b, dims=(pa, pb))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: Tensor, axis: int = -1, gain: Tensor | None = None,
               bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    if x.shape[axis] < 2:
        raise ValueError("layer norm needs at least two entries along the axis")
    mean = x.mean(dim=axis, keepdim=True)
    xc = x - mean
    var = (xc * xc).mean(dim=axis, keepdim=True)
    y = xc / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def gelu(x: Tensor) -> Tensor:
    return torch.nn.functional.gelu(x)


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for every named parameter.

    Parameters that do not influence the loss receive zeros.
    """
    if loss.ndim != 0:
        raise ValueError("loss must be a scalar")
    names = [k for k, v in params.items() if v.requires_grad]
    grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
    out = {}
    for k, v in params.items():
        out[k] = torch.zeros_like(v)
    for k, g in zip(names, grads):
        if g is not None:
            out[k] = g.detach()
    return out


def finite_difference_grad(fn: Callable[[Tensor], Tensor], x: Tensor, h: float | None = None,
                           indices: Iterable[int] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn`` at ``x`` (flattened entries in ``indices``)."""
    x = x.detach().clone().to(torch.float64)
    flat = x.reshape(-1)
    scale = max(float(flat.abs().max()), 1e-3) if flat.numel() else 1.0
    step = h if h is not None else 1e-6 * scale
    idx = list(range(flat.numel())) if indices is None else list(indices)
    out = np.zeros(len(idx))
    with torch.no_grad():
        for i, j in enumerate(idx):
            orig = flat[j].item()
            flat[j] = orig + step
            fp = float(fn(x))
            flat[j] = orig - step
            fm = float(fn(x))
            flat[j] = orig
            out[i] = (fp - fm) / (2 * step)
    return out


def gradient_check(fn: Callable[[Tensor], Tensor], x: Tensor, n_probe: int | None = None,
                   seed: int = 0, h: float | None = None) -> float:
    """Relative error between reverse-mode and finite-difference gradients."""
    xt = x.detach().clone().to(torch.float64).requires_grad_(True)
    (g,) = torch.autograd.grad(fn(xt), xt, allow_unused=True)
    g = np.zeros(x.numel()) if g is None else g.detach().reshape(-1).numpy()
    idx = None
    if n_probe is not None and n_probe < x.numel():
        idx = np.random.default_rng(seed).choice(x.numel(), n_probe, replace=False)
    fd = finite_difference_grad(fn, x, h=h, indices=idx)
    ad = g if idx is None else g[idx]
    denom = max(np.linalg.norm(fd), np.linalg.norm(ad), 1e-300)
    return float(np.linalg.norm(ad - fd) / denom)

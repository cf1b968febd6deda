"""Field-level entry points.

Thin wrappers that take and return :class:`SemField` / :class:`GridField`
objects and run the batched blocks of :mod:`network` on a batch of one.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch

from ..basis import GridField, SemField, SemMesh
from .config import ModelConfig
from .network import (
    AttentionMask,
    ConvOperator,
    SpectralElementTransformer,
    rope_angles,
    rope_tensor,
    sem_conv_tensor,
)

__all__ = ["sem_conv", "rope_rotate", "sem_attn", "les_layer", "sgs_layer", "forward", "model_for"]


@lru_cache(maxsize=16)
def model_for(config: ModelConfig) -> SpectralElementTransformer:
    return SpectralElementTransformer(config)


def _batch(f: SemField) -> torch.Tensor:
    if f.representation != "nodal":
        raise ValueError("expected a nodal field")
    return torch.from_numpy(np.ascontiguousarray(f.values, dtype=np.float64)).unsqueeze(0)


def _unbatch(mesh: SemMesh, x: torch.Tensor) -> SemField:
    return SemField(mesh, x[0].detach().numpy())


def sem_conv(field: SemField, kernels, s: float, m_k: int | None = None) -> SemField:
    """Windowed Fourier-kernel convolution summed over axes.

    ``kernels`` is complex with shape ``[m_k, D, C_out, C_in]``.
    """
    k = np.asarray(kernels)
    if k.ndim != 4 or k.shape[1] != field.mesh.ndim or k.shape[3] != field.channels:
        raise ValueError(f"kernel shape {k.shape} incompatible with a {field.mesh.ndim}D field "
                         f"of {field.channels} channels")
    m_k = k.shape[0] if m_k is None else m_k
    op = ConvOperator(field.mesh, s, m_k)
    re = torch.from_numpy(np.ascontiguousarray(k.real[:m_k], dtype=np.float64))
    im = torch.from_numpy(np.ascontiguousarray(k.imag[:m_k], dtype=np.float64))
    return _unbatch(field.mesh, sem_conv_tensor(_batch(field), re, im, op))


def rope_rotate(field: SemField) -> SemField:
    D, C = field.mesh.ndim, field.channels
    if C % (2 * D):
        raise ValueError(f"channel count {C} not divisible by 2*ndim = {2 * D}")
    angles = rope_angles(field.mesh, C)
    return _unbatch(field.mesh, rope_tensor(_batch(field), angles))


def sem_attn(field: SemField, params, layer: int, config: ModelConfig,
             mask: AttentionMask | None = None) -> SemField:
    return _unbatch(field.mesh, model_for(config).sem_attn(_batch(field), params, layer, mask))


def les_layer(field: SemField, params, layer: int, config: ModelConfig,
              mask: AttentionMask | None = None) -> SemField:
    return _unbatch(field.mesh, model_for(config).les_layer(_batch(field), params, layer, mask))


def sgs_layer(u: SemField, ubar: SemField | None, params, layer: int, config: ModelConfig) -> SemField:
    model = model_for(config)
    les = None if ubar is None else _batch(ubar)
    return _unbatch(u.mesh, model.sgs_layer(_batch(u), les, params, layer))


def forward(mode: str, u_t: GridField, u_star: GridField | None, config: ModelConfig, params) -> GridField:
    """Grid-to-grid prediction for one snapshot."""
    if mode == "correction" and u_star is None:
        raise ValueError("correction mode needs the coarse-solver output u_star")
    for g in (u_t, u_star):
        if g is not None and not np.allclose(g.lengths, config.sgs_mesh.lengths):
            raise ValueError(f"grid domain {g.lengths} does not match model domain {config.sgs_mesh.lengths}")
    model = model_for(config)

    def t(g):
        return None if g is None else torch.from_numpy(np.asarray(g.values, dtype=np.float64)).unsqueeze(0)

    with torch.no_grad():
        out = model.apply(params, t(u_t), t(u_star), mode)
    return GridField(out[0].numpy(), u_t.lengths, time=u_t.time, channels=u_t.channels)

"""Two-stream spectral-element transformer.

The SGS stream carries full-resolution nodal features and is updated by
windowed SEM convolutions; the LES stream carries spectrally truncated
features (``k_max`` nodes per axis) mixed across elements by attention that
acts independently on each local coordinate. LES features are injected
into the SGS stream at every layer (one way only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch

from .. import tensor as tc
from ..basis import SemMesh
from .config import ModelConfig
from .operators import (
    apply_axis_transfer,
    apply_mode_matrix,
    conv_weights,
    grid_to_nodes_matrix,
    nodes_to_grid_matrix,
    roll_gather,
    truncation_matrix,
    upsample_matrix,
    window_offsets,
)

__all__ = [
    "AttentionMask",
    "build_attention_mask",
    "ConvOperator",
    "SpectralElementTransformer",
    "init_params",
    "sem_conv_tensor",
    "rope_tensor",
    "rope_angles",
    "rope_angles_at",
    "attention_tensor",
    "ffn",
    "DivergenceError",
]

KERNEL_INIT = 1e-7


class DivergenceError(FloatingPointError):
    """Raised when a forward pass produces non-finite values."""


# ---------------------------------------------------------------------------
# attention windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionMask:
    """Axis-wise periodic window of ``window`` elements around each token.

    Odd windows are centred (``window // 2`` each side); even windows take
    one more element on the left (offsets ``-w/2 .. w/2 - 1``).
    """

    elements: tuple[int, ...]
    window: int

    @property
    def offsets(self) -> np.ndarray:
        w = self.window
        return np.arange(-(w // 2), w - w // 2)

    @property
    def is_full(self) -> bool:
        return all(self.window == n for n in self.elements)

    def dense(self) -> np.ndarray:
        """Boolean ``[T, T]`` matrix over row-major flattened element indices."""
        grids = np.meshgrid(*[np.arange(n) for n in self.elements], indexing="ij")
        idx = np.stack([g.reshape(-1) for g in grids], -1)  # [T, D]
        ok = np.ones((len(idx), len(idx)), dtype=bool)
        off = set(int(o) for o in self.offsets)
        for a, n in enumerate(self.elements):
            diff = (idx[None, :, a] - idx[:, None, a]) % n
            allowed = np.zeros(n, dtype=bool)
            for o in off:
                allowed[o % n] = True
            ok &= allowed[diff]
        return ok


def build_attention_mask(mesh: SemMesh, window: int) -> AttentionMask:
    if any(not 1 <= window <= n for n in mesh.elements):
        raise ValueError(f"attention window {window} must lie in [1, {min(mesh.elements)}]")
    return AttentionMask(mesh.elements, int(window))


# ---------------------------------------------------------------------------
# primitive blocks on batched tensors
# ---------------------------------------------------------------------------


class ConvOperator:
    """Per-axis windowed Fourier-kernel convolution on one mesh."""

    def __init__(self, mesh: SemMesh, s: float, m_k: int):
        if s > min(mesh.lengths):
            raise ValueError("kernel window larger than the domain")
        self.mesh, self.s, self.m_k = mesh, float(s), int(m_k)
        self.axes = []
        for a in range(mesh.ndim):
            offsets, A_cos, A_sin = conv_weights(mesh.kind, mesh.modes, mesh.cell_size[a], self.s,
                                                 self.m_k, mesh.elements[a])
            self.axes.append((offsets, torch.from_numpy(A_cos), torch.from_numpy(A_sin)))

    def kernel_matrix(self, axis: int, k_re: torch.Tensor, k_im: torch.Tensor) -> torch.Tensor:
        """Dense operator ``[J*M*C_in, M*C_out]`` for one axis."""
        _, A_cos, A_sin = self.axes[axis]
        A_cos, A_sin = A_cos.to(k_re.dtype), A_sin.to(k_re.dtype)
        # k: [m, C_out, C_in]; A: [m, J, n, n']
        K = torch.einsum("mjnp,moi->jpino", A_cos, k_re) - torch.einsum("mjnp,moi->jpino", A_sin, k_im)
        J, M = A_cos.shape[1], A_cos.shape[2]
        return K.reshape(J * M * k_re.shape[2], M * k_re.shape[1])


# working-set size (elements) above which large fields are processed in slabs
_SLAB = 1 << 19


def _slabs(fn, x: torch.Tensor, dim: int) -> torch.Tensor:
    """``fn`` applied to slabs of ``x`` along ``dim``; ``fn`` must act independently along it."""
    n = x.shape[dim]
    pieces = min(n, -(-x.numel() // _SLAB))
    if pieces <= 1:
        return fn(x)
    step = -(-n // pieces)
    return torch.cat([fn(x.narrow(dim, s, min(step, n - s))) for s in range(0, n, step)], dim)


def _conv_axis(x: torch.Tensor, offsets, K: torch.Tensor) -> torch.Tensor:
    g = roll_gather(x, offsets, x.ndim - 3)  # [..., N, J, M, C]
    shape = g.shape
    y = g.reshape(*shape[:-3], -1) @ K
    return y.reshape(*shape[:-4], shape[-4], shape[-2], -1)  # [..., N, M, C_out]


def sem_conv_tensor(u: torch.Tensor, k_re: torch.Tensor, k_im: torch.Tensor, op: ConvOperator) -> torch.Tensor:
    """Sum over axes of 1D windowed convolutions; ``k_*`` have shape ``[m, D, C_out, C_in]``."""
    D = op.mesh.ndim
    out = None
    for a in range(D):
        offsets = op.axes[a][0]
        K = op.kernel_matrix(a, k_re[:, a], k_im[:, a])
        x = torch.movedim(u, (1 + a, 1 + D + a), (-3, -2))  # [..., N, M, C]
        # any other element axis is untouched by this 1D convolution
        y = _slabs(lambda t: _conv_axis(t, offsets, K), x, 1) if D > 1 else _conv_axis(x, offsets, K)
        y = torch.movedim(y, (-3, -2), (1 + a, 1 + D + a))
        out = y if out is None else out + y
    return out


def _ffn(u, w1, b1, w2, b2):
    return tc.gelu(u @ w1 + b1) @ w2 + b2


def ffn(u: torch.Tensor, p, prefix: str) -> torch.Tensor:
    w = [p[prefix + k] for k in (".w1", ".b1", ".w2", ".b2")]
    return _slabs(lambda t: _ffn(t, *w), u, 1)


def rope_angles_at(points: np.ndarray, head_dim: int, strict: bool = True) -> torch.Tensor:
    """Rotation angles ``[..., head_dim // 2]`` for global coordinates ``points[..., D]``.

    The channel pairs are split evenly across axes; pair ``k`` of an axis
    group turns with integer frequency ``k + 1``. With ``strict=False`` a
    head size not divisible by ``2 D`` is allowed and the leftover pairs
    stay unrotated.
    """
    points = np.asarray(points, dtype=np.float64)
    D = points.shape[-1]
    if head_dim % 2 or (strict and head_dim % (2 * D)):
        raise ValueError(f"head_dim {head_dim} not divisible by 2*ndim = {2 * D}")
    freq = np.arange(1, head_dim // (2 * D) + 1)
    ang = np.concatenate([points[..., a:a + 1] * freq for a in range(D)], axis=-1)
    pad = head_dim // 2 - ang.shape[-1]
    if pad:
        ang = np.concatenate([ang, np.zeros(ang.shape[:-1] + (pad,))], axis=-1)
    return torch.from_numpy(ang)


def rope_angles(mesh: SemMesh, head_dim: int, strict: bool = True) -> torch.Tensor:
    """Angles ``[N.., M.., head_dim // 2]`` at the collocation nodes of ``mesh``."""
    return rope_angles_at(mesh.coords(), head_dim, strict)


def rope_tensor(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotate channel pairs ``(2k, 2k+1)`` of ``x[..., head_dim]`` by ``angles[..., k]``."""
    cos, sin = torch.cos(angles).to(x.dtype), torch.sin(angles).to(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    re = cos * even - sin * odd
    im = sin * even + cos * odd
    return torch.stack([re, im], dim=-1).reshape(x.shape)


def attention_tensor(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, ndim: int,
                     mask: AttentionMask | None = None) -> torch.Tensor:
    """Multi-head attention across elements, independently per local node.

    ``q, k, v``: ``[B, N.., M.., H, dh]``. Returns the same shape.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    elem_shape = q.shape[1:1 + ndim]
    if mask is not None and tuple(mask.elements) != tuple(elem_shape):
        raise ValueError(f"mask built for {mask.elements} elements, field has {tuple(elem_shape)}")
    if mask is None or mask.is_full:
        B = q.shape[0]
        T = int(np.prod(elem_shape))
        tail = q.shape[1 + ndim:]
        qf, kf, vf = (t.reshape(B, T, *tail) for t in (q, k, v))
        qf, kf, vf = (t.reshape(B, T, -1, *t.shape[-2:]) for t in (qf, kf, vf))  # [B, T, P, H, dh]
        scores = torch.einsum("btphd,bsphd->bphts", qf, kf) * scale
        assert scores.shape[-1] == T  # sequence length is the element count, whatever M is
        w = tc.softmax(scores, axis=-1)
        out = torch.einsum("bphts,bsphd->btphd", w, vf)
        return out.reshape(q.shape)
    return _windowed_attention(q, k, v, ndim, mask, scale)


_SCORE_CHUNK = 1 << 18


def _block_size(n: int, w: int) -> int:
    cap = max(1, w // 2)
    return max(d for d in range(1, cap + 1) if n % d == 0)


def _windowed_attention(q, k, v, ndim, mask, scale):
    # Queries are grouped into blocks of b elements per axis; each block attends to its
    # periodic halo of b + w - 1 elements through one masked GEMM, so cost stays linear in T.
    B = q.shape[0]
    elem = q.shape[1:1 + ndim]
    node_shape = q.shape[1 + ndim:-2]
    H, dh = q.shape[-2:]
    P = int(np.prod(node_shape)) if node_shape else 1
    w, lo = mask.window, mask.window // 2
    bs = [_block_size(n, w) for n in elem]
    nb = [n // b for n, b in zip(elem, bs)]
    L = [b + w - 1 for b in bs]
    NB, Q, K = int(np.prod(nb)), int(np.prod(bs)), int(np.prod(L))

    def halo(t, r0, r1):
        # keys for block rows r0..r1 along the first element axis, all blocks along the others
        t = t.reshape(B, *elem, P, H, dh)
        for a in range(ndim):
            d = 1 + a
            start, stop = (r0 * bs[0], r1 * bs[0]) if a == 0 else (0, elem[a])
            idx = torch.arange(start - lo, stop + w - 1 - lo) % elem[a]
            t = t.index_select(d, idx).unfold(d, L[a], bs[a])  # [.., nb_a, .., L_a]
        # [B, nb.., P, H, dh, L..] -> [B, rows * rest, P, H, K, dh]
        perm = [0, *range(1, 1 + ndim), 1 + ndim, 2 + ndim, *range(4 + ndim, 4 + 2 * ndim), 3 + ndim]
        return t.permute(perm).reshape(B, -1, P, H, K, dh)

    def blocks(t):
        t = t.reshape(B, *[x for pair in zip(nb, bs) for x in pair], P, H, dh)
        # -> [B, nb.., P, H, b.., dh]
        perm = [0, *range(1, 1 + 2 * ndim, 2), 1 + 2 * ndim, 2 + 2 * ndim, *range(2, 2 + 2 * ndim, 2), 3 + 2 * ndim]
        return t.permute(perm).reshape(B, NB, P, H, Q, dh)

    allowed = np.ones((1, 1), dtype=bool)
    for b, l in zip(bs, L):
        rel = np.arange(l)[None, :] - np.arange(b)[:, None]
        ax = (rel >= 0) & (rel < w)
        allowed = (allowed[:, None, :, None] & ax[None, :, None, :]).reshape(allowed.shape[0] * b, -1)
    blocked = torch.from_numpy(~allowed)

    qb = blocks(q) * scale
    rest = NB // nb[0]
    per_block = B * P * H * Q * K
    rows = max(1, _SCORE_CHUNK // (per_block * rest))
    chunk = max(1, _SCORE_CHUNK // per_block)
    outs = []
    # gather halos one slab of block rows at a time so they stay cache-sized
    for r0 in range(0, nb[0], rows):
        r1 = min(nb[0], r0 + rows)
        kh, vh = halo(k, r0, r1), halo(v, r0, r1)
        qs = qb[:, r0 * rest:r1 * rest]
        for c in range(0, qs.shape[1], chunk):
            sl = slice(c, c + chunk)
            scores = (qs[:, sl] @ kh[:, sl].transpose(-1, -2)).masked_fill(blocked, float("-inf"))
            outs.append(tc.softmax(scores, axis=-1) @ vh[:, sl])
    out = outs[0] if len(outs) == 1 else torch.cat(outs, dim=1)
    # [B, NB, P, H, Q, dh] -> [B, nb1, b1, .., P, H, dh]
    out = out.reshape(B, *nb, P, H, *bs, dh)
    perm = [0] + [x for a in range(ndim) for x in (1 + a, 3 + ndim + a)] + [1 + ndim, 2 + ndim, 3 + 2 * ndim]
    return out.permute(perm).reshape(q.shape)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> tc.ParamSet:
    """Deterministic initialization for a seed.

    Convolution kernels and the two output projections start at magnitude
    ``1e-7``; other pointwise maps use the fan-in uniform rule; biases are
    zero, layer-norm gains one and every LES-injection scale ``1``.
    """
    rng = np.random.default_rng(seed)
    c = config
    D, d, A = c.ndim, c.hidden, c.attn_dim
    p = tc.ParamSet()

    def linear(name, fan_in, fan_out, bias=True):
        p.add(name + ".w", _uniform(rng, (fan_in, fan_out), 1 / math.sqrt(fan_in)))
        if bias:
            p.add(name + ".b", np.zeros(fan_out))

    def kernel(name, m, c_out, c_in):
        p.add(name + ".re", _uniform(rng, (m, D, c_out, c_in), KERNEL_INIT))
        p.add(name + ".im", _uniform(rng, (m, D, c_out, c_in), KERNEL_INIT))

    def feed_forward(name):
        p.add(name + ".w1", _uniform(rng, (d, d), 1 / math.sqrt(d)))
        p.add(name + ".b1", np.zeros(d))
        p.add(name + ".w2", _uniform(rng, (d, d), 1 / math.sqrt(d)))
        p.add(name + ".b2", np.zeros(d))

    linear("in", c.in_channels, d)
    for l in range(c.layers):
        kernel(f"sgs.{l}.conv", c.kernel_modes_sgs, d, d)
        feed_forward(f"sgs.{l}.ffn")
        p.add(f"sgs.{l}.eps", np.array(1.0))
    for l in range(c.layers):
        for name in ("q", "k", "v"):
            kernel(f"les.{l}.{name}", c.kernel_modes_les, A, d)
        for name in ("q", "k"):
            p.add(f"les.{l}.{name}.bias", np.zeros(A))
            p.add(f"les.{l}.{name}.gain", np.ones(A))
            p.add(f"les.{l}.{name}.shift", np.zeros(A))
        linear(f"les.{l}.proj", A, d)
        kernel(f"les.{l}.conv", c.kernel_modes_les, d, d)
        feed_forward(f"les.{l}.ffn")
    p.add("out.sgs.w", _uniform(rng, (d, c.out_channels), KERNEL_INIT))
    p.add("out.les.w", _uniform(rng, (d, c.out_channels), KERNEL_INIT))
    p.add("out.b", np.zeros(c.out_channels))
    return p


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------


class SpectralElementTransformer:
    """Model bound to one configuration and one input grid resolution."""

    def __init__(self, config: ModelConfig, grid_shape: tuple[int, ...] | int | None = None):
        self.config = config
        self.mesh = config.sgs_mesh
        self.les_mesh = config.les_mesh
        D = config.ndim
        self.grid_shape = None if grid_shape is None else tuple(np.broadcast_to(grid_shape, (D,)))
        self.mask = None
        if config.window is not None and config.window != config.elements:
            self.mask = build_attention_mask(self.mesh, config.window)
        self.sgs_conv = ConvOperator(self.mesh, config.kernel_size, config.kernel_modes_sgs)
        self.les_conv = ConvOperator(self.les_mesh, config.kernel_size, config.kernel_modes_les)
        kind = self.mesh.kind
        self.trunc = torch.from_numpy(truncation_matrix(kind, config.modes, config.k_max))
        self.upsample = torch.from_numpy(upsample_matrix(kind, config.modes, config.k_max))
        self.angles = rope_angles(self.les_mesh, config.head_dim, strict=False)

    # -- grid transfer -------------------------------------------------------

    @cached_property
    def _to_sem(self):
        return [torch.from_numpy(grid_to_nodes_matrix(self.mesh, a, n)) for a, n in enumerate(self.grid_shape)]

    @cached_property
    def _to_grid(self):
        return [torch.from_numpy(nodes_to_grid_matrix(self.mesh, a, n)) for a, n in enumerate(self.grid_shape)]

    def _bind_grid(self, shape):
        shape = tuple(shape)
        if self.grid_shape != shape:
            self.grid_shape = shape
            self.__dict__.pop("_to_sem", None)
            self.__dict__.pop("_to_grid", None)

    def to_sem(self, x: torch.Tensor) -> torch.Tensor:
        self._bind_grid(x.shape[1:-1])
        return apply_axis_transfer(x, [m.to(x.dtype) for m in self._to_sem], self.config.ndim, True)

    def to_grid(self, u: torch.Tensor) -> torch.Tensor:
        return apply_axis_transfer(u, [m.to(u.dtype) for m in self._to_grid], self.config.ndim, False)

    # -- blocks --------------------------------------------------------------

    def sem_attn(self, ubar: torch.Tensor, p, l: int, mask: AttentionMask | None | str = "config") -> torch.Tensor:
        c = self.config
        mask = self.mask if mask == "config" else mask
        pre = f"les.{l}"
        heads = []
        for name in ("q", "k", "v"):
            x = sem_conv_tensor(ubar, p[f"{pre}.{name}.re"], p[f"{pre}.{name}.im"], self.les_conv)
            if name != "v":
                x = x + p[f"{pre}.{name}.bias"]
            x = x.reshape(*x.shape[:-1], c.heads, c.head_dim)
            if name != "v":
                gain = p[f"{pre}.{name}.gain"].reshape(c.heads, c.head_dim)
                shift = p[f"{pre}.{name}.shift"].reshape(c.heads, c.head_dim)
                x = tc.layer_norm(x, -1, gain, shift)
                x = rope_tensor(x, self.angles.unsqueeze(-2))
            heads.append(x)
        q, k, v = heads
        out = attention_tensor(q, k, v, c.ndim, mask)
        out = out.reshape(*out.shape[:-2], c.attn_dim)
        return out @ p[f"{pre}.proj.w"] + p[f"{pre}.proj.b"]

    def les_layer(self, ubar: torch.Tensor, p, l: int, mask: AttentionMask | None | str = "config") -> torch.Tensor:
        ubar = ubar + self.sem_attn(ubar, p, l, mask)
        conv = sem_conv_tensor(ubar, p[f"les.{l}.conv.re"], p[f"les.{l}.conv.im"], self.les_conv)
        return ubar + ffn(conv, p, f"les.{l}.ffn")

    def upsample_les(self, ubar: torch.Tensor) -> torch.Tensor:
        return apply_mode_matrix(ubar, self.upsample.to(ubar.dtype), self.config.ndim)

    def sgs_layer(self, u: torch.Tensor, ubar: torch.Tensor | None, p, l: int) -> torch.Tensor:
        x = u
        if ubar is not None:
            x = x + p[f"sgs.{l}.eps"] * self.upsample_les(ubar)
        conv = sem_conv_tensor(x, p[f"sgs.{l}.conv.re"], p[f"sgs.{l}.conv.im"], self.sgs_conv)
        return u + ffn(conv, p, f"sgs.{l}.ffn")

    # -- full network on SEM tensors -------------------------------------------

    def apply_sem(self, u_in: torch.Tensor, p) -> tuple[torch.Tensor, torch.Tensor]:
        """Nodal input ``[B, N.., M.., C_in]`` to ``(u_les, u_sgs)`` on the SGS nodes."""
        c = self.config
        u = u_in @ p["in.w"] + p["in.b"]
        use_les = c.streams in ("full", "les")
        use_sgs = c.streams in ("full", "sgs")
        ubar = apply_mode_matrix(u, self.trunc.to(u.dtype), c.ndim) if use_les else None
        for l in range(c.layers):
            if use_les:
                ubar = self.les_layer(ubar, p, l)
            if use_sgs:
                u = self.sgs_layer(u, ubar, p, l)
        zero = torch.zeros(*u.shape[:-1], c.out_channels, dtype=u.dtype)
        u_les = self.upsample_les(ubar @ p["out.les.w"]) if use_les else zero
        u_sgs = u @ p["out.sgs.w"] if use_sgs else zero
        return u_les + p["out.b"], u_sgs

    def apply(self, p, u_t: torch.Tensor, u_star: torch.Tensor | None = None,
              mode: str = "direct") -> torch.Tensor:
        """Grid-to-grid prediction on batched tensors ``[B, n.., C]``."""
        if mode == "correction":
            if u_star is None:
                raise ValueError("correction mode needs the coarse-solver output u_star")
            x = torch.cat([u_t, u_star], dim=-1)
        elif mode == "direct":
            x = u_t
        else:
            raise ValueError(f"unknown mode {mode!r}")
        u_les, u_sgs = self.apply_sem(self.to_sem(x), p)
        f = self.to_grid(u_les + u_sgs)
        out = u_star + self.config.alpha * f if mode == "correction" else f
        if not torch.all(torch.isfinite(out)):
            raise DivergenceError("model produced non-finite values")
        return out

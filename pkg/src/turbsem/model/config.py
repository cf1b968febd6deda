from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

from ..basis import BasisKind, SemMesh

STREAMS = ("full", "les", "sgs")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the 2D architecture table (10 layers, 16^2 elements,
    ``k_max=4``, ``M=24``); :meth:`table8` gives the 3D one.
    """

    ndim: int = 2
    layers: int = 10
    hidden: int = 32
    elements: int = 16
    modes: int = 24
    k_max: int = 4
    kernel_modes_les: int = 4
    kernel_modes_sgs: int = 24
    kernel_size: float = math.pi / 4
    heads: int = 8
    head_dim: int = 16
    alpha: float = 1e-5
    window: int | None = None
    streams: str = "full"
    basis: str = "legendre"
    length: float = 2 * math.pi
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.ndim not in (2, 3):
            raise ValueError("ndim must be 2 or 3")
        if not 3 <= self.k_max < self.modes:
            raise ValueError(f"need 3 <= k_max < modes, got k_max={self.k_max}, modes={self.modes}")
        if self.kernel_size <= 0:
            raise ValueError("kernel size must be positive")
        if self.window is not None and not 1 <= self.window <= self.elements:
            raise ValueError(f"attention window {self.window} outside [1, {self.elements}]")
        if self.streams not in STREAMS:
            raise ValueError(f"streams must be one of {STREAMS}")
        if self.head_dim % 2 or self.head_dim < 2 * self.ndim:
            raise ValueError("head_dim must be even and at least 2*ndim for rotary encoding")
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden dimension must be positive")
        BasisKind.parse(self.basis)

    @classmethod
    def table7(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def table8(cls, **kw) -> "ModelConfig":
        base = dict(ndim=3, layers=4, hidden=32, elements=8, modes=13, k_max=5,
                    kernel_modes_les=5, kernel_modes_sgs=13, kernel_size=math.pi / 4,
                    heads=4, head_dim=32, in_channels=3, out_channels=3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk2d(cls, **kw) -> "ModelConfig":
        """Scaled-down 2D model that trains on a single CPU."""
        base = dict(layers=6, hidden=32, elements=8, modes=12, k_max=4,
                    kernel_modes_les=4, kernel_modes_sgs=12)
        base.update(kw)
        return cls(**base)

    @property
    def sgs_mesh(self) -> SemMesh:
        return SemMesh.uniform(self.ndim, self.elements, self.modes, self.length, self.basis)

    @property
    def les_mesh(self) -> SemMesh:
        return self.sgs_mesh.with_modes(self.k_max)

    @property
    def attn_dim(self) -> int:
        return self.heads * self.head_dim

    def tiled(self, factor: int) -> "ModelConfig":
        """Same cells on a domain ``factor`` times larger, attention window = original element count."""
        window = self.window if self.window is not None else self.elements
        return replace(self, elements=self.elements * factor, length=self.length * factor,
                       window=window)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

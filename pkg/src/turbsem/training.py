"""Datasets, losses, optimizer, training loops, evaluation and checkpoints."""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import __version__
from . import tensor as tc
from .basis import GridField
from .diagnostics import energy_balance, energy_spectrum, error_metrics, structure_function_s3, write_csv
from .model import DivergenceError, ModelConfig, SpectralElementTransformer, init_params
from .solver import BlowUpError, FlowState, SolverConfig, advance, from_grid, init_random, simulate, to_grid

__all__ = [
    "TrainConfig",
    "TrajectoryRecord",
    "DatasetManifest",
    "PairData",
    "AdamState",
    "Checkpoint",
    "TrainResult",
    "EvalResult",
    "write_snapshot",
    "read_snapshot",
    "generate_dataset",
    "load_pairs",
    "estimate_alpha",
    "relative_errors",
    "loss_one_step",
    "loss_rollout",
    "coarse_step",
    "adam_init",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "train",
    "hybrid_rollout",
    "evaluate",
    "TrainingDivergedError",
]

MAGIC = b"EDYF"
SNAPSHOT_VERSION = 1
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64}


class TrainingDivergedError(FloatingPointError):
    """Non-finite training loss; the last good checkpoint on disk is left untouched."""


# ---------------------------------------------------------------------------
# snapshot files
# ---------------------------------------------------------------------------


def write_snapshot(path: str | Path, g: GridField, dtype=np.float64) -> Path:
    """Binary snapshot: header then little-endian row-major channel-last data."""
    code = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}[np.dtype(dtype)]
    D, C = g.ndim, g.values.shape[-1]
    head = MAGIC + struct.pack("<IBBBx", SNAPSHOT_VERSION, D, C, code)
    head += struct.pack(f"<{D}I", *g.shape) + struct.pack(f"<{D}d", *g.lengths) + struct.pack("<d", g.time)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(g.values, dtype=np.dtype(dtype).newbyteorder("<"))
    path.write_bytes(head + data.tobytes())
    return path


def read_snapshot(path: str | Path, channels: str | None = None) -> GridField:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a snapshot file (bad magic)")
    version, D, C, code = struct.unpack_from("<IBBBx", raw, 4)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    if code not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    off = 12
    shape = struct.unpack_from(f"<{D}I", raw, off)
    off += 4 * D
    lengths = struct.unpack_from(f"<{D}d", raw, off)
    off += 8 * D
    (t,) = struct.unpack_from("<d", raw, off)
    off += 8
    dt = np.dtype(_DTYPES[code]).newbyteorder("<")
    count = int(np.prod(shape)) * C
    if len(raw) - off != count * dt.itemsize:
        raise ValueError(f"{path}: payload size does not match header")
    values = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(*shape, C).astype(np.float64)
    if channels is None:
        channels = "omega" if (D == 2 and C == 1) else ",".join("uvw"[:C]) if C == D else "data"
    return GridField(values, lengths, time=t, channels=channels)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryRecord:
    """One trajectory: times, snapshot files and coarse-solver companions (paths relative to ``root``)."""

    root: Path
    meta: dict
    times: list[float]
    files: list[str]
    coarse: list[str | None]

    def snapshot(self, i: int) -> GridField:
        return read_snapshot(self.root / self.files[i], self.meta.get("channels"))

    def coarse_snapshot(self, i: int) -> GridField | None:
        c = self.coarse[i]
        return None if c is None else read_snapshot(self.root / c, self.meta.get("channels"))

    def validate(self) -> None:
        dt = float(self.meta["dt"])
        t = np.asarray(self.times)
        if len(t) > 1 and (np.any(np.diff(t) <= 0) or not np.allclose(np.diff(t), dt, rtol=0, atol=1e-9)):
            raise ValueError("manifest times must increase at spacing dt")

    def write(self, path: Path) -> Path:
        lines = [f"{k}={v}" for k, v in self.meta.items()]
        for t, f, c in zip(self.times, self.files, self.coarse):
            lines.append(f"t={t!r} file={f} coarse={c or '-'}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "TrajectoryRecord":
        path = Path(path)
        meta, times, files, coarse = {}, [], [], []
        for no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("t="):
                parts = dict(p.split("=", 1) for p in line.split())
                try:
                    times.append(float(parts["t"]))
                    files.append(parts["file"])
                    coarse.append(None if parts.get("coarse", "-") == "-" else parts["coarse"])
                except (KeyError, ValueError) as e:
                    raise ValueError(f"{path}:{no}: malformed record line") from e
            elif "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
            else:
                raise ValueError(f"{path}:{no}: expected key=value")
        for key in ("nu", "forcing", "resolution", "dt", "t0", "seed", "split"):
            if key not in meta:
                raise ValueError(f"{path}: missing header key {key!r}")
        rec = cls(path.parent, meta, times, files, coarse)
        rec.validate()
        return rec


@dataclass
class DatasetManifest:
    """A set of trajectories sharing one split tag."""

    split: str
    trajectories: list[TrajectoryRecord]
    path: Path | None = None

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        rows = [f"split={self.split}"]
        rows += [f"trajectory={(t.root / 'manifest.txt').relative_to(path.parent)}" for t in self.trajectories]
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        self.path = path
        return path

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        """Load an index file (``trajectory=`` lines) or a single trajectory manifest."""
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if any(line.startswith("t=") for line in text.splitlines()):
            rec = TrajectoryRecord.read(path)
            return cls(rec.meta["split"], [rec], path)
        split, trajs = None, []
        for no, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            if k == "split":
                split = v
            elif k == "trajectory":
                trajs.append(TrajectoryRecord.read(path.parent / v))
            else:
                raise ValueError(f"{path}:{no}: unexpected line {line!r}")
        if split is None or not trajs:
            raise ValueError(f"{path}: index needs a split and at least one trajectory")
        return cls(split, trajs, path)


def _coarse_config(config: SolverConfig, coarse_resolution: int) -> SolverConfig:
    return replace(config, resolution=coarse_resolution, output_resolution=coarse_resolution,
                   velocity_output=False)


def coarse_step(g: GridField, coarse: SolverConfig, dt: float | None = None) -> GridField:
    """One coarse-solver interval from a recorded snapshot."""
    dt = coarse.record_dt if dt is None else dt
    s = from_grid(g.values, coarse, t=g.time)
    if s.resolution != coarse.resolution:
        raise ValueError(f"snapshot resolution {s.resolution} differs from coarse resolution {coarse.resolution}")
    # answer in the snapshot's own channel layout (omega | omega,u,v | u,v | u,v,w)
    C = g.values.shape[-1]
    out = to_grid(advance(s, dt, coarse), velocity=C > 1)
    if out.values.shape[-1] != C:
        names = out.channels.split(",")[-C:]
        out = GridField(out.values[..., -C:], out.lengths, time=out.time, channels=",".join(names))
    return out


def generate_dataset(config: SolverConfig, seeds: Sequence[int], split: str, out_dir: str | Path,
                     coarse_resolution: int | None = None, log: Callable[[str], None] | None = None
                     ) -> DatasetManifest:
    """Burn in, record and (optionally) precompute coarse-solver companions for each seed.

    Snapshots are stored at ``config.out_resolution``; each companion is one
    coarse interval of length ``record_dt`` started from the previous
    recorded snapshot.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    coarse = None if coarse_resolution is None else _coarse_config(config, coarse_resolution)
    if coarse is not None and coarse_resolution != config.out_resolution:
        raise ValueError("coarse companions need output_resolution == coarse_resolution")
    records = []
    for seed in seeds:
        t_start = time.perf_counter()
        try:
            traj = simulate(init_random(config, seed), config.duration, config, burn_in=config.burn_in)
        except BlowUpError as e:
            raise BlowUpError(f"trajectory seed {seed}: {e}") from e
        tdir = out / split / f"traj_{seed:04d}"
        times, files, comp = [], [], []
        prev = None
        for i, snap in enumerate(traj.snapshots):
            t = config.burn_in + snap.time
            snap = GridField(snap.values, snap.lengths, time=t, channels=snap.channels)
            name = f"snap_{i:05d}.edyf"
            write_snapshot(tdir / name, snap)
            c_name = None
            if coarse is not None and prev is not None:
                try:
                    cs = coarse_step(prev, coarse)
                except BlowUpError as e:
                    raise BlowUpError(f"trajectory seed {seed}, coarse companion {i}: {e}") from e
                cs = GridField(cs.values, cs.lengths, time=t, channels=cs.channels)
                c_name = f"coarse_{i:05d}.edyf"
                write_snapshot(tdir / c_name, cs)
            prev = read_snapshot(tdir / name, snap.channels)  # companions start from the stored data
            times.append(t)
            files.append(name)
            comp.append(c_name)
        meta = {
            "nu": repr(config.nu), "forcing": config.kind, "resolution": str(config.resolution),
            "output_resolution": str(config.out_resolution), "dt": repr(config.record_dt),
            "t0": repr(config.burn_in), "seed": str(seed), "split": split,
            "coarse_resolution": str(coarse_resolution or "-"), "channels": traj.snapshots[0].channels,
            "solver": json.dumps(config.to_dict(), sort_keys=True),
        }
        rec = TrajectoryRecord(tdir, meta, times, files, comp)
        rec.write(tdir / "manifest.txt")
        records.append(rec)
        if log:
            log(f"seed {seed}: {len(times)} snapshots in {time.perf_counter() - t_start:.1f}s")
    manifest = DatasetManifest(split, records)
    manifest.write(out / f"{split}.txt")
    return manifest


def solver_config_of(manifest: DatasetManifest) -> SolverConfig:
    return SolverConfig(**json.loads(manifest.trajectories[0].meta["solver"]))


# ---------------------------------------------------------------------------
# in-memory pairs
# ---------------------------------------------------------------------------


@dataclass
class PairData:
    """Trajectories stacked as tensors ``[T, n.., C]`` with optional coarse companions."""

    frames: list[torch.Tensor]
    coarse: list[torch.Tensor | None]
    lengths: tuple[float, ...]
    dt: float
    channels: str

    @property
    def pairs(self) -> list[tuple[int, int]]:
        """``(trajectory, i)`` with target frame ``i + 1``."""
        return [(j, i) for j, f in enumerate(self.frames) for i in range(f.shape[0] - 1)]

    def windows(self, n: int) -> list[tuple[int, int]]:
        return [(j, i) for j, f in enumerate(self.frames) for i in range(f.shape[0] - n)]

    def batch(self, idx: Sequence[tuple[int, int]], dtype=torch.float64):
        u = torch.stack([self.frames[j][i] for j, i in idx]).to(dtype)
        y = torch.stack([self.frames[j][i + 1] for j, i in idx]).to(dtype)
        if all(self.coarse[j] is not None for j, _ in idx):
            s = torch.stack([self.coarse[j][i + 1] for j, i in idx]).to(dtype)
        else:
            s = None
        return u, y, s

    def targets(self, idx: Sequence[tuple[int, int]], n: int, dtype=torch.float64) -> torch.Tensor:
        """``[B, n, grid.., C]`` frames ``i+1 .. i+n``."""
        return torch.stack([self.frames[j][i + 1:i + 1 + n] for j, i in idx]).to(dtype)


def load_pairs(manifest: DatasetManifest) -> PairData:
    frames, coarse = [], []
    first = None
    for rec in manifest.trajectories:
        snaps = [rec.snapshot(i) for i in range(len(rec.files))]
        first = first or snaps[0]
        frames.append(torch.from_numpy(np.stack([s.values for s in snaps])))
        if all(c is not None for c in rec.coarse[1:]) and len(rec.coarse) > 1:
            cs = [np.zeros_like(snaps[0].values)] + [rec.coarse_snapshot(i).values for i in range(1, len(rec.coarse))]
            coarse.append(torch.from_numpy(np.stack(cs)))
        else:
            coarse.append(None)
    return PairData(frames, coarse, first.lengths, float(manifest.trajectories[0].meta["dt"]), first.channels)


def estimate_alpha(data: PairData) -> float:
    """A-priori correction scale: rms of (target - coarse) over all training pairs."""
    num, cnt = 0.0, 0
    for f, c in zip(data.frames, data.coarse):
        if c is None:
            raise ValueError("alpha estimate needs coarse companions")
        d = f[1:] - c[1:]
        num += float((d * d).sum())
        cnt += d.numel()
    alpha = math.sqrt(num / cnt)
    if not alpha > 0:
        raise ValueError("coarse companions coincide with the targets; cannot estimate alpha")
    return alpha


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def relative_errors(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample ``||target - pred|| / ||target||`` over all but the batch axis."""
    dims = tuple(range(1, target.ndim))
    den = torch.sqrt((target * target).sum(dims))
    if torch.any(den == 0):
        raise ValueError("relative error undefined for a zero-norm target")
    return torch.sqrt(((target - pred) ** 2).sum(dims)) / den


def loss_one_step(batch, model: SpectralElementTransformer, params, mode: str) -> torch.Tensor:
    """Mean one-step relative error; ``batch = (u_t, target, u_star)``."""
    u, y, s = batch
    return relative_errors(model.apply(params, u, s, mode), y).mean()


def _coarse_tensor_step(u: torch.Tensor, coarse: SolverConfig, dt: float) -> torch.Tensor:
    """Differentiable coarse interval on a batch ``[B, n, n, 1]`` of vorticity grids."""
    outs = []
    n = u.shape[1]
    for b in range(u.shape[0]):
        w = u[b, ..., 0].to(torch.float64)
        spec = torch.fft.rfftn(w, norm="forward")
        s = advance(FlowState(spec, 0.0, coarse), dt, coarse, differentiable=True)
        outs.append(torch.fft.irfftn(s.spec, s=(n, n), norm="forward"))
    return torch.stack(outs)[..., None].to(u.dtype)


def loss_rollout(u0: torch.Tensor, targets: torch.Tensor, model: SpectralElementTransformer, params,
                 steps: int, coarse: SolverConfig, first_coarse: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over ``n = 1..steps`` of the relative error of the n-step hybrid composition.

    Gradients flow through the model and through every coarse-solver step.
    ``first_coarse`` may supply the (precomputed) first coarse output.
    """
    if coarse.ndim != 2:
        raise ValueError("rollout loss is implemented for the 2D solver")
    if steps < 1 or targets.shape[1] < steps:
        raise ValueError("need at least `steps` target frames")
    u = u0
    total = 0.0
    for n in range(steps):
        if n == 0 and first_coarse is not None:
            s = first_coarse
        else:
            try:
                s = _coarse_tensor_step(u, coarse, coarse.record_dt)
            except BlowUpError as e:
                raise BlowUpError(f"rollout step {n + 1}: {e}") from e
        u = model.apply(params, u, s, "correction")
        total = total + relative_errors(u, targets[:, n]).mean()
    return total / steps


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0
    skipped: int = 0


def adam_init(params) -> AdamState:
    return AdamState({k: torch.zeros_like(v) for k, v in params.items()},
                     {k: torch.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, clip_norm: float | None = None) -> tuple[tc.ParamSet, AdamState, dict]:
    """One Adam update with bias correction; non-finite gradients skip the step.

    Returns new detached parameters, the new state and an info dict with the
    (pre-clip) gradient norm and whether the step was skipped.
    """
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameter names")
    for k in params:
        if grads[k].shape != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k!r}")
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if not math.isfinite(norm):
        return tc.ParamSet((k, v.detach().clone()) for k, v in params.items()), \
            replace(state, skipped=state.skipped + 1), {"grad_norm": norm, "skipped": True}
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    t = state.step + 1
    bc1, bc2 = 1 - beta1**t, 1 - beta2**t
    new_p, new_m, new_v = tc.ParamSet(), {}, {}
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k] * scale
            m = beta1 * state.m[k] + (1 - beta1) * g
            v = beta2 * state.v[k] + (1 - beta2) * g * g
            new_p[k] = p.detach() - lr * (m / bc1) / (torch.sqrt(v / bc2) + eps)
            new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t, state.skipped), {"grad_norm": norm, "skipped": False}


# ---------------------------------------------------------------------------
# configuration and checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "correction"
    lr: float = 1e-3
    finetune_lr: float = 1e-5
    batch_size: int = 16
    steps: int = 2000
    finetune_steps: int = 0
    rollout_steps: int = 5
    alpha: float | None = None  # None: estimate from the training data
    seed: int = 0
    train_manifest: str = ""
    test_manifest: str = ""
    coarse_resolution: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 1.0
    dtype: str = "float64"
    eval_every: int = 0
    eval_pairs: int = 16
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.mode not in ("direct", "correction"):
            raise ValueError(f"mode must be 'direct' or 'correction', got {self.mode!r}")
        if self.rollout_steps < 1:
            raise ValueError("rollout length N must be >= 1")
        if self.alpha is not None and self.mode == "correction" and not self.alpha > 0:
            raise ValueError("correction scale alpha must be positive")
        if self.batch_size < 1 or self.steps < 0 or self.finetune_steps < 0:
            raise ValueError("batch size must be positive and step counts non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float32 if self.dtype == "float32" else torch.float64

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: tc.ParamSet
    optimizer: AdamState
    train_step: int
    rng_state: dict
    train_config: TrainConfig | None = None
    solver_config: SolverConfig | None = None
    extra: dict = field(default_factory=dict)

    def model(self) -> SpectralElementTransformer:
        return SpectralElementTransformer(self.model_config)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write ``<path>.npz`` (tensors) and ``<path>.json`` (everything else); returns the json path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for prefix, d in (("p", ckpt.params), ("m", ckpt.optimizer.m), ("v", ckpt.optimizer.v)):
        for k, v in d.items():
            arrays[f"{prefix}/{k}"] = v.detach().cpu().numpy()
    npz = path.with_suffix(".npz")
    tmp = npz.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    meta = {
        "version": CHECKPOINT_VERSION,
        "turbsem": __version__,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": None if ckpt.train_config is None else ckpt.train_config.to_dict(),
        "solver_config": None if ckpt.solver_config is None else ckpt.solver_config.to_dict(),
        "param_names": list(ckpt.params),
        "adam_step": ckpt.optimizer.step,
        "adam_skipped": ckpt.optimizer.skipped,
        "train_step": ckpt.train_step,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    js = path.with_suffix(".json")
    tmp_js = js.with_suffix(".tmp.json")
    tmp_js.write_text(json.dumps(meta, indent=1, sort_keys=True))
    tmp.replace(npz)
    tmp_js.replace(js)
    return js


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    with np.load(path.with_suffix(".npz")) as z:
        arrays = {k: z[k] for k in z.files}
    names = meta["param_names"]
    params = tc.ParamSet((k, torch.from_numpy(arrays[f"p/{k}"])) for k in names)
    m = {k: torch.from_numpy(arrays[f"m/{k}"]) for k in names}
    v = {k: torch.from_numpy(arrays[f"v/{k}"]) for k in names}
    tcfg = meta.get("train_config")
    scfg = meta.get("solver_config")
    return Checkpoint(ModelConfig.from_dict(meta["model_config"]), params,
                      AdamState(m, v, meta["adam_step"], meta.get("adam_skipped", 0)), meta["train_step"],
                      meta["rng_state"], None if tcfg is None else TrainConfig(**tcfg),
                      None if scfg is None else SolverConfig(**scfg), meta.get("extra", {}))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    evals: list[dict]


def _prepare_model_config(mc: ModelConfig, tcfg: TrainConfig, data: PairData) -> ModelConfig:
    C = data.frames[0].shape[-1]
    alpha = mc.alpha
    if tcfg.mode == "correction":
        alpha = tcfg.alpha if tcfg.alpha is not None else estimate_alpha(data)
    return replace(mc, in_channels=C * (2 if tcfg.mode == "correction" else 1), out_channels=C,
                   alpha=alpha, length=float(data.lengths[0]), ndim=len(data.lengths))


def _mean_eval(model, params, data: PairData, mode: str, count: int, dtype) -> dict:
    idx = data.pairs[:count] if count else data.pairs
    with torch.no_grad():
        u, y, s = data.batch(idx, dtype)
        pred = relative_errors(model.apply(params, u, s, mode), y).mean().item()
        base = relative_errors(s, y).mean().item() if s is not None else float("nan")
    return {"model": pred, "coarse": base}


def train(tcfg: TrainConfig, model_config: ModelConfig, out_dir: str | Path | None = None,
          resume: str | Path | None = None, log: Callable[[str], None] | None = None) -> TrainResult:
    """One-step training, then (2D correction mode) rollout fine-tuning at the reduced rate."""
    torch.manual_seed(tcfg.seed)
    train_m = DatasetManifest.read(tcfg.train_manifest)
    data = load_pairs(train_m)
    test = load_pairs(DatasetManifest.read(tcfg.test_manifest)) if tcfg.test_manifest else None
    solver_cfg = solver_config_of(train_m)
    coarse = _coarse_config(solver_cfg, tcfg.coarse_resolution)
    dtype = tcfg.torch_dtype
    if tcfg.mode == "correction" and any(c is None for c in data.coarse):
        raise ValueError("correction training needs coarse companions in the training manifest")

    if resume is not None:
        ckpt = load_checkpoint(resume)
        mc = ckpt.model_config
        params, opt, start = ckpt.params.to(dtype), ckpt.optimizer, ckpt.train_step
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        history = list(ckpt.extra.get("history", []))
    else:
        mc = _prepare_model_config(model_config, tcfg, data)
        params = init_params(mc, tcfg.seed).to(dtype)
        opt = adam_init(params)
        start = 0
        rng = np.random.default_rng(tcfg.seed)
        history = []
    model = SpectralElementTransformer(mc)
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    pairs = data.pairs
    windows = data.windows(tcfg.rollout_steps) if tcfg.mode == "correction" else []
    total = tcfg.steps + (tcfg.finetune_steps if (tcfg.mode == "correction" and mc.ndim == 2) else 0)
    if total > tcfg.steps and not windows:
        raise ValueError("trajectories are shorter than the rollout length")
    records, evals = [], []

    def snapshot(step):
        return Checkpoint(mc, params.detached(), opt, step, rng.bit_generator.state, tcfg, solver_cfg,
                          {"history": history})

    for it in range(start, total):
        rollout = it >= tcfg.steps
        lr = tcfg.finetune_lr if rollout else tcfg.lr
        p = params.tracked()
        t0 = time.perf_counter()
        if rollout:
            sel = rng.integers(len(windows), size=tcfg.batch_size)
            idx = [windows[i] for i in sel]
            u, _, s = data.batch(idx, dtype)
            loss = loss_rollout(u, data.targets(idx, tcfg.rollout_steps, dtype), model, p,
                                tcfg.rollout_steps, coarse, first_coarse=s)
        else:
            sel = rng.integers(len(pairs), size=tcfg.batch_size)
            loss = loss_one_step(data.batch([pairs[i] for i in sel], dtype), model, p, tcfg.mode)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss at step {it}; last checkpoint kept")
        grads = tc.backward(loss, p)
        params, opt, info = adam_step(params, grads, opt, lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.clip_norm)
        rec = {"step": it + 1, "phase": "rollout" if rollout else "one_step", "loss": value,
               "grad_norm": info["grad_norm"], "skipped": int(info["skipped"]), "lr": lr,
               "seconds": time.perf_counter() - t0}
        records.append(rec)
        history.append(value)
        if log and tcfg.log_every and (it + 1) % tcfg.log_every == 0:
            log(f"step {it + 1} [{rec['phase']}] loss {value:.5f} |g| {info['grad_norm']:.3g} "
                f"{rec['seconds']:.2f}s")
        if test is not None and tcfg.eval_every and (it + 1) % tcfg.eval_every == 0:
            ev = {"step": it + 1, **_mean_eval(model, params, test, tcfg.mode, tcfg.eval_pairs, dtype)}
            evals.append(ev)
            if log:
                log(f"eval step {it + 1}: model {ev['model']:.5f} coarse {ev['coarse']:.5f}")
        if out is not None and tcfg.checkpoint_every and (it + 1) % tcfg.checkpoint_every == 0:
            save_checkpoint(snapshot(it + 1), out / "checkpoint")
    ckpt = snapshot(total)
    if out is not None:
        save_checkpoint(ckpt, out / "checkpoint")
        write_csv(out / "train_log.csv", list(records[0]) if records else ["step"],
                  [list(r.values()) for r in records])
        if evals:
            write_csv(out / "eval_log.csv", ["step", "model", "coarse"],
                      [[e["step"], e["model"], e["coarse"]] for e in evals])
    return TrainResult(ckpt, records, evals)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def hybrid_rollout(u0: GridField, steps: int, model: SpectralElementTransformer | None, params,
                   mode: str, coarse: SolverConfig | None, dtype=torch.float64) -> list[GridField]:
    """Free-running rollout; ``model=None`` runs the coarse solver alone.

    Correction mode takes one coarse step of ``record_dt`` and adds the
    learned correction, direct mode applies the model alone.
    """
    frames = [u0]
    u = u0
    for n in range(steps):
        s = None
        if mode == "correction" or model is None:
            s = coarse_step(u, coarse)
        if model is None:
            nxt = s.values
        else:
            with torch.no_grad():
                x = torch.from_numpy(u.values).to(dtype)[None]
                st = None if s is None else torch.from_numpy(s.values).to(dtype)[None]
                nxt = model.apply(params, x, st, mode)[0].to(torch.float64).numpy()
        t = u.time + (coarse.record_dt if coarse is not None else 0.0)
        u = GridField(nxt, u.lengths, time=t, channels=u.channels)
        frames.append(u)
    return frames


@dataclass
class EvalResult:
    times: np.ndarray
    hybrid: dict[str, np.ndarray]  # metric -> mean over trajectories per time
    coarse: dict[str, np.ndarray]
    drift: dict[str, float]
    failures: list[str]
    spectra: dict[str, np.ndarray]
    structure: dict[str, np.ndarray]


def _drift(balance) -> float:
    """Relative linear drift of the conserved budget series over the horizon."""
    t, c = balance.t, balance.conserved
    slope = np.polyfit(t - t[0], c, 1)[0]
    return float(abs(slope) * (t[-1] - t[0]) / np.mean(balance.k))


def evaluate(ckpt: Checkpoint | None, test: DatasetManifest, out_dir: str | Path | None = None,
             horizon: int | None = None, coarse_resolution: int | None = None,
             log: Callable[[str], None] | None = None) -> EvalResult:
    """Autoregressive hybrid rollouts against the test trajectories, with coarse-only columns."""
    solver_cfg = solver_config_of(test)
    if coarse_resolution is None:
        coarse_resolution = (ckpt.train_config.coarse_resolution if ckpt and ckpt.train_config
                             else int(test.trajectories[0].meta["output_resolution"]))
    coarse = _coarse_config(solver_cfg, coarse_resolution)
    mode = "direct" if ckpt is None else (ckpt.train_config.mode if ckpt.train_config else "correction")
    model = None if ckpt is None else ckpt.model()
    params = None if ckpt is None else ckpt.params
    dtype = params[next(iter(params))].dtype if params else torch.float64
    keys = ("rel_l2", "correlation", "vrmse")
    per = {"hybrid": {k: [] for k in keys}, "coarse": {k: [] for k in keys}}
    drifts = {"hybrid": [], "coarse": [], "reference": []}
    failures = []
    spectra = {"reference": [], "hybrid": [], "coarse": []}
    s3 = {"reference": [], "hybrid": [], "coarse": []}
    times = None
    for rec in test.trajectories:
        steps = len(rec.files) - 1 if horizon is None else min(horizon, len(rec.files) - 1)
        ref = [rec.snapshot(i) for i in range(steps + 1)]
        try:
            runs = {"hybrid": hybrid_rollout(ref[0], steps, model, params, mode, coarse, dtype)
                    if model is not None else None,
                    "coarse": hybrid_rollout(ref[0], steps, None, None, "correction", coarse)}
        except (BlowUpError, DivergenceError, FloatingPointError) as e:
            failures.append(f"seed {rec.meta['seed']}: {e}")
            if log:
                log(f"trajectory seed {rec.meta['seed']} failed: {e}")
            continue
        if runs["hybrid"] is None:
            runs["hybrid"] = runs["coarse"]
        times = np.array([g.time for g in ref]) - ref[0].time
        for name, frames in runs.items():
            m = [error_metrics(r, f) for r, f in zip(ref, frames)]
            for k in keys:
                per[name][k].append([x[k] for x in m])
            drifts[name].append(_drift(energy_balance(frames, coarse)))
            spectra[name].append(np.mean([energy_spectrum(f).energy for f in frames[1:]], 0))
            r = [ref[0].spacing[0] * j for j in (1, 2, 4, 8)]
            s3[name].append(np.mean([structure_function_s3(f, r) for f in frames[1:]], 0))
        drifts["reference"].append(_drift(energy_balance(ref, solver_cfg)))
        spectra["reference"].append(np.mean([energy_spectrum(f).energy for f in ref[1:]], 0))
        s3["reference"].append(np.mean([structure_function_s3(f, [ref[0].spacing[0] * j for j in (1, 2, 4, 8)])
                                        for f in ref[1:]], 0))
    if times is None:
        raise RuntimeError("every test trajectory failed: " + "; ".join(failures))
    agg = {name: {k: np.mean(np.asarray(v), 0) for k, v in d.items()} for name, d in per.items()}
    drift = {k: float(np.mean(v)) for k, v in drifts.items() if v}
    spec = {k: np.mean(v, 0) for k, v in spectra.items() if v}
    sl = {k: np.mean(v, 0) for k, v in s3.items() if v}
    result = EvalResult(times, agg["hybrid"], agg["coarse"], drift, failures, spec, sl)
    if out_dir is not None:
        out = Path(out_dir)
        rows = [[float(t)] + [float(agg[n][k][i]) for n in ("hybrid", "coarse") for k in keys]
                for i, t in enumerate(times)]
        write_csv(out / "metrics.csv", ["time"] + [f"{n}_{k}" for n in ("hybrid", "coarse") for k in keys], rows)
        names = list(spec)
        write_csv(out / "spectrum.csv", ["k"] + names,
                  [[i] + [float(spec[n][i]) for n in names] for i in range(len(spec[names[0]]))])
        r = [ref[0].spacing[0] * j for j in (1, 2, 4, 8)]
        write_csv(out / "structure.csv", ["r"] + names,
                  [[float(r[i])] + [float(sl[n][i]) for n in names] for i in range(len(r))])
        write_csv(out / "energy.csv", ["series", "drift"], [[k, v] for k, v in drift.items()])
    return result

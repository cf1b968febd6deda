"""Learning a correction for a coarse solver, end to end.

1. Simulate a few Kolmogorov-flow trajectories at high resolution and store
   them downsampled, each frame paired with one coarse-solver step from the
   previous frame.
2. Train the transformer to correct that coarse step.
3. Compare one-step errors on held-out trajectories and run a free hybrid
   rollout.

The defaults are small enough for a laptop (a few minutes). The acceptance
suite runs the same pipeline with a 256^2 reference and the full desk model.

Run: python demos/03_learned_correction.py [--steps N] [--out DIR]
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np
import torch

from turbsem import tensor as tc
from turbsem.diagnostics import error_metrics
from turbsem.model import ModelConfig
from turbsem.solver import SolverConfig
from turbsem.training import (
    TrainConfig,
    _coarse_config,
    generate_dataset,
    hybrid_rollout,
    load_pairs,
    relative_errors,
    train,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    root = args.out or Path(tempfile.mkdtemp(prefix="turbsem_demo_"))

    solver = SolverConfig.kf4(resolution=128, output_resolution=32, burn_in=10.0, duration=5.0)
    print(f"generating data under {root}")
    generate_dataset(solver, [0, 1, 2], "train", root, coarse_resolution=32)
    test = generate_dataset(solver, [50], "test", root, coarse_resolution=32)

    model_cfg = ModelConfig.desk2d(layers=3, elements=4, modes=10)
    tcfg = TrainConfig(train_manifest=str(root / "train.txt"), steps=args.steps, batch_size=4, lr=1e-3,
                       coarse_resolution=32, dtype="float32", log_every=50)
    res = train(tcfg, model_cfg, root / "run", log=print)
    ck = res.checkpoint
    print(f"correction scale alpha = {ck.model_config.alpha:.3g} (rms of target minus coarse step)")

    model = ck.model()
    params = tc.ParamSet({k: v.to(torch.float64) for k, v in ck.params.items()})
    data = load_pairs(test)
    u, y, s = data.batch(data.pairs)
    with torch.no_grad():
        hybrid = relative_errors(model.apply(params, u, s, "correction"), y).mean().item()
    coarse = relative_errors(s, y).mean().item()
    print(f"\nheld-out one-step relative error: coarse {coarse:.4f}, hybrid {hybrid:.4f}")

    coarse_cfg = _coarse_config(solver, 32)
    rec = test.trajectories[0]
    horizon = min(20, len(rec.files) - 1)
    ref = [rec.snapshot(i) for i in range(horizon + 1)]
    runs = {"coarse": hybrid_rollout(ref[0], horizon, None, None, "correction", coarse_cfg),
            "hybrid": hybrid_rollout(ref[0], horizon, model, params, "correction", coarse_cfg)}
    print("\nfree rollout, relative L2 error against the reference")
    print(" step   coarse   hybrid")
    for n in range(0, horizon + 1, 4):
        row = [error_metrics(ref[n], runs[k][n])["rel_l2"] for k in ("coarse", "hybrid")]
        print(f"{n:5d}  {row[0]:7.4f}  {row[1]:7.4f}")
    e = [0.5 * np.mean(f.values[..., 0] ** 2) for f in runs["hybrid"]]
    print(f"hybrid enstrophy from {e[0]:.3f} to {e[-1]:.3f} over {horizon} steps")


if __name__ == "__main__":
    main()

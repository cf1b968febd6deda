"""Running a model on a larger domain than it was trained on.

The same weights are evaluated on a periodic domain rho times larger. The
attention is then restricted to a window of the original element count.
When the input is the small field tiled rho x rho, every token sees exactly
the neighbourhood it saw on the small domain, so the output is the tiled
small output. The cost grows with the number of tokens, not with its square.

Run: python demos/04_domain_expansion.py [--checkpoint PATH]
"""

import argparse
import math
import time

import numpy as np
import torch

from turbsem.basis import GridField
from turbsem.model import ModelConfig, forward, init_params
from turbsem.training import load_checkpoint


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", default=None, help="trained checkpoint; random weights otherwise")
    ap.add_argument("--resolution", type=int, default=64)
    args = ap.parse_args()

    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        cfg, params = ck.model_config, ck.params
    else:
        cfg = ModelConfig.desk2d()
        params = init_params(cfg, 0)
        g = torch.Generator().manual_seed(0)
        for k in params:  # wake up the near-zero kernels so the output is not trivially small
            if k.endswith((".re", ".im")) or k.startswith("out."):
                params[k] = params[k] + 0.05 * torch.randn(params[k].shape, generator=g, dtype=params[k].dtype)
    mode = "correction" if cfg.in_channels > cfg.out_channels else "direct"
    C = cfg.out_channels

    n = args.resolution
    x = np.arange(n) * cfg.length / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    base = np.stack([np.sin(X + 2 * Y) + 0.5 * np.cos(3 * X), np.cos(2 * X - Y)][:C], -1)
    u = GridField(base, (cfg.length,) * 2)
    star = GridField(0.9 * base, u.lengths) if mode == "correction" else None
    small, t1 = timed(lambda: forward(mode, u, star, cfg, params))
    print(f"training domain {cfg.length / math.pi:.0f}pi, {cfg.elements}^2 elements: {t1:.2f} s")

    for rho in (2, 3):
        big_cfg = cfg.tiled(rho)
        tile = lambda g: None if g is None else GridField(np.tile(g.values, (rho, rho, 1)), (cfg.length * rho,) * 2)
        big, t = timed(lambda: forward(mode, tile(u), tile(star), big_cfg, params))
        ref = np.tile(small.values, (rho, rho, 1))
        dev = np.abs(big.values - ref).max() / np.abs(ref).max()
        print(f"rho={rho}: {big_cfg.elements}^2 elements, window {big_cfg.window}, "
              f"{t:.2f} s ({t / t1:.1f}x for {rho * rho}x the tokens), max deviation from tiled output {dev:.1e}")


if __name__ == "__main__":
    main()

"""Time one denoiser call as the number of generated points grows.

Self-attention runs on a fixed set of latent tokens, so the cost per call
grows with M only through the per-point embedding and cross-attention.
"""
from __future__ import annotations

import numpy as np

from polyhex import dualnet
from polyhex.cli import benchmark_sweep

model = dualnet.PolycubeNet(seed=0).astype(np.float32)
cond = np.random.default_rng(0).normal(size=(4096, 3))
rows = benchmark_sweep(model, cond, [2 ** k for k in range(10, 16)], None, repeat=1, seed=0)
for m, sec, tokens in rows:
    print(f"M={m:>6}  {1e6 * sec / m:7.2f} us/point  self-attention tokens {tokens}")

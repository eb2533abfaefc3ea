"""Fuse random BiNeal chains and check the packed engine against the reference, bit for bit."""

import argparse
import time

import numpy as np

from bnnkit.cli import verify
from bnnkit.container import ModelContainer
from bnnkit.fusion import fuse_graph
from bnnkit.graphs import build_chain
from bnnkit.models import init_training_tensors


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--models", type=int, default=20)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--hw", type=int, default=8)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    rng = np.random.default_rng(args.seed)
    bad = total = 0
    start = time.perf_counter()
    for i in range(args.models):
        g = build_chain(3, args.channels, args.hw, stem=bool(i % 2), downsample_at=(1,) if i % 3 == 0 else ())
        tensors = init_training_tensors(g, rng, dyadic=bool(i % 4 == 1))
        fg, ft = fuse_graph(g, tensors)
        b, n, _ = verify(ModelContainer("training", g, tensors), ModelContainer("fused", fg, ft),
                         args.trials, args.seed + i, args.threads)
        bad, total = bad + b, total + n
    print(f"{args.models} models: {bad} mismatches in {total} elements "
          f"({time.perf_counter() - start:.1f} s)")
    raise SystemExit(0 if bad == 0 else 1)


if __name__ == "__main__":
    main()

"""Which ResNet-18 stage shape best explains the published block cycle counts?"""

import argparse

from bnnkit.costmodel import shape_search


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--skip-kernel", type=int, default=3)
    args = p.parse_args()
    res = shape_search(skip_kernel=args.skip_kernel)
    for label, cands in res["per_row"].items():
        cells = "  ".join(f"s{s}: {e:+7.1%}" for s, e in cands.items())
        print(f"{label:28s} {cells}")
    for stage in res["ranking"]:
        print(f"stage {stage}: mean |log ratio| {res['joint'][stage]:.4f}")
    print(f"best: stage {res['best']}")


if __name__ == "__main__":
    main()

"""Network-level ResNet-18 cycle counts, with and without the 8-bit stem charged."""

import argparse

from bnnkit.costmodel import format_rows, table2_rows


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--skip-kernel", type=int, default=3)
    p.add_argument("--charge-final-sign", action="store_true")
    args = p.parse_args()
    for stem in (True, False):
        rows = table2_rows(include_stem=stem, skip_kernel=args.skip_kernel,
                           charge_final_sign=args.charge_final_sign)
        print(f"== stem {'charged' if stem else 'excluded'}")
        print(format_rows(rows, 1e6, "M"))
        print(f"{sum(r.ok for r in rows)}/{len(rows)} rows within tolerance\n")


if __name__ == "__main__":
    main()

"""Block-level cycle counts of ResBlock, Bi-Real and BiNeal against published values."""

import argparse

from bnnkit.costmodel import TABLE1_STAGE, format_rows, table1_rows


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--stage", type=int, default=TABLE1_STAGE, choices=[2, 3, 4])
    p.add_argument("--skip-kernel", type=int, default=3)
    p.add_argument("--charge-final-sign", action="store_true")
    args = p.parse_args()
    rows = table1_rows(args.stage, skip_kernel=args.skip_kernel, charge_final_sign=args.charge_final_sign)
    print(format_rows(rows, 1e3, "K"))
    print(f"{sum(r.ok for r in rows)}/{len(rows)} rows within tolerance")


if __name__ == "__main__":
    main()

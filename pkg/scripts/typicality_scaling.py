"""Weighted vs counted fraction of typical Stern-Gerlach histories as n grows.

    python3 scripts/typicality_scaling.py [--p 0.7] [--window 0.05]

The weighted fraction tends to 1 while the unweighted count of sequences
in the window tends to 0 for p != 1/2.
"""
import argparse

from smworlds.scenarios import stern_gerlach_sequence


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--p", type=float, default=0.7)
    ap.add_argument("--window", type=float, default=0.05)
    args = ap.parse_args()
    print(f"{'n':>8}  {'weighted':>12}  {'counted':>12}  typical(eps=0.03)")
    for n in (10, 30, 100, 300, 1000, 10 ** 4, 10 ** 5, 10 ** 6):
        s = stern_gerlach_sequence(n=n, p=args.p, window=args.window).summary
        print(f"{n:>8}  {s['typical_weight']:>12.6g}  {s['count_fraction']:>12.6g}  {s['is_typical']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

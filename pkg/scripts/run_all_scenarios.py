"""Run every registered scenario at its defaults and print its checks.

    python3 scripts/run_all_scenarios.py [--seed S] [--quick]

``--quick`` shrinks the ensemble sizes so the sweep finishes in seconds.
"""
import argparse
import time

from smworlds.scenarios import SCENARIOS

QUICK = {"two_slit": {"trajectories": 100}, "grwm_cat": {"runs": 50}}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    failures = 0
    for sid, info in SCENARIOS.items():
        kwargs = QUICK.get(sid, {}) if args.quick else {}
        start = time.perf_counter()
        res = info.func(seed=args.seed, **kwargs)
        elapsed = time.perf_counter() - start
        bad = res.failed_checks()
        failures += bool(bad)
        checks = ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in res.checks.items())
        print(f"{sid:24s} [{info.section}] {elapsed:6.1f}s  {checks}")
    return 1 if failures else 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Run the three-seed trend study and print the averaged table plus each check.

    python scripts/run_trends.py [--seeds 0 1 2] [--shift 1] [--out trends.txt]
"""

import argparse
import dataclasses
import sys

from multimode_asr.experiments import StudyConfig, run_study, trend_checks


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--shift", type=int, default=1, help="distillation time shift for the multi-mode run")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--out", help="also write the summary here")
    args = ap.parse_args()

    cfg = StudyConfig(seeds=tuple(args.seeds))
    cfg.multi = dataclasses.replace(cfg.multi, s_shift=args.shift, steps=args.steps)
    cfg.baseline = dataclasses.replace(cfg.baseline, steps=args.steps)
    result = run_study(cfg, log=lambda msg: print(msg, flush=True))

    lines = [result.table()]
    checks = trend_checks(result, cfg)
    for key, (ok, detail) in checks.items():
        lines.append(f"7({key}) {'PASS' if ok else 'FAIL'}  {detail}")
    lines.append(f"total {result.seconds / 60:.1f} min")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    return 0 if all(ok for ok, _ in checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())

"""Howling incidence and SNR against loop delay (2.5 to 32.5 ms).

Enhancers whose processing latency exceeds the delay fail their cell and
show up as nan rows.

    python scripts/delay_sweep.py --spec scripts/specs/toy_sweep.json --checkpoint runs/toy/model.crn
"""
import argparse
from pathlib import Path

from feedback_forge.cli import load_runspec, resolve_seed, run_sweep
from feedback_forge.metrics import sweep_csv, sweep_svg


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spec", default=str(Path(__file__).with_name("specs") / "toy_sweep.json"))
    ap.add_argument("--values", default="2.5,5,8,12.5,16,20,25,32.5")
    ap.add_argument("--enhancers", help="comma-separated; default from the spec")
    ap.add_argument("--checkpoint")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/delay_sweep")
    args = ap.parse_args()

    rs, _ = load_runspec(args.spec)
    names = args.enhancers.split(",") if args.enhancers else rs.sweep.get("enhancers")
    if args.checkpoint is None and names:
        names = [n for n in names if n not in ("crn", "hybrid")]
    values = [float(v) for v in args.values.split(",")]
    cells, rows, _ = run_sweep(rs, "delay_ms", values, resolve_seed(args.seed, rs.seed), names,
                               args.jobs, args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "delay_sweep.csv").write_text(sweep_csv(rows))
    (out / "howl.svg").write_text(sweep_svg(rows, "howl_pct_mean"))
    for r, c in zip(rows, cells):
        note = f"  failed: {c.errors[0]}" if c.errors and not c.reports else ""
        print(f"{r['enhancer']:>11s} {r['value']:5.1f} ms  snr {r['snr_db_mean']:8.2f}  "
              f"howl {r['howl_pct_mean']:6.1f}%{note}")


if __name__ == "__main__":
    main()

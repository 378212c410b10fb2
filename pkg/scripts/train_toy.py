"""Teacher-force a tiny CRN on toy scenes and compare it with the default system.

    python scripts/train_toy.py --out runs/toy
"""
import argparse
import json
from pathlib import Path

import numpy as np

from feedback_forge import crn as C
from feedback_forge.loop import run_controlled_loop, run_default_loop
from feedback_forge.metrics import evaluate_run
from feedback_forge.training import (TrainConfig, build_scene, example_from_scene, toy_scenario,
                                     train_in_a_loop, train_teacher_forcing, write_loss_csv)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--method", default="teacher-forcing", choices=("teacher-forcing", "in-a-loop"))
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--n-train", type=int, default=8)
    ap.add_argument("--n-test", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = C.CrnConfig(layers=((4, 4), (4, 2)))
    scenes = [build_scene(toy_scenario(seed=args.seed + k, duration_s=0.25))
              for k in range(args.n_train)]
    tc = TrainConfig(lr=args.lr, steps=args.steps, batch_size=args.n_train, seed=args.seed)
    p0 = C.init_params(cfg, args.seed)
    if args.method == "teacher-forcing":
        res = train_teacher_forcing(p0, cfg, [example_from_scene(s) for s in scenes], tc)
    else:
        res = train_in_a_loop(p0, cfg, scenes, tc)
    params = C.quantize(res.params)
    C.save_checkpoint(params, cfg, out / "model.crn")
    write_loss_csv(res.trace, out / "loss.csv")
    print(f"loss {res.trace[0][1]:.2f} -> {res.trace[-1][1]:.2f} dB over {len(res.trace)} steps")

    rows = []
    for k in range(args.n_test):
        scene = build_scene(toy_scenario(seed=1000 + args.seed + k, duration_s=1.0))
        base = evaluate_run(run_default_loop(scene.images, scene.paths, scene.loop), scene.target)
        run = run_controlled_loop(scene.images, scene.paths, scene.loop,
                                  C.make_crn_enhancer(params, cfg))
        crn = evaluate_run(run, scene.target)
        rows.append({"scene": k, "default": base.to_dict(), "crn": crn.to_dict()})
        print(f"scene {k}: default {base.snr_db:7.2f} dB / {base.howling_incidence_pct:5.1f}% howl"
              f" | crn {crn.snr_db:7.2f} dB / {crn.howling_incidence_pct:5.1f}% howl")
    summary = {
        "method": args.method, "steps": len(res.trace), "seed": args.seed,
        "loss_first": res.trace[0][1], "loss_last": res.trace[-1][1],
        "howl_default": float(np.mean([r["default"]["howling_incidence_pct"] for r in rows])),
        "howl_crn": float(np.mean([r["crn"]["howling_incidence_pct"] for r in rows])),
        "scenes": rows,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()

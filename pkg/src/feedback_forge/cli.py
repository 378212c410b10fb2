"""Command line entry point: paths, simulate, train and sweep.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numerical divergence.
Training and sweeps read a JSON (or TOML) run spec; flags override it.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import crn as C
from . import metrics as M
from .adaptive import (RlsDivergedError, SingularCovarianceError, make_hybrid_enhancer,
                       make_mcwf_enhancer, make_rls_enhancer)
from .loop import (LoopConfig, LoopConfigError, Passthrough, export_run,
                   run_controlled_loop)
from .room import (FeedbackPathSet, PathFileError, RoomSpec, build_feedback_paths,
                   glasses_geometry, load_paths, loop_gain_profile, save_paths)
from .signals import DEFAULT_FS, MonoSignal, MultiSignal, StftConfig, read_wav, speechlike
from .training import (ScenarioSpec, TrainConfig, TrainingDivergedError, build_scene,
                       example_from_scene, train_in_a_loop, train_teacher_forcing,
                       write_loss_csv)

log = logging.getLogger("feedback_forge")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
SEED_ENV = "FEEDBACK_FORGE_SEED"
ENHANCERS = ("none", "passthrough", "rls", "mcwf", "crn", "hybrid")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# run spec


@dataclass
class RunSpec:
    seed: int | None = None
    scenario: dict = field(default_factory=dict)
    n_scenes: int = 1
    loop: dict = field(default_factory=dict)
    crn: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    rls: dict = field(default_factory=dict)
    mcwf: dict = field(default_factory=dict)
    checkpoint: str | None = None
    init_seed: int | None = None


SWEEP_KEYS = {"axis", "values", "enhancers", "warmup_s", "ptpr_signal", "stft"}
MCWF_KEYS = {"alpha", "epsilon", "frame_len", "hop"}
SCENARIO_EXTRA = {"pure_delay"}


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(d: dict, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a table/object")
    bad = sorted(set(d) - allowed)
    if bad:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(bad)}")


def parse_runspec(doc: dict) -> RunSpec:
    """Validate a run-spec document; unknown keys anywhere are rejected."""
    _reject_unknown(doc, _field_names(RunSpec), "run spec")
    rs = RunSpec(**doc)
    _reject_unknown(rs.scenario, (_field_names(ScenarioSpec) - {"paths", "seed"}) | SCENARIO_EXTRA,
                    "scenario")
    if "room" in rs.scenario and rs.scenario["room"] is not None:
        _reject_unknown(rs.scenario["room"], _field_names(RoomSpec), "scenario.room")
    if "pure_delay" in rs.scenario:
        _reject_unknown(rs.scenario["pure_delay"], {"gains", "delay"}, "scenario.pure_delay")
    _reject_unknown(rs.loop, _field_names(LoopConfig), "loop")
    _reject_unknown(rs.crn, _field_names(C.CrnConfig), "crn")
    if "stft" in rs.crn:
        _reject_unknown(rs.crn["stft"], _field_names(StftConfig), "crn.stft")
    _reject_unknown(rs.train, _field_names(TrainConfig), "train")
    _reject_unknown(rs.sweep, SWEEP_KEYS, "sweep")
    _reject_unknown(rs.rls, {"order", "lam", "delta_init", "ref_mode", "ref_mic"}, "rls")
    _reject_unknown(rs.mcwf, MCWF_KEYS, "mcwf")
    if not isinstance(rs.n_scenes, int) or rs.n_scenes < 1:
        raise ConfigError("n_scenes must be a positive integer")
    return rs


def load_runspec(path) -> tuple[RunSpec, str]:
    """Parse a run spec file; returns the spec and the sha256 of its bytes."""
    raw = Path(path).read_bytes()
    if str(path).endswith(".toml"):
        try:
            import tomllib
        except ImportError:
            try:
                import tomli as tomllib
            except ImportError as err:
                raise ConfigError("TOML run specs need Python >= 3.11 or tomli") from err
        try:
            doc = tomllib.loads(raw.decode())
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"bad TOML: {err}") from err
    else:
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as err:
            raise ConfigError(f"bad JSON: {err}") from err
    return parse_runspec(doc), hashlib.sha256(raw).hexdigest()


def resolve_seed(*candidates) -> int:
    """First non-None candidate, else $FEEDBACK_FORGE_SEED, else 0."""
    for c in candidates:
        if c is not None:
            return int(c)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as err:
            raise ConfigError(f"{SEED_ENV} must be an integer") from err
    return 0


def scenario_specs(rs: RunSpec, master_seed: int) -> list:
    """``n_scenes`` copies of the scenario, each with a seed spawned from the master seed."""
    d = dict(rs.scenario)
    if d.get("room") is not None:
        d["room"] = RoomSpec(**{k: tuple(v) if isinstance(v, list) else v
                                for k, v in d["room"].items()})
    pd = d.pop("pure_delay", None)
    if pd is not None:
        d["paths"] = FeedbackPathSet.pure_delay(pd["gains"], int(pd["delay"]),
                                                d.get("sample_rate_hz", DEFAULT_FS))
    for k in ("gain_db", "delay_ms", "clip"):
        if isinstance(d.get(k), list):
            d[k] = tuple(d[k])
    seeds = np.random.SeedSequence(master_seed).generate_state(rs.n_scenes)
    return [ScenarioSpec(**d, seed=int(s)) for s in seeds]


def loop_config(rs: RunSpec, **override) -> LoopConfig:
    d = dict(rs.loop)
    d.update({k: v for k, v in override.items() if v is not None})
    return LoopConfig(**d)


def crn_config(rs: RunSpec) -> C.CrnConfig | None:
    return C.CrnConfig.from_dict(rs.crn) if rs.crn else None


def _mcwf_stft(rs: RunSpec) -> StftConfig:
    return StftConfig(int(rs.mcwf.get("frame_len", 128)), int(rs.mcwf.get("hop", 64)))


def enhancer_factory(name: str, rs: RunSpec, ref_mic: int = 0, checkpoint=None):
    """Map an enhancer id to ``f(scene) -> Enhancer``; "none" maps to None (default system)."""
    if name not in ENHANCERS:
        raise ConfigError(f"unknown enhancer {name!r}; choose from {', '.join(ENHANCERS)}")
    alpha = float(rs.mcwf.get("alpha", 0.05))
    eps = float(rs.mcwf.get("epsilon", 1e-6))
    rls = dict(rs.rls)
    rls.setdefault("ref_mic", ref_mic)
    if name == "none":
        return lambda scene: None
    if name == "passthrough":
        return lambda scene: Passthrough(ref_mic)
    if name == "rls":
        return lambda scene: make_rls_enhancer(**rls)
    if name == "mcwf":
        return lambda scene: make_mcwf_enhancer(
            _mcwf_stft(rs), alpha, eps, rls.get("order", 256), rls.get("lam", 0.999),
            rls.get("delta_init", 1e3), rls["ref_mic"])
    ckpt = checkpoint or rs.checkpoint
    if ckpt is None:
        raise ConfigError(f"enhancer {name!r} needs --checkpoint")
    params, cfg = C.load_checkpoint(ckpt, crn_config(rs))
    if name == "crn":
        return lambda scene: C.make_crn_enhancer(params, cfg)
    return lambda scene: make_hybrid_enhancer(C.make_crn_enhancer(params, cfg), _mcwf_stft(rs),
                                              alpha, eps)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands


def _floats(text: str, n: int | None = None, what: str = "values") -> list:
    try:
        vals = [float(v) for v in text.replace(" ", "").split(",") if v != ""]
    except ValueError as err:
        raise ConfigError(f"bad {what}: {text!r}") from err
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what} needs {n} comma-separated numbers")
    return vals


def cmd_paths(args) -> int:
    seed = resolve_seed(args.seed)
    room = RoomSpec(dims=tuple(_floats(args.room, 3, "--room")), absorption=args.absorption,
                    max_order=args.order)
    if args.geometry != "glasses":
        raise ConfigError(f"unknown geometry {args.geometry!r}")
    geom = glasses_geometry(seed=seed)
    for p in (*geom.mic_positions, *geom.speaker_positions, geom.source_position):
        if not room.contains(p):
            raise ConfigError(f"array position {np.round(p, 3).tolist()} lies outside the room")
    paths = build_feedback_paths(room, geom, args.fs)
    save_paths(paths, args.out)
    prof = loop_gain_profile(paths, args.gain_db)
    k = int(np.argmax(prof))
    peak_db = 20 * math.log10(max(float(prof[k]), 1e-300))
    summary = {
        "seed": seed, "out": str(args.out), "paths_sha256": paths.sha256(),
        "n_mics": paths.n_mics, "n_speakers": paths.n_speakers, "ir_len": paths.ir_len,
        "gain_db": args.gain_db, "peak_loop_gain_db": round(peak_db, 6),
        "peak_bin_hz": k * args.fs / (2 * (len(prof) - 1)), "unstable": bool(prof[k] > 1.0),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _load_source(args, fs: int):
    if args.source == "speechlike":
        seed = resolve_seed(args.seed)
        sig = speechlike(args.duration, fs, seed, args.level)
        return sig, {"source": "speechlike", "seed": seed}
    sig = read_wav(args.source)
    if sig.sample_rate_hz != fs:
        raise ConfigError(f"source sample rate {sig.sample_rate_hz} != {fs}")
    return sig, {"source": str(args.source), "source_sha256": file_sha256(args.source)}


def cmd_simulate(args) -> int:
    fs = DEFAULT_FS
    if args.paths:
        paths = load_paths(args.paths)
        prov = {"paths_file": str(args.paths), "paths_file_sha256": file_sha256(args.paths)}
    else:
        paths = build_feedback_paths(RoomSpec(), glasses_geometry(seed=resolve_seed(args.seed)), fs)
        prov = {"paths_file": None}
    src, sprov = _load_source(args, fs)
    prov.update(sprov)
    if isinstance(src, MultiSignal):
        target = MonoSignal(src.channels[args.ref_mic], fs)
    else:
        target = src
    cfg = LoopConfig(gain_db=args.gain_db, delay_ms=args.delay_ms, clip_lo=args.clip[0],
                     clip_hi=args.clip[1], block_size=args.block_size, ref_mic=args.ref_mic,
                     sample_rate_hz=fs)
    rs = RunSpec()
    if args.spec:
        rs, spec_hash = load_runspec(args.spec)
        prov["spec_sha256"] = spec_hash
    enh = enhancer_factory(args.enhancer, rs, args.ref_mic, args.checkpoint)(None)
    if enh is None:
        enh = Passthrough(args.ref_mic)
    out = Path(args.out)
    try:
        run = run_controlled_loop(src, paths, cfg, enh)
    except (RlsDivergedError, SingularCovarianceError, FloatingPointError) as err:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "metrics.json", {"error": str(err), "config": cfg.to_dict(),
                                           "enhancer": args.enhancer, **prov})
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    run.enhancer = args.enhancer
    export_run(run, out, prov)
    rep = M.evaluate_run(run, target, StftConfig(), args.warmup, ptpr_signal=args.ptpr_signal)
    _write_json(out / "metrics.json", {**rep.to_dict(), **prov})
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    rs, spec_hash = load_runspec(args.spec)
    seed = resolve_seed(args.seed, rs.seed)
    cfg = crn_config(rs) or C.CrnConfig()
    tcfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in rs.train.items()})
    if args.steps is not None:
        tcfg = dataclasses.replace(tcfg, steps=args.steps)
    if args.lr is not None:
        tcfg = dataclasses.replace(tcfg, lr=args.lr)
    scenes = [build_scene(s) for s in scenario_specs(rs, seed)]
    params = C.init_params(cfg, resolve_seed(rs.init_seed, seed))
    out = Path(args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(out.suffix + ".loss.csv")
    meta = {"seed": seed, "spec_sha256": spec_hash, "method": args.method,
            "config_sha256": cfg.digest(),
            "paths_sha256": sorted({s.meta["paths_sha256"] for s in scenes})}
    try:
        if args.method == "teacher-forcing":
            res = train_teacher_forcing(params, cfg, [example_from_scene(s) for s in scenes], tcfg)
        else:
            res = train_in_a_loop(params, cfg, scenes, tcfg)
    except TrainingDivergedError as err:
        C.save_checkpoint(C.quantize(err.last_good), cfg, out)
        write_loss_csv(err.trace, loss_csv)
        _write_json(str(out) + ".json", {**meta, "error": str(err), "steps": len(err.trace)})
        print(f"error: {err}; last finite parameters saved to {out}", file=sys.stderr)
        return EXIT_DIVERGED
    C.save_checkpoint(C.quantize(res.params), cfg, out)
    write_loss_csv(res.trace, loss_csv)
    _write_json(str(out) + ".json", {**meta, "steps": len(res.trace),
                                     "checkpoint_sha256": file_sha256(out)})
    first, last = res.trace[0][1], res.trace[-1][1]
    print(json.dumps({"steps": len(res.trace), "loss_db_first": first, "loss_db_last": last}))
    return EXIT_OK


def run_sweep(rs: RunSpec, axis: str, values: list, seed: int, enhancers=None, jobs: int = 1,
              checkpoint=None):
    """Library-level sweep used by the CLI.  Returns (cells, rows, scenes)."""
    axis = {"gain": "gain_db", "delay": "delay_ms"}.get(axis, axis)
    if not values:
        raise ConfigError("empty --values")
    sw = rs.sweep
    names = enhancers or sw.get("enhancers") or ["none"]
    base = loop_config(rs)
    scenes = [build_scene(s, base.block_size) for s in scenario_specs(rs, seed)]
    facs = {n: enhancer_factory(n, rs, base.ref_mic, checkpoint) for n in names}
    stft_cfg = StftConfig(*sw.get("stft", (512, 256)))
    warmup = float(sw.get("warmup_s", M.WARMUP_S))
    try:
        cells = M.sweep(axis, values, base, facs, scenes, stft_cfg, warmup,
                        sw.get("ptpr_signal", "speaker"), n_jobs=jobs)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return cells, M.sweep_rows(cells, warmup), scenes


def cmd_sweep(args) -> int:
    rs, spec_hash = load_runspec(args.spec) if args.spec else (RunSpec(), None)
    seed = resolve_seed(args.seed, rs.seed)
    values = _floats(args.values) if args.values is not None else list(rs.sweep.get("values", []))
    axis = args.axis or rs.sweep.get("axis")
    if axis is None:
        raise ConfigError("no sweep axis given")
    enh = args.enhancers.split(",") if args.enhancers else None
    cells, rows, scenes = run_sweep(rs, axis, values, seed, enh, args.jobs, args.checkpoint)
    outs = args.out.split(",")
    csv_path = Path(outs[0])
    csv_path.write_text(M.sweep_csv(rows))
    for extra in outs[1:]:
        Path(extra).write_text(M.sweep_svg(rows, args.metric))
    _write_json(str(csv_path) + ".json", {
        "seed": seed, "spec_sha256": spec_hash, "axis": rows[0]["axis"], "values": values,
        "scene_paths_sha256": [s.meta["paths_sha256"] for s in scenes],
        "failures": {f"{c.enhancer}@{c.value}": c.errors for c in cells if c.errors},
        "pesq": "not implemented",
    })
    n_ok = sum(1 for c in cells if c.reports)
    print(f"{n_ok}/{len(cells)} cells succeeded; wrote {csv_path}")
    return EXIT_OK if n_ok else EXIT_DIVERGED


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feedback-forge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    a = sub.add_parser("paths", help="build image-method feedback paths (FPS1)")
    a.add_argument("--room", default="5,4,3", help="Lx,Ly,Lz in metres")
    a.add_argument("--absorption", type=float, default=0.2)
    a.add_argument("--order", type=int, default=6)
    a.add_argument("--geometry", default="glasses")
    a.add_argument("--fs", type=int, default=DEFAULT_FS)
    a.add_argument("--gain-db", type=float, default=40.0, help="gain for the loop-gain summary")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_paths)

    s = sub.add_parser("simulate", help="run the closed loop and score it")
    s.add_argument("--source", default="speechlike", help="16 kHz WAV or 'speechlike'")
    s.add_argument("--duration", type=float, default=4.0)
    s.add_argument("--level", type=float, default=0.003)
    s.add_argument("--paths", help="FPS1 file (default: image method, glasses geometry)")
    s.add_argument("--gain-db", type=float, default=40.0)
    s.add_argument("--delay-ms", type=float, default=8.0)
    s.add_argument("--clip", type=float, nargs=2, default=(-1000.0, 1000.0))
    s.add_argument("--block-size", type=int, default=64)
    s.add_argument("--ref-mic", type=int, default=0)
    s.add_argument("--enhancer", default="none", choices=ENHANCERS)
    s.add_argument("--checkpoint")
    s.add_argument("--spec", help="run spec supplying rls/mcwf/crn settings")
    s.add_argument("--warmup", type=float, default=M.WARMUP_S)
    s.add_argument("--ptpr-signal", default="speaker", choices=("speaker", "enhanced"))
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a CRN")
    t.add_argument("--method", required=True, choices=("teacher-forcing", "in-a-loop"))
    t.add_argument("--spec", required=True)
    t.add_argument("--out", required=True, help="CRN1 checkpoint path")
    t.add_argument("--loss-csv")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    w = sub.add_parser("sweep", help="gain or delay sweep to CSV (and SVG)")
    w.add_argument("--axis", choices=("gain", "delay", "gain_db", "delay_ms"))
    w.add_argument("--values", help="comma-separated values")
    w.add_argument("--spec")
    w.add_argument("--enhancers", help=f"comma-separated subset of {','.join(ENHANCERS)}")
    w.add_argument("--checkpoint")
    w.add_argument("--metric", default="howl_pct_mean", help="metric for the SVG plot")
    w.add_argument("--jobs", type=int, default=1)
    w.add_argument("--seed", type=int)
    w.add_argument("--out", required=True, help="out.csv[,out.svg]")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingDivergedError, RlsDivergedError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (PathFileError, C.CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, LoopConfigError, ValueError, TypeError, KeyError, IndexError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

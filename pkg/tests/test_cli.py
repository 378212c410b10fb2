import json

import numpy as np
import pytest

from feedback_forge import crn as C
from feedback_forge.cli import (EXIT_CONFIG, EXIT_OK, SEED_ENV, ConfigError, RunSpec, load_runspec,
                                main, parse_runspec, resolve_seed, run_sweep)
from feedback_forge.loop import LoopConfig, run_controlled_loop
from feedback_forge.metrics import evaluate_run, sweep_csv
from feedback_forge.room import load_paths
from feedback_forge.signals import read_wav, speechlike

TOY = {
    "seed": 5,
    "n_scenes": 2,
    "scenario": {"duration_s": 0.25, "pure_delay": {"gains": [0.05, 0.025], "delay": 2}},
    "crn": {"layers": [[4, 4], [4, 2]]},
    "train": {"lr": 0.01, "steps": 30, "batch_size": 2},
}
# sweeps score after a 0.25 s warmup, so their scenes must be longer
SWEEP_TOY = dict(TOY, scenario={"duration_s": 0.6,
                                "pure_delay": {"gains": [0.05, 0.025], "delay": 2}})


def write_spec(tmp_path, doc, name="spec.json"):
    f = tmp_path / name
    f.write_text(json.dumps(doc))
    return f


@pytest.fixture
def room_paths(tmp_path):
    f = tmp_path / "p.fps1"
    assert main(["paths", "--order", "2", "--seed", "1", "--out", str(f)]) == EXIT_OK
    return f


def test_paths_deterministic(tmp_path, capsys, room_paths):
    again = tmp_path / "q.fps1"
    assert main(["paths", "--order", "2", "--seed", "1", "--out", str(again)]) == EXIT_OK
    assert room_paths.read_bytes() == again.read_bytes()
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["seed"] == 1 and summary["n_mics"] == 5 and summary["n_speakers"] == 2
    assert summary["paths_sha256"] == load_paths(again).sha256()


def test_paths_invalid_room(tmp_path, capsys):
    assert main(["paths", "--room", "1,2", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["paths", "--room", "0.5,0.5,0.5", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err
    assert main(["paths", "--bogus"]) == EXIT_CONFIG


def _simulate(tmp_path, name, paths, *extra):
    out = tmp_path / name
    code = main(["simulate", "--paths", str(paths), "--duration", "0.5", "--seed", "2",
                 "--out", str(out), *extra])
    return code, out


def test_simulate_none_equals_passthrough(tmp_path, room_paths):
    code_a, a = _simulate(tmp_path, "a", room_paths, "--enhancer", "none")
    code_b, b = _simulate(tmp_path, "b", room_paths, "--enhancer", "passthrough")
    assert code_a == code_b == EXIT_OK
    for wav in ("mics.wav", "speaker.wav", "enhanced.wav"):
        assert (a / wav).read_bytes() == (b / wav).read_bytes()
    ma = json.loads((a / "metrics.json").read_text())
    assert ma["gain_db"] == 40.0 and ma["delay_ms"] == 8.0 and ma["enhancer"] == "none"


def test_simulate_crn_matches_library(tmp_path, room_paths):
    cfg = C.CrnConfig(layers=((10, 4), (4, 2)))
    ckpt = tmp_path / "m.crn"
    C.save_checkpoint(C.init_params(cfg, 3), cfg, ckpt)
    code, out = _simulate(tmp_path, "c", room_paths, "--enhancer", "crn", "--checkpoint", str(ckpt),
                          "--gain-db", "20")
    assert code == EXIT_OK
    params, cfg2 = C.load_checkpoint(ckpt)
    src = speechlike(0.5, 16000, 2, 0.003)
    run = run_controlled_loop(src, load_paths(room_paths), LoopConfig(gain_db=20.0),
                              C.make_crn_enhancer(params, cfg2))
    rep = evaluate_run(run, src)
    got = json.loads((out / "metrics.json").read_text())
    assert got["snr_db"] == rep.snr_db and got["howling_incidence_pct"] == rep.howling_incidence_pct
    assert np.allclose(read_wav(out / "enhanced.wav").samples, run.enhanced.samples, atol=1e-6)


def test_simulate_needs_checkpoint(tmp_path, room_paths):
    code, _ = _simulate(tmp_path, "d", room_paths, "--enhancer", "crn")
    assert code == EXIT_CONFIG


def test_train_teacher_forcing_reproducible(tmp_path, capsys):
    spec = write_spec(tmp_path, TOY)
    outs = []
    for name in ("a", "b"):
        ckpt = tmp_path / f"{name}.crn"
        assert main(["train", "--method", "teacher-forcing", "--spec", str(spec),
                     "--out", str(ckpt)]) == EXIT_OK
        outs.append(ckpt)
    csv_a = (tmp_path / "a.crn.loss.csv").read_text()
    assert csv_a == (tmp_path / "b.crn.loss.csv").read_text()
    assert outs[0].read_bytes() == outs[1].read_bytes()
    losses = [float(line.split(",")[1]) for line in csv_a.splitlines()[1:]]
    assert len(losses) == 30 and losses[-1] < losses[0]
    meta = json.loads((tmp_path / "a.crn.json").read_text())
    assert meta["seed"] == 5 and len(meta["spec_sha256"]) == 64


def test_in_loop_zero_paths_matches_teacher_forcing(tmp_path):
    doc = json.loads(json.dumps(TOY))
    doc["scenario"]["pure_delay"]["gains"] = [0.0, 0.0]
    doc["train"]["steps"] = 10
    spec = write_spec(tmp_path, doc)
    for method in ("teacher-forcing", "in-a-loop"):
        assert main(["train", "--method", method, "--spec", str(spec),
                     "--out", str(tmp_path / f"{method}.crn")]) == EXIT_OK
    assert (tmp_path / "teacher-forcing.crn").read_bytes() == (tmp_path / "in-a-loop.crn").read_bytes()


def test_train_divergence_exit_code(tmp_path):
    doc = json.loads(json.dumps(TOY))
    doc["train"] = {"lr": 1e300, "steps": 5, "optimizer": "sgd"}
    spec = write_spec(tmp_path, doc)
    with np.errstate(all="ignore"):
        code = main(["train", "--method", "teacher-forcing", "--spec", str(spec),
                     "--out", str(tmp_path / "x.crn")])
    assert code == 4
    C.load_checkpoint(tmp_path / "x.crn")  # last finite parameters are kept


def test_sweep_matches_library(tmp_path):
    spec = write_spec(tmp_path, SWEEP_TOY)
    out = tmp_path / "s.csv"
    svg = tmp_path / "s.svg"
    assert main(["sweep", "--spec", str(spec), "--axis", "gain", "--values", "40,50,60,75",
                 "--enhancers", "none,passthrough", "--out", f"{out},{svg}"]) == EXIT_OK
    rs, _ = load_runspec(spec)
    _, rows, _ = run_sweep(rs, "gain", [40, 50, 60, 75], 5, ["none", "passthrough"])
    assert out.read_text() == sweep_csv(rows)
    assert len(out.read_text().splitlines()) == 9
    assert svg.read_text().startswith("<svg")
    side = json.loads((tmp_path / "s.csv.json").read_text())
    assert side["seed"] == 5 and side["pesq"] == "not implemented"


def test_sweep_delay_axis(tmp_path):
    spec = write_spec(tmp_path, SWEEP_TOY)
    out = tmp_path / "d.csv"
    assert main(["sweep", "--spec", str(spec), "--axis", "delay", "--values", "2.5,8,16,32.5",
                 "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert len(lines) == 5 and lines[1].startswith("none,delay_ms,2.500000,")


def test_sweep_config_errors(tmp_path):
    spec = write_spec(tmp_path, SWEEP_TOY)
    base = ["sweep", "--spec", str(spec), "--axis", "gain", "--out", str(tmp_path / "e.csv")]
    assert main(base + ["--values", ""]) == EXIT_CONFIG
    bad = write_spec(tmp_path, dict(SWEEP_TOY, colour="red"), "bad.json")
    assert main(["sweep", "--spec", str(bad), "--axis", "gain", "--values", "40",
                 "--out", str(tmp_path / "e.csv")]) == EXIT_CONFIG
    nested = json.loads(json.dumps(TOY))
    nested["scenario"]["gian_db"] = 40
    bad = write_spec(tmp_path, nested, "bad2.json")
    assert main(["sweep", "--spec", str(bad), "--axis", "gain", "--values", "40",
                 "--out", str(tmp_path / "e.csv")]) == EXIT_CONFIG
    assert main(["sweep", "--spec", str(tmp_path / "missing.json"), "--axis", "gain",
                 "--values", "40", "--out", str(tmp_path / "e.csv")]) == 3


def test_seed_from_environment(tmp_path, monkeypatch):
    doc = {k: v for k, v in SWEEP_TOY.items() if k != "seed"}
    spec = write_spec(tmp_path, doc)
    args = ["sweep", "--spec", str(spec), "--axis", "gain", "--values", "40"]
    monkeypatch.setenv(SEED_ENV, "9")
    assert main(args + ["--out", str(tmp_path / "env.csv")]) == EXIT_OK
    assert main(args + ["--seed", "9", "--out", str(tmp_path / "flag.csv")]) == EXIT_OK
    assert (tmp_path / "env.csv").read_bytes() == (tmp_path / "flag.csv").read_bytes()
    assert json.loads((tmp_path / "env.csv.json").read_text())["seed"] == 9
    monkeypatch.setenv(SEED_ENV, "x")
    with pytest.raises(ConfigError):
        resolve_seed(None)
    monkeypatch.delenv(SEED_ENV)
    assert resolve_seed(None, None) == 0 and resolve_seed(None, 3) == 3


def test_parse_runspec():
    rs = parse_runspec(TOY)
    assert isinstance(rs, RunSpec) and rs.n_scenes == 2
    with pytest.raises(ConfigError, match="unknown key"):
        parse_runspec({"loop": {"gain": 1}})
    with pytest.raises(ConfigError):
        parse_runspec({"n_scenes": 0})

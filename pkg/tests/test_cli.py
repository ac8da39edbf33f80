import re

import numpy as np
import pytest

from utflaw.cli import main
from utflaw.scan import FlawKind, read_truth_sidecar
from utflaw.suite import random_scan_config
from utflaw.synth import FlawSpec, SynthConfig, format_synth_config


def _gen(tmp, name, config):
    cfg_path = tmp / f"{name}.cfg"
    cfg_path.write_text(format_synth_config(config))
    scan = tmp / f"{name}.utb"
    assert main(["gen", "--config", str(cfg_path), str(scan)]) == 0
    return scan


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Scans generated, bundled and trained entirely through the CLI."""
    tmp = tmp_path_factory.mktemp("cli")
    train_scans = [
        _gen(tmp, f"train{k}", random_scan_config(400 + k, axial_count=150, rotary_count=600, n_debris=6, n_crevice=2, n_fbbpf=2, n_shallow=3))
        for k in range(6)
    ]
    data = tmp / "train.ds"
    assert main(["build-dataset", *map(str, train_scans), "--size", "2000", "--seed", "3", "--out", str(data)]) == 0
    ckpt = tmp / "model.ckpt"
    argv = ["train", str(data), "--epochs", "20", "--dropout", "0.1", "--patience", "30", "--seed", "0", "--checkpoint", str(ckpt)]
    assert main(argv) == 0
    clean = _gen(tmp, "clean", SynthConfig(axial_count=150, rotary_count=600, rng_seed=77))
    debris = FlawSpec(FlawKind.DEBRIS, 15.0, 30.0, 3.5, 3.0, 0.2)
    flawed = _gen(tmp, "debris", SynthConfig(axial_count=150, rotary_count=600, rng_seed=78, flaws=(debris,)))
    return {"tmp": tmp, "ckpt": ckpt, "clean": clean, "flawed": flawed, "train": train_scans}


def _numbers(pattern, text):
    m = re.search(pattern, text)
    assert m, text
    return tuple(int(g) for g in m.groups())


def test_gen_writes_files_and_is_deterministic(tmp_path, capsys):
    cfg = random_scan_config(5, axial_count=10, rotary_count=40, n_debris=1, n_crevice=0, n_fbbpf=0, n_shallow=0)
    a = _gen(tmp_path, "a", cfg)
    out = capsys.readouterr().out
    assert f"seed {cfg.rng_seed} flaws {len(cfg.flaws)}" in out
    assert a.is_file() and a.with_suffix(".truth").is_file() and a.with_suffix(".depth.npy").is_file()
    b = _gen(tmp_path, "b", cfg)
    assert a.read_bytes() == b.read_bytes()
    assert a.with_suffix(".truth").read_bytes() == b.with_suffix(".truth").read_bytes()
    assert len(read_truth_sidecar(a.with_suffix(".truth"))) == len(cfg.flaws)


def test_gen_seed_override(tmp_path):
    cfg_path = tmp_path / "c.cfg"
    cfg_path.write_text(format_synth_config(SynthConfig(axial_count=5, rotary_count=20)))
    assert main(["gen", "--config", str(cfg_path), "--seed", "1", str(tmp_path / "s1.utb")]) == 0
    assert main(["gen", "--config", str(cfg_path), "--seed", "2", str(tmp_path / "s2.utb")]) == 0
    assert (tmp_path / "s1.utb").read_bytes() != (tmp_path / "s2.utb").read_bytes()


def test_gen_config_errors(tmp_path):
    assert main(["gen", "--config", str(tmp_path / "missing.cfg"), str(tmp_path / "x.utb")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("noise_sigma = -1\n")
    assert main(["gen", "--config", str(bad), str(tmp_path / "x.utb")]) == 2
    bad.write_text("no_such_key = 3\n")
    assert main(["gen", "--config", str(bad), str(tmp_path / "x.utb")]) == 2


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "m.ckpt")]) == 2
    assert main(["build-dataset", "--out", str(tmp_path / "d.ds")]) == 2


def test_build_dataset_needs_depth_field_and_enough_flaws(tmp_path):
    scan = _gen(tmp_path, "s", SynthConfig(axial_count=10, rotary_count=40))
    out = str(tmp_path / "d.ds")
    assert main(["build-dataset", str(scan), "--size", "8", "--out", out]) == 3  # no flaws at all
    scan.with_suffix(".depth.npy").unlink()
    assert main(["build-dataset", str(scan), "--size", "8", "--out", out]) == 3


def test_train_reports_metrics(pipeline, capsys):
    # the fixture already trained; re-run a single epoch to check the output lines
    data = pipeline["tmp"] / "train.ds"
    ckpt = pipeline["tmp"] / "one.ckpt"
    assert main(["train", str(data), "--epochs", "1", "--checkpoint", str(ckpt)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("epoch=0 loss=")
    assert re.search(r"cv accuracy=\d+\.\d\d% sensitivity=", out)
    assert ckpt.is_file()


def test_train_missing_dataset(tmp_path):
    assert main(["train", str(tmp_path / "none.ds"), "--checkpoint", str(tmp_path / "m.ckpt")]) == 3


def test_inspect_flaw_free_scan_retains_nothing(pipeline, capsys):
    capsys.readouterr()
    assert main(["inspect", str(pipeline["clean"]), "--checkpoint", str(pipeline["ckpt"])]) == 0
    out = capsys.readouterr().out
    points, _, retained = _numbers(r"inspection points (\d+) cnn positives (\d+) retained (\d+)", out)
    assert points == 30 * 30 and retained == 0
    stem = pipeline["clean"].with_suffix("")
    assert stem.with_suffix(".report.txt").is_file() and stem.with_suffix(".overlay.ppm").is_file()
    assert stem.with_suffix(".overlay.ppm").read_bytes().startswith(b"P6\n150 600\n255\n")  # axial across, rotary down


def test_inspect_finds_debris(pipeline, capsys):
    capsys.readouterr()
    assert main(["inspect", str(pipeline["flawed"]), "--checkpoint", str(pipeline["ckpt"])]) == 0
    out = capsys.readouterr().out
    hits, qualifying, _ = _numbers(r"flaw hits (\d+)/(\d+) open-field fp (\d+)", out)
    assert (hits, qualifying) == (1, 1)
    _, _, retained = _numbers(r"inspection points (\d+) cnn positives (\d+) retained (\d+)", out)
    assert retained >= 1
    hits_txt = pipeline["flawed"].with_suffix(".hits.txt").read_text()
    assert "debris" in hits_txt


def test_inspect_no_postproc_keeps_raw_positives(pipeline, tmp_path, capsys):
    capsys.readouterr()
    argv = ["inspect", str(pipeline["train"][0]), "--checkpoint", str(pipeline["ckpt"]), "--out-dir", str(tmp_path), "--no-postproc"]
    assert main(argv) == 0
    _, positives, retained = _numbers(r"inspection points (\d+) cnn positives (\d+) retained (\d+)", capsys.readouterr().out)
    assert positives == retained
    lines = (tmp_path / "train0.report.txt").read_text().splitlines()
    assert len(lines) == 1 + positives


def test_inspect_incompatible_scan(pipeline, tmp_path):
    scan = _gen(tmp_path, "odd", SynthConfig(axial_count=10, rotary_count=40, rotary_pitch_deg=0.2))
    assert main(["inspect", str(scan), "--checkpoint", str(pipeline["ckpt"])]) == 3
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert main(["inspect", str(pipeline["clean"]), "--checkpoint", str(junk)]) == 3


def test_eval_single_scan_matches_its_report(pipeline, capsys):
    capsys.readouterr()
    assert main(["eval", str(pipeline["flawed"]), "--checkpoint", str(pipeline["ckpt"])]) == 0
    out = capsys.readouterr().out
    h, q, fp, points = _numbers(r"hits (\d+)/(\d+) open_field_fp (\d+) points (\d+)", out)
    assert _numbers(r"per-flaw hit rate (\d+)/(\d+)", out) == (h, q)
    assert _numbers(r"open-field false positives (\d+)", out) == (fp,)
    assert _numbers(r"inspection points (\d+)", out) == (points,)
    assert "per-flaw hit rate 1/1 = 1.0000 (100.00%)" in out


def test_eval_suite_prints_fraction_and_percent(pipeline, capsys):
    capsys.readouterr()
    scans = [str(pipeline["flawed"]), str(pipeline["clean"]), str(pipeline["train"][1])]
    assert main(["eval", *scans, "--checkpoint", str(pipeline["ckpt"])]) == 0
    out = capsys.readouterr().out
    assert re.search(r"per-flaw hit rate \d+/\d+ = [01]\.\d{4} \(\d+\.\d\d%\)", out)
    assert _numbers(r"inspection points (\d+)", out.splitlines()[-3]) == (3 * 900,)


def test_eval_unreadable_input_is_listed(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.utb"
    bad.write_bytes(b"garbage")
    bad.with_suffix(".truth").write_text("")
    capsys.readouterr()
    code = main(["eval", str(bad), str(pipeline["flawed"]), "--checkpoint", str(pipeline["ckpt"])])
    out = capsys.readouterr().out
    assert code == 3
    assert f"unreadable {bad}" in out
    assert "per-flaw hit rate 1/1" in out


def test_depth_field_sidecar_matches_truth(pipeline):
    field = np.load(pipeline["flawed"].with_suffix(".depth.npy"))
    assert field.shape == (150, 600)
    assert field.max() == pytest.approx(0.2)

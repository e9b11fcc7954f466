import json
import subprocess
import sys

import numpy as np
import pytest

from ddnreg.cli import main
from ddnreg.volume import load_field, load_volume, read_pnm

SMALL_NET = ["--units", "1", "--growth", "2", "--base", "4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A phantom, its deformed copy, a patch set and a tiny checkpoint."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--phantom", "24,24,24", "--blobs", "6", "--grid", "8", "--sigma", "1.5",
                 "--seed", "2", "--out", str(d / "moved.ddnv"), "--out-field", str(d / "true.ddnf"),
                 "--out-source", str(d / "fixed.ddnv")]) == 0
    assert main(["extract", "--src", str(d / "moved.ddnv"), "--tgt", str(d / "fixed.ddnv"),
                 "--out", str(d / "pairs.ddnp"), "--count", "6", "--patch-size", "8",
                 "--threshold", "0"]) == 0
    assert main(["train", "--data", str(d / "pairs.ddnp"), "--out", str(d / "m.ddnc"), "--steps",
                 "3", "--lr", "1e-3", "--deterministic", "--log", str(d / "log.csv")] + SMALL_NET) == 0
    return d


def test_synth_outputs(workdir):
    moved, fixed = load_volume(workdir / "moved.ddnv"), load_volume(workdir / "fixed.ddnv")
    assert moved.dims == fixed.dims == (24, 24, 24)
    assert load_field(workdir / "true.ddnf").dims == (24, 24, 24)


def test_train_outputs(workdir):
    assert len((workdir / "log.csv").read_text().splitlines()) == 4


def test_info_on_each_format(capsys, workdir):
    kinds = {}
    for name in ("moved.ddnv", "true.ddnf", "pairs.ddnp", "m.ddnc"):
        code, out, _ = run(capsys, "info", workdir / name)
        assert code == 0
        kinds[name] = json.loads(out)
    assert kinds["moved.ddnv"]["kind"] == "volume"
    assert kinds["pairs.ddnp"]["count"] == 6
    assert kinds["m.ddnc"]["optimizer_step"] == 3


def test_register_eval_and_idempotence(capsys, workdir):
    outs = []
    for tag in ("a", "b"):
        code, _, _ = run(capsys, "register", "--model", workdir / "m.ddnc", "--src",
                         workdir / "moved.ddnv", "--tgt", workdir / "fixed.ddnv", "--out-field",
                         workdir / f"f{tag}.ddnf", "--out-warped", workdir / f"w{tag}.ddnv",
                         "--overlap", "0.5", "--deterministic")
        assert code == 0
        outs.append(((workdir / f"f{tag}.ddnf").read_bytes(), (workdir / f"w{tag}.ddnv").read_bytes()))
    assert outs[0] == outs[1]
    code, out, _ = run(capsys, "eval", "--a", workdir / "wa.ddnv", "--b", workdir / "fixed.ddnv",
                       "--bins", "32")
    assert code == 0
    cc, mi = (float(part.split("=")[1]) for part in out.split())
    assert -1 <= cc <= 1 and mi >= 0


def test_register_with_thread_env(capsys, workdir, monkeypatch):
    monkeypatch.setenv("DDN_THREADS", "2")
    code, _, _ = run(capsys, "register", "--model", workdir / "m.ddnc", "--src", workdir / "moved.ddnv",
                     "--tgt", workdir / "fixed.ddnv", "--out-field", workdir / "ft.ddnf",
                     "--out-warped", workdir / "wt.ddnv")
    assert code == 0
    monkeypatch.setenv("DDN_THREADS", "many")
    code, _, _ = run(capsys, "register", "--model", workdir / "m.ddnc", "--src", workdir / "moved.ddnv",
                     "--tgt", workdir / "fixed.ddnv", "--out-field", workdir / "ft.ddnf",
                     "--out-warped", workdir / "wt.ddnv")
    assert code == 1


def test_validate_prints_report(capsys, workdir):
    code, out, _ = run(capsys, "validate", "--model", workdir / "m.ddnc", "--vol",
                       workdir / "fixed.ddnv", "--grid", "8", "--sigma", "1.0", "--seed", "4")
    assert code == 0
    values = [float(v) for v in out.strip().split(",")]
    assert len(values) == 4


def test_images(capsys, workdir):
    code, _, _ = run(capsys, "overlay", "--tgt", workdir / "fixed.ddnv", "--reg", workdir / "fixed.ddnv",
                     "--out", workdir / "o.ppm")
    assert code == 0
    img = read_pnm(workdir / "o.ppm")
    assert img.shape == (24, 24, 3) and np.all(img[..., 0] == img[..., 1])
    code, _, _ = run(capsys, "diff", "--a", workdir / "fixed.ddnv", "--b", workdir / "fixed.ddnv",
                     "--axis", "x", "--index", "3", "--out", workdir / "d.pgm")
    assert code == 0
    assert np.all(read_pnm(workdir / "d.pgm") == 255)
    code, _, _ = run(capsys, "diff", "--a", workdir / "fixed.ddnv", "--b", workdir / "fixed.ddnv",
                     "--index", "99", "--out", workdir / "d.pgm")
    assert code == 2


def test_train_resume(capsys, workdir):
    code, out, _ = run(capsys, "train", "--data", workdir / "pairs.ddnp", "--out", workdir / "r.ddnc",
                       "--resume", workdir / "m.ddnc", "--steps", "2", "--deterministic")
    assert code == 0 and "steps=5" in out


def test_gradcheck_without_composite(capsys):
    code, out, _ = run(capsys, "gradcheck", "--size", "4", "--no-composite")
    assert code == 0
    assert "max_rel_error=" in out and "FAIL" not in out


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    code, _, err = run(capsys, "synth", "--out", "x.ddnv")
    assert code == 1 and "--vol or --phantom" in err


def test_data_errors(capsys, tmp_path):
    bad = tmp_path / "bad.ddnv"
    bad.write_bytes(b"DDNV" + b"\0" * 5)
    assert run(capsys, "info", bad)[0] == 2
    assert run(capsys, "info", tmp_path / "missing.ddnv")[0] == 2
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"hello world")
    assert run(capsys, "info", junk)[0] == 2


def test_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "ddnreg.cli", "register", "--help"],
                         capture_output=True, text=True, check=True).stdout
    assert "--out-field" in out and "--threads" in out

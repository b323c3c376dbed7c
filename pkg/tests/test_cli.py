import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from dafr import imaging as I
from dafr import model as M
from dafr.cli import main

TINY_PLAN = """
[plan]
synthetic_count = 2
synthetic_size = 36
stride = 3
max_iterations = 3

[network]
n = 1
m = 2
f_sub = 9
f_sub_R = 9

[optim]
batch_size = 4
"""


@pytest.fixture
def plan_file(tmp_path):
    path = tmp_path / "plan.ini"
    path.write_text(TINY_PLAN)
    return str(path)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_images(folder, count=3, size=24, rgb=False):
    folder.mkdir(exist_ok=True)
    rng = np.random.default_rng(0)
    for k in range(count):
        shape = (size, size, 3) if rgb else (size, size)
        arr = np.floor(rng.uniform(0, 256, size=shape))
        I.write_png(I.Image(arr, I.RGB if rgb else I.GRAY), folder / f"img{k}.png")
    return folder


@pytest.mark.parametrize("n,m,expected", [(20, 8, 35136), (16, 12, 52336), (1, 1, 8960)])
def test_param_count(capsys, n, m, expected):
    assert main(["param-count", "--n", str(n), "--m", str(m)]) == 0
    out = capsys.readouterr().out
    assert f"paper: {expected}" in out.splitlines()
    assert "weight_delta: 81" in out


def test_param_count_rejects_non_positive(capsys):
    assert main(["param-count", "--n", "0", "--m", "8"]) == 2
    assert "positive" in capsys.readouterr().err


def test_train_step1_writes_outputs(tmp_path, plan_file):
    out = tmp_path / "run"
    assert main(["train-step1", "--synthetic", "--config", plan_file, "--out", str(out)]) == 0
    model, meta = M.load_checkpoint(out / "model.ckpt")
    assert model.kind == M.RESIDUAL and meta["step"] == 3
    assert (out / "report.csv").read_text().count("\n") == 4
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train-step1" and manifest["seed"] == 0
    assert manifest["version"] == "0.1.0" and manifest["plan"]["network"]["m"] == 2


def test_train_seed_is_reproducible(tmp_path, plan_file):
    digests = []
    for run in ("a", "b", "c"):
        seed = "7" if run != "c" else "8"
        main(["train-step1", "--synthetic", "--config", plan_file, "--seed", seed, "--out", str(tmp_path / run)])
        digests.append((digest(tmp_path / run / "model.ckpt"), digest(tmp_path / run / "report.csv")))
    assert digests[0] == digests[1] and digests[0][0] != digests[2][0]
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 7


def test_train_needs_a_dataset(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train-step1", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_train_config_errors(tmp_path, plan_file):
    bad = tmp_path / "bad.ini"
    bad.write_text("[network]\nn = zero\n")
    assert main(["train-step1", "--synthetic", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    missing = str(tmp_path / "missing.ini")
    assert main(["train-step1", "--synthetic", "--config", missing, "--out", str(tmp_path / "o")]) == 2
    assert main(["train-step1", "--synthetic", "--config", plan_file, "--epochs", "0", "--out", str(tmp_path)]) == 2


def test_train_on_empty_dataset(tmp_path, plan_file):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["train-step1", "--dataset", str(empty), "--config", plan_file, "--out", str(tmp_path / "o")]) == 3


def test_train_from_folder(tmp_path, plan_file):
    data = write_images(tmp_path / "data", size=32, rgb=True)
    assert main(["train-step1", "--dataset", str(data), "--config", plan_file, "--out", str(tmp_path / "o")]) == 0


@pytest.fixture
def dafr_ckpt(tmp_path, plan_file):
    step1, step2 = tmp_path / "s1", tmp_path / "s2"
    assert main(["train-step1", "--synthetic", "--config", plan_file, "--out", str(step1)]) == 0
    assert main(["train-step2", "--synthetic", "--config", plan_file, "--pretrained",
                 str(step1 / "model.ckpt"), "--out", str(step2)]) == 0
    return step2 / "model.ckpt"


def test_train_step2_and_finetune(tmp_path, plan_file, dafr_ckpt):
    model, _ = M.load_checkpoint(dafr_ckpt)
    assert model.kind == M.DAFR and model.scale == 2
    out = tmp_path / "x3"
    args = ["finetune-scale", "--synthetic", "--config", plan_file, "--model", str(dafr_ckpt),
            "--out", str(out)]
    assert main(args + ["--scale", "3"]) == 0
    tuned, _ = M.load_checkpoint(out / "model.ckpt")
    assert tuned.scale == 3
    for a, b in zip(model.stack, tuned.stack):
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name])
    assert main(args + ["--scale", "2"]) == 2


def test_train_step2_rejects_wrong_pretrained(tmp_path, plan_file, dafr_ckpt):
    out = str(tmp_path / "o")
    args = ["train-step2", "--synthetic", "--config", plan_file, "--out", out, "--pretrained"]
    assert main(args + [str(dafr_ckpt)]) == 4
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"hello")
    assert main(args + [str(junk)]) == 4


@pytest.mark.parametrize("rgb", [False, True])
def test_sr(tmp_path, dafr_ckpt, rgb):
    src = write_images(tmp_path / "in", count=1, size=48, rgb=rgb) / "img0.png"
    dst = tmp_path / "out" / "hr.png"
    assert main(["sr", "--model", str(dafr_ckpt), "--input", str(src), "--output", str(dst), "--scale", "2"]) == 0
    out = I.read_png(dst)
    assert out.data.shape[:2] == (96, 96) and out.colorspace == (I.RGB if rgb else I.GRAY)
    assert json.loads((tmp_path / "out" / "hr.manifest.json").read_text())["scale"] == 2
    first = digest(dst)
    main(["sr", "--model", str(dafr_ckpt), "--input", str(src), "--output", str(dst)])
    assert digest(dst) == first


def test_sr_errors(tmp_path, dafr_ckpt):
    src = write_images(tmp_path / "in", count=1) / "img0.png"
    dst = str(tmp_path / "o.png")
    assert main(["sr", "--model", str(dafr_ckpt), "--input", str(src), "--output", dst, "--scale", "3"]) == 4
    broken = tmp_path / "broken.ckpt"
    data = bytearray(dafr_ckpt.read_bytes())
    data[:8] = b"XXXXXXXX"
    broken.write_bytes(bytes(data))
    assert main(["sr", "--model", str(broken), "--input", str(src), "--output", dst]) == 4
    assert main(["sr", "--model", str(dafr_ckpt), "--input", str(tmp_path / "none.png"), "--output", dst]) == 3


def test_eval_bicubic(tmp_path, capsys, caplog):
    data = write_images(tmp_path / "set")
    (data / "zz_broken.png").write_bytes(b"not a png")
    assert main(["eval", "--bicubic", "--dataset", str(data), "--scale", "2"]) == 0
    captured = capsys.readouterr()
    lines = captured.out.strip().splitlines()
    assert [line.split("\t")[0] for line in lines] == ["img0.png", "img1.png", "img2.png", "average"]
    values = [float(line.split("\t")[1]) for line in lines]
    assert all(np.isfinite(values)) and all(len(line.split("\t")[1].split(".")[1]) == 2 for line in lines)
    assert values[-1] == pytest.approx(np.mean(values[:-1]), abs=0.01)
    assert "zz_broken.png" in caplog.text
    assert main(["eval", "--bicubic", "--dataset", str(data), "--scale", "2", "--precise"]) == 0
    precise = capsys.readouterr().out.strip().splitlines()
    assert [float(line.split("\t")[1]) for line in precise] == pytest.approx(values, abs=0.005)
    main(["eval", "--bicubic", "--dataset", str(data), "--scale", "2", "--precise"])
    assert capsys.readouterr().out.strip().splitlines() == precise


def test_eval_errors(tmp_path, dafr_ckpt):
    data = write_images(tmp_path / "set", count=1)
    assert main(["eval", "--bicubic", "--dataset", str(data), "--scale", "1"]) == 2
    assert main(["eval", "--bicubic", "--dataset", str(data)]) == 2
    assert main(["eval", "--model", str(dafr_ckpt), "--dataset", str(data), "--scale", "3"]) == 4
    junk = tmp_path / "junk"
    junk.mkdir()
    (junk / "a.png").write_bytes(b"nope")
    assert main(["eval", "--bicubic", "--dataset", str(junk), "--scale", "2"]) == 3
    assert main(["eval", "--bicubic", "--dataset", str(tmp_path / "missing"), "--scale", "2"]) == 3


def test_eval_model(tmp_path, dafr_ckpt, capsys):
    data = write_images(tmp_path / "set", count=2)
    assert main(["eval", "--model", str(dafr_ckpt), "--dataset", str(data)]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].startswith("average\t")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dafr", "param-count", "--n", "8", "--m", "16"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "paper: 57728" in proc.stdout

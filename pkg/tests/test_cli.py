import json
import subprocess
import sys

import pytest

from c2af.cli import main
from c2af.data import load_container
from c2af.evaluation import read_report
from c2af.gradcheck import run_gradcheck, summarize

CONFIG = """\
steps = 8
warmup = 2
batch_size = 8
lr = 0.01
d_global = 3
conv_channels = 4
conv_kernels = 3
n_kernels = 2
eval_interval = 4
heads = complete, concat
"""


@pytest.fixture()
def workdir(tmp_path):
    (tmp_path / "train.cfg").write_text(CONFIG)
    rc = main([
        "synth", "--out", str(tmp_path / "d.c2af"), "--classes", "4", "--views", "2", "--samples", "48",
        "--length", "8", "--dims", "3,2", "--noise", "0.5", "--confusions", "0-1;2-3", "--seed", "2",
    ])
    assert rc == 0
    return tmp_path


def test_synth(workdir):
    ds = load_container(workdir / "d.c2af")
    assert (ds.n_views, ds.n_samples, ds.length, ds.dims, ds.n_classes) == (2, 48, 8, (3, 2), 4)


def test_synth_rejects_bad_design(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path / "x"), "--views", "2", "--dims", "2,2", "--classes", "3",
               "--confusions", "0-1;0-1"])
    assert rc == 2 and "indistinguishable" in capsys.readouterr().err


def test_train_eval_baseline(workdir):
    w = str(workdir)
    assert main(["train", "--data", f"{w}/d.c2af", "--config", f"{w}/train.cfg", "--out", f"{w}/m.ckpt",
                 "--log", f"{w}/log.jsonl", "--seed", "3"]) == 0
    records = [json.loads(line) for line in (workdir / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [4, 8]

    assert main(["eval", "--data", f"{w}/d.c2af", "--ckpt", f"{w}/m.ckpt", "--report", f"{w}/r.csv",
                 "--format", "csv"]) == 0
    reports = read_report(workdir / "r.csv")
    assert {r.mode for r in reports} == {"complete", "concat", "average", "max"}
    assert all(r.seed == 3 and r.fused_confusion.sum() == 8 for r in reports)

    for mode in ("concat", "average", "max"):
        assert main(["baseline", "--data", f"{w}/d.c2af", "--ckpt", f"{w}/m.ckpt", "--mode", mode,
                     "--report", f"{w}/{mode}.json"]) == 0
        (rep,) = read_report(workdir / f"{mode}.json")
        match = next(r for r in reports if r.mode == mode)
        assert rep.to_dict() == match.to_dict()


def test_baseline_concat_requires_head(workdir):
    w = str(workdir)
    (workdir / "plain.cfg").write_text(CONFIG.replace("complete, concat", "complete"))
    main(["train", "--data", f"{w}/d.c2af", "--config", f"{w}/plain.cfg", "--out", f"{w}/p.ckpt", "--log", f"{w}/l"])
    rc = main(["baseline", "--data", f"{w}/d.c2af", "--ckpt", f"{w}/p.ckpt", "--mode", "concat",
               "--report", f"{w}/c.json"])
    assert rc == 2


def test_ablate(workdir):
    w = str(workdir)
    assert main(["ablate", "--data", f"{w}/d.c2af", "--config", f"{w}/train.cfg", "--modes",
                 "complete,intra_only,fusion_only", "--seeds", "1,2", "--report", f"{w}/a.json"]) == 0
    reports = read_report(workdir / "a.json")
    assert [(r.seed, r.mode) for r in reports] == [
        (1, "complete"), (1, "intra_only"), (1, "fusion_only"), (2, "complete"), (2, "intra_only"), (2, "fusion_only")
    ]


def test_ablate_invalid_mode(workdir):
    w = str(workdir)
    rc = main(["ablate", "--data", f"{w}/d.c2af", "--config", f"{w}/train.cfg", "--modes", "everything",
               "--seeds", "1", "--report", f"{w}/a.json"])
    assert rc == 2


def test_missing_file(tmp_path):
    assert main(["eval", "--data", str(tmp_path / "none"), "--ckpt", str(tmp_path / "none"),
                 "--report", str(tmp_path / "r")]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "1", "--eps", "1e-5"]) == 0
    assert "gradcheck passed" in capsys.readouterr().out


def test_gradcheck_fails_on_bad_eps(capsys):
    # a huge step makes central differences inaccurate
    assert main(["gradcheck", "--seed", "1", "--eps", "0.5"]) == 1


def test_gradcheck_covers_every_tensor():
    errors = run_gradcheck(0)
    ok, lines = summarize(errors)
    assert ok and len(lines) == len(errors)
    assert any(name.startswith("view2.lstm") for name in errors)
    assert any(name.startswith("fusion.complete") for name in errors)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "c2af", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout

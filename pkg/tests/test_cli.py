import pytest

from nextloc.harness.cli import main
from nextloc.harness.report import RunReport, parse_table

CONFIG = """
[synth]
n_agents = 16
n_days = 14
name = tiny
[window]
M = 8
N = 3
[features]
d_t = 4
d_d = 4
d_dur = 2
d_xy = 4
[backbone]
layers = 1
heads = 2
d_model = 16
d_ff = 32
prompt = predict the next place
[schedule]
max_steps = 6
eval_every = 3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "exp.ini").write_text(CONFIG)
    assert main(["synth", "--config", str(root / "exp.ini"), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "exp.ini"), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_train_outputs(workdir):
    run = workdir / "run"
    for name in ("model.nxl", "report.txt", "report.tsv", "report.timing.json"):
        assert (run / name).exists()
    rep = RunReport.from_text((run / "report.txt").read_text())
    assert rep.steps == 6 and rep.datasets == ("tiny",)
    assert {r["split"] for r in parse_table((run / "report.tsv").read_text())} == {"train", "val", "test"}


def test_train_is_reproducible(workdir):
    out = workdir / "run2"
    assert main(["train", "--config", str(workdir / "exp.ini"), "--data", str(workdir / "data"), "--out", str(out)]) == 0
    assert (out / "report.txt").read_bytes() == (workdir / "run" / "report.txt").read_bytes()
    assert (out / "model.nxl").read_bytes() == (workdir / "run" / "model.nxl").read_bytes()


def test_evaluate_and_zero_shot(workdir):
    ini = str(workdir / "exp.ini")
    ckpt = str(workdir / "run" / "model.nxl")
    assert main(["evaluate", "--config", ini, "--checkpoint", ckpt, "--data", str(workdir / "data"), "--out", str(workdir / "eval")]) == 0
    assert (workdir / "eval" / "evaluation.txt").exists()
    other = workdir / "other.ini"
    other.write_text(CONFIG.replace("name = tiny", "name = other\nseed = 99\nscale_x = 2.5"))
    assert main(["synth", "--config", str(other), "--out", str(workdir / "other")]) == 0
    # a different city is refused by evaluate but fine for zero-shot
    assert main(["evaluate", "--config", ini, "--checkpoint", ckpt, "--data", str(workdir / "other")]) == 2
    assert main(["zero-shot", "--config", ini, "--checkpoint", ckpt, "--data", str(workdir / "other"), "--out", str(workdir / "zs")]) == 0
    rep = RunReport.from_text((workdir / "zs" / "zero_shot.txt").read_text())
    assert rep.mode == "zero-shot" and rep.retrieval_space == "normalized"


def test_predict_output(workdir):
    out = workdir / "pred.tsv"
    args = ["predict", "--config", str(workdir / "exp.ini"), "--checkpoint", str(workdir / "run" / "model.nxl"), "--data", str(workdir / "data"), "--k", "10", "--out", str(out)]
    assert main(args) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "pair\tx\ty\tranked_ids"
    assert all(len(line.split("\t")[3].split()) == 10 for line in lines[1:])
    assert main(args[:-4] + ["--k", "0"]) == 1


def test_gradcheck_and_keys(capsys):
    assert main(["gradcheck", "--pairs", "2", "--samples", "1"]) == 0
    assert "0 failures" in capsys.readouterr().out
    assert main(["keys"]) == 0
    assert "[schedule]" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv,code",
    [
        ([], 1),
        (["train", "--bogus"], 1),
        (["frobnicate"], 1),
        (["train", "--config", "/nonexistent.ini"], 2),
        (["evaluate", "--checkpoint", "/nonexistent.nxl"], 2),
    ],
)
def test_exit_codes(argv, code, capsys):
    assert main(argv) == code


def test_bad_config_key(tmp_path):
    (tmp_path / "bad.ini").write_text("[run]\nseeed = 3\n")
    assert main(["train", "--config", str(tmp_path / "bad.ini")]) == 1


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "bad.nxl").write_bytes(b"not a model")
    assert main(["predict", "--checkpoint", str(tmp_path / "bad.nxl")]) == 2

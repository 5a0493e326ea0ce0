import io
import os
from pathlib import Path

import pytest

from ctrgcn import cli

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TOY_DATA = ["--classes", "2", "--per-class", "5", "--graph", "toy5", "--frames", "8"]
TOY_MODEL = ["--channel-plan", "8,8", "--strides", "1,1", "--r", "4"]
TOY_TRAIN = ["--epochs", "2", "--lr", "0.05", "--warmup-epochs", "1", "--decay-epochs", "", "--batch-size", "4"]


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.run([str(a) for a in argv], stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def fields(line):
    return dict(part.split("=", 1) for part in line.split() if "=" in part)


@pytest.fixture()
def toy_run(tmp_path):
    data, run_dir = tmp_path / "data", tmp_path / "run"
    assert call("gen-data", *TOY_DATA, "--seed", 7, "--out", data)[0] == 0
    code, out, err = call("train", "--data", data, "--out", run_dir, *TOY_MODEL, *TOY_TRAIN, "--seed", 7)
    assert code == 0, err
    return tmp_path, data, run_dir


# -- examples ------------------------------------------------------------------

def test_gen_data_writes_dataset(tmp_path):
    code, out, _ = call("gen-data", "--classes", 4, "--per-class", 50, "--graph", "ntu25", "--frames", 16,
                        "--seed", 7, "--out", tmp_path / "d")
    assert code == 0 and "wrote 200 samples (160 train, 40 test)" in out
    manifest = (tmp_path / "d" / "manifest.txt").read_text().splitlines()
    assert manifest[0] == "# graph=ntu25 num_classes=4" and len(manifest) == 201


def test_check_equivalence_passes():
    code, out, _ = call("check-equivalence", "--trials", 100, "--seed", 1)
    lines = out.splitlines()
    assert code == 0 and lines[-1] == "pass=true"
    assert float(fields(lines[-2])["worst"]) < 1e-9


def test_count_params_ntu120():
    code, out, _ = call("count-params", "--config", CONFIGS / "ntu120.cfg")
    total = int(out.splitlines()[-1].split()[-1])
    assert code == 0 and abs(total / 1.46e6 - 1) <= 0.05
    assert sum(1 for line in out.splitlines() if line.startswith("blocks.")) == 10


def test_count_flops_reports_both_conventions():
    code, out, _ = call("count-flops", "--config", CONFIGS / "ntu120.cfg")
    flops = {(f["scope"], f["mac"]): int(f["value"]) for f in map(fields, out.splitlines()) if "scope" in f}
    assert code == 0 and len(flops) == 4
    assert abs(flops["sample", "1"] / 1.97e9 - 1) <= 0.15


def test_audit_ctrgc_pattern():
    code, out, _ = call("audit-constraints", "--variant", "ctrgc", "--seed", 3)
    verdicts = {f["constraint"]: f["verdict"] for f in map(fields, out.splitlines()) if "constraint" in f}
    assert code == 0
    assert verdicts["1"] == verdicts["2"] == "fails" and verdicts["4"] == verdicts["5"] == "holds"
    assert "tightest sample=5 neighbor=4" in out and "clean=true" in out


def test_grad_check_layer():
    code, out, _ = call("grad-check", "--scope", "layer", "--seed", 5)
    assert code == 0 and float(fields(out.splitlines()[-1])["max_rel_err"]) <= 1e-5


def test_grad_check_ops():
    code, out, _ = call("grad-check", "--scope", "ops", "--seed", 0)
    assert code == 0 and float(fields(out.splitlines()[-1])["max_rel_err"]) <= 1e-5


# -- pipeline ---------------------------------------------------------------

def test_full_pipeline(toy_run):
    tmp, data, run_dir = toy_run
    cfg = run_dir / "model.cfg"
    ckpt = run_dir / "model.ckpt"
    log = (run_dir / "log.txt").read_text().splitlines()
    assert len(log) == 2 and log[0].startswith("epoch=0 lr=0.05")

    streams = []
    for modality in ("joint", "bone"):
        src = data
        if modality != "joint":
            src = tmp / modality
            assert call("derive", "--data", data, "--modality", modality, "--out", src)[0] == 0
        score = tmp / f"{modality}.scores"
        code, out, err = call("eval", "--config", cfg, "--checkpoint", ckpt, "--data", src,
                              "--modality", modality, "--out", score)
        assert code == 0, err
        assert out.startswith("split=test samples=2 top1=")
        streams.append(score)

    code, out, _ = call("fuse", "--streams", *streams, "--data", data, "--out", tmp / "fused.txt")
    assert code == 0 and out.splitlines()[-1].startswith("fused_acc=")
    assert len((tmp / "fused.txt").read_text().splitlines()) == 2

    code, out, _ = call("dump-topology", "--config", cfg, "--checkpoint", ckpt, "--data", data,
                        "--block", "1", "--channels", "0,1", "--out", tmp / "topo.txt")
    assert code == 0 and fields(out)["stanzas"] == "9"


def test_dump_to_stdout_and_channel_range(toy_run):
    _, data, run_dir = toy_run
    code, out, _ = call("dump-topology", "--config", run_dir / "model.cfg", "--data", data, "--block", "2")
    assert code == 0 and out.count("kind=A") == 3
    code, _, err = call("dump-topology", "--config", run_dir / "model.cfg", "--data", data, "--channels", "8")
    assert code == 1 and "channel" in err


# -- determinism and output hygiene -------------------------------------------------

def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_identical_flags_give_identical_files(tmp_path):
    for name in ("a", "b"):
        assert call("gen-data", *TOY_DATA, "--seed", 3, "--out", tmp_path / name / "data")[0] == 0
        assert call("train", "--data", tmp_path / name / "data", "--out", tmp_path / name / "run",
                    *TOY_MODEL, *TOY_TRAIN, "--seed", 3)[0] == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    call("gen-data", *TOY_DATA, "--seed", 11, "--out", tmp_path / "flag")
    monkeypatch.setenv("CTR_SEED", "11")
    call("gen-data", *TOY_DATA, "--out", tmp_path / "env")
    assert tree_bytes(tmp_path / "flag") == tree_bytes(tmp_path / "env")


def test_writes_stay_inside_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert call("gen-data", *TOY_DATA, "--out", "nested/data")[0] == 0
    assert sorted(os.listdir(tmp_path)) == ["nested"]


# -- configuration --------------------------------------------------------------

def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "m.cfg"
    cfg.write_text("[model]\ngc = stgc\nnum_classes = 120\n")
    _, from_file, _ = call("count-params", "--config", cfg)
    _, overridden, _ = call("count-params", "--config", cfg, "--gc", "ctrgc")
    _, via_set, _ = call("count-params", "--config", cfg, "--set", "model.gc=ctrgc")
    assert from_file.splitlines()[-1].split()[-1] == "1204728"
    assert overridden == via_set and overridden.splitlines()[-1].split()[-1] == "1457676"


def test_unknown_config_key_and_section(tmp_path):
    bad_key = tmp_path / "k.cfg"
    bad_key.write_text("[model]\nwidth = 3\n")
    bad_section = tmp_path / "s.cfg"
    bad_section.write_text("[optim]\nlr = 1\n")
    assert call("count-params", "--config", bad_key)[0] == 1
    assert call("count-params", "--config", bad_section)[0] == 1
    assert call("count-params", "--set", "model.width=3")[0] == 1


# -- exit codes -----------------------------------------------------------------

def test_usage_errors_exit_one():
    assert call("launch")[0] == 1
    assert call()[0] == 1
    assert call("count-params", "--bogus")[0] == 1
    assert call("count-params", "--threads", 0)[0] == 1
    assert call("grad-check", "--scope", "layer", "--eps", "1e-2")[0] == 1
    assert call("check-equivalence", "--trials", 0)[0] == 1
    code, _, err = call("audit-constraints", "--variant", "gcn")
    assert code == 1 and err


def test_unknown_graph_exits_one(tmp_path):
    assert call("gen-data", "--graph", "foo", "--out", tmp_path / "d")[0] == 1


def test_runtime_errors_exit_two(toy_run):
    tmp, data, run_dir = toy_run
    assert call("eval", "--config", run_dir / "model.cfg", "--checkpoint", tmp / "none.ckpt", "--data", data)[0] == 2
    bad = tmp / "bad.ckpt"
    bad.write_bytes(b"XXXX" + bytes(40))
    code, _, err = call("eval", "--config", run_dir / "model.cfg", "--checkpoint", bad, "--data", data)
    assert code == 2 and "magic" in err
    truncated = tmp / "short.ckpt"
    truncated.write_bytes((run_dir / "model.ckpt").read_bytes()[:-8])
    assert call("eval", "--config", run_dir / "model.cfg", "--checkpoint", truncated, "--data", data)[0] == 2


def test_fuse_misaligned_streams_exit_two(tmp_path):
    (tmp_path / "a.scores").write_text("x 1 0\ny 0 1\n")
    (tmp_path / "b.scores").write_text("y 1 0\nx 0 1\n")
    assert call("fuse", "--streams", tmp_path / "a.scores", tmp_path / "b.scores")[0] == 2
    assert call("fuse", "--streams", tmp_path / "a.scores", "--weights", "1,2")[0] == 1


def test_fuse_accuracy_line(tmp_path):
    (tmp_path / "a.scores").write_text("x 3 0\ny 0 3\n")
    code, out, _ = call("fuse", "--streams", tmp_path / "a.scores", "--weights", "2")
    assert code == 0 and out == "fused samples=2\n"

import json
import os

import numpy as np
import pytest

from hyperdas.autodiff.checkpoint import IntegrityError
from hyperdas.cli import main
from hyperdas.ravel import from_jsonl
from hyperdas.store import RunDir, read_manifest, verify_artifact

CONFIG = """\
[world]
seed = 0
n_train_templates = 12
n_test_templates = 2
train_per_cell = 8
test_per_cell = 4
d_model = 32
n_layers = 3
n_heads = 2
pretrain_steps = 800
fact_steps = 500
exit_layer = 2

[domain.city]
n_entities = 8
attributes = country:4, climate:4

[train]
layer = 2
rank = 4
steps = 4
batch_size = 8
n_blocks = 1
n_heads = 2
score_heads = 2
"""


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out.strip().splitlines()[-1] if out.strip() else "", err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.ini").write_text(CONFIG)
    (root / "untrained.ini").write_text(CONFIG.replace("steps = 4", "steps = 0"))
    (root / "fail.ini").write_text(CONFIG.replace("pretrain_steps = 800", "pretrain_steps = 1")
                                   .replace("fact_steps = 500", "fact_steps = 0"))
    code = main(["pretrain", "--config", str(root / "run.ini"), "--out", str(root / "runs")])
    assert code == 0
    return root


def _cfg(workdir, name="run.ini"):
    return str(workdir / name)


def test_generate_is_deterministic(tmp_path, capsys):
    (tmp_path / "c.ini").write_text(CONFIG)
    _, a, _ = run(capsys, "generate", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "r"))
    _, b, _ = run(capsys, "generate", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "r"))
    assert a != b  # append-only: a second run gets a new directory
    ma, mb = read_manifest(a), read_manifest(b)
    assert ma["dataset_hash"] == mb["dataset_hash"]
    assert (tmp_path / "r" / "generate-000" / "train.jsonl").read_text() == \
        (tmp_path / "r" / "generate-001" / "train.jsonl").read_text()
    train = from_jsonl((tmp_path / "r" / "generate-000" / "train.jsonl").read_text())
    splits = json.loads((tmp_path / "r" / "generate-000" / "splits.json").read_text())
    assert len(train) == 2 * 2 * 8 == sum(splits["counts"]["train"].values())
    _, c, _ = run(capsys, "generate", "--config", str(tmp_path / "c.ini"), "--seed", "5",
                  "--out", str(tmp_path / "r"))
    assert read_manifest(c)["dataset_hash"] != ma["dataset_hash"]
    assert read_manifest(c)["seed"] == 5


def test_config_errors_exit_2(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text(CONFIG.replace("seed = 0\n", ""))
    code, _, err = run(capsys, "generate", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path))
    assert code == 2 and "seed" in err
    (tmp_path / "typo.ini").write_text(CONFIG.replace("rank = 4", "rnak = 4"))
    code, _, err = run(capsys, "generate", "--config", str(tmp_path / "typo.ini"), "--out", str(tmp_path))
    assert code == 2 and "rnak" in err
    code, _, _ = run(capsys, "train", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path))
    assert code == 2


def test_pretrain_failure_exits_4(workdir, capsys):
    code, _, err = run(capsys, "pretrain", "--config", _cfg(workdir, "fail.ini"), "--out", str(workdir / "f"))
    assert code == 4 and "accuracy" in err
    assert read_manifest(workdir / "f" / "pretrain-000")["status"].startswith("failed")


def test_train_eval_analyze_chain(workdir, capsys):
    out = str(workdir / "runs")
    target = workdir / "runs" / "pretrain-000" / "target.bin"
    code, train_dir, _ = run(capsys, "train", "--config", _cfg(workdir), "--checkpoint", str(target), "--out", out)
    assert code == 0
    man = read_manifest(train_dir)
    assert man["status"] == "ok" and str(target.resolve()) in man["upstream"]
    for name in ("model.bin", "metrics.json", "records.jsonl", "run_record.json"):
        verify_artifact(os.path.join(train_dir, name))
    model = os.path.join(train_dir, "model.bin")
    code, eval_dir, _ = run(capsys, "eval", "--config", _cfg(workdir), "--checkpoint", model, "--out", out,
                            "--mode", "soft", "--layer", "1")
    assert code == 0
    metrics = json.loads(open(os.path.join(eval_dir, "metrics.json")).read())
    assert metrics["mode"] == "soft" and metrics["layer"] == 1
    code, _, _ = run(capsys, "eval", "--config", _cfg(workdir), "--checkpoint", model, "--out", out,
                     "--layer", "9")
    assert code == 2
    code, an_dir, _ = run(capsys, "analyze", "--config", _cfg(workdir), "--checkpoint", model, "--out", out,
                          "--grids", "3")
    assert code == 0
    names = set(read_manifest(an_dir)["artifacts"])
    assert {"locations.json", "vectors.tsv", "geometry.json", "projection.tsv", "metrics.json"} <= names
    assert sorted(n for n in names if n.startswith("grids/")) == [f"grids/grid-{i:04d}.txt" for i in range(3)]


def test_eval_of_untrained_checkpoint(workdir, capsys):
    out = str(workdir / "untrained")
    target = workdir / "runs" / "pretrain-000" / "target.bin"
    code, train_dir, _ = run(capsys, "train", "--config", _cfg(workdir, "untrained.ini"),
                             "--checkpoint", str(target), "--out", out)
    assert code == 0
    code, eval_dir, _ = run(capsys, "eval", "--config", _cfg(workdir, "untrained.ini"),
                            "--checkpoint", os.path.join(train_dir, "model.bin"), "--out", out)
    assert code == 0
    metrics = json.loads(open(os.path.join(eval_dir, "metrics.json")).read())
    assert 0.0 <= metrics["snapped"]["disentangle"] <= 1.0


def test_rerun_reproduces_metrics(workdir, capsys):
    out = str(workdir / "rerun")
    target = str(workdir / "runs" / "pretrain-000" / "target.bin")
    dirs = [run(capsys, "train", "--config", _cfg(workdir), "--checkpoint", target, "--out", out)[1]
            for _ in range(2)]
    a, b = (json.loads(open(os.path.join(d, "metrics.json")).read()) for d in dirs)
    assert a == b
    ra, rb = (json.loads(open(os.path.join(d, "run_record.json")).read()) for d in dirs)
    np.testing.assert_allclose([s["loss"] for s in ra["steps"]], [s["loss"] for s in rb["steps"]], atol=1e-6)


def test_sweep_makes_one_run_per_layer(workdir, capsys):
    out = workdir / "sweep"
    target = str(workdir / "runs" / "pretrain-000" / "target.bin")
    code, sweep_dir, _ = run(capsys, "sweep", "--config", _cfg(workdir), "--checkpoint", target, "--out", str(out))
    assert code == 0
    summary = json.loads(open(os.path.join(sweep_dir, "sweep.json")).read())
    assert sorted(int(k) for k in summary["layers"]) == [0, 2]
    assert sorted(p.name for p in out.glob("sweep-layer*")) == ["sweep-layer00-000", "sweep-layer02-000"]
    assert summary["best_layer"] in (0, 2)


def test_integrity_errors_exit_3(workdir, capsys, tmp_path):
    out = str(workdir / "runs")
    target = workdir / "runs" / "pretrain-000" / "target.bin"
    # a different world seed generates a different dataset than the target saw
    code, _, err = run(capsys, "train", "--config", _cfg(workdir), "--seed", "3", "--checkpoint", str(target),
                       "--out", str(tmp_path))
    assert code == 3 and "dataset" in err
    copy = tmp_path / "pretrain-000"
    copy.mkdir()
    for p in target.parent.iterdir():
        (copy / p.name).write_bytes(p.read_bytes())
    raw = bytearray((copy / "target.bin").read_bytes())
    raw[-3] ^= 0x10
    (copy / "target.bin").write_bytes(bytes(raw))
    code, _, err = run(capsys, "train", "--config", _cfg(workdir), "--checkpoint", str(copy / "target.bin"),
                       "--out", out)
    assert code == 3


def test_locked_run_is_refused(tmp_path):
    rd = RunDir(tmp_path, "train")
    with pytest.raises(IntegrityError):
        read_manifest(rd.path)
    rd.close()
    assert read_manifest(rd.path)["status"] == "ok"
    assert RunDir(tmp_path, "train").path.name == "train-001"


def test_output_root_from_environment(tmp_path, capsys, monkeypatch):
    (tmp_path / "c.ini").write_text(CONFIG)
    monkeypatch.setenv("HYPERDAS_OUT", str(tmp_path / "env"))
    code, path, _ = run(capsys, "generate", "--config", str(tmp_path / "c.ini"))
    assert code == 0 and path.startswith(str(tmp_path / "env"))


def test_default_config_parses(capsys):
    from hyperdas.config import parse_config

    assert main(["default-config"]) == 0
    cfg = parse_config(capsys.readouterr().out)
    assert cfg.train.layer == 3 and cfg.world.domains[0].n_entities == 16

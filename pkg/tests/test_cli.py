import pytest

from pixcontrast.cli import run


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert run(["gen-data", "--seed", "2", "--num-images", "10", "--size", "8", "--out", str(out)]) == 0
    return out


def _train(data_dir, out, *extra):
    args = ["train", "--override", f"data.dir={data_dir}", "--override", "total_iter=12",
            "--override", "eval_interval=4", "--override", "sampling.anchors_per_class=5"]
    for item in extra:
        args += ["--override", item]
    return run(args + ["--out", str(out)])


def test_gen_data_writes_manifest(data_dir):
    assert (data_dir / "manifest.tsv").exists()
    assert len(list(data_dir.glob("*.f32"))) == 10


def test_train_then_reproduce_from_resolved(data_dir, tmp_path):
    assert _train(data_dir, tmp_path / "a", "lambda=0") == 0
    resolved = (tmp_path / "a" / "resolved.cfg").read_text()
    assert "lambda = 0.0" in resolved
    assert run(["train", "--config", str(tmp_path / "a" / "resolved.cfg"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_eval_checkpoint(data_dir, tmp_path, capsys):
    assert _train(data_dir, tmp_path / "r") == 0
    code = run(["eval", "--override", f"data.dir={data_dir}", "--checkpoint", str(tmp_path / "r" / "model.ckpt"),
                "--out", str(tmp_path / "e")])
    assert code == 0 and "mIoU" in capsys.readouterr().out
    assert (tmp_path / "e" / "eval.csv").read_text().startswith("split,miou,iou_0")


def test_ablate_grid(data_dir, tmp_path):
    code = run(["ablate", "--override", f"data.dir={data_dir}", "--override", "total_iter=4",
                "--override", "eval_interval=4", "--grid", "memory_mode=pixel,region", "--seeds", "0", "1",
                "--out", str(tmp_path)])
    assert code == 0
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[1].startswith("memory_mode=pixel")


def test_validation_errors_exit_1(data_dir, tmp_path, capsys):
    assert _train(data_dir, tmp_path / "x", "not_a_key=1") == 1
    assert "unknown config key" in capsys.readouterr().err
    assert run(["train"]) == 1
    assert run(["gen-data", "--classes", "0", "--out", str(tmp_path / "g")]) == 1
    assert run(["frobnicate"]) == 1


def test_runtime_errors_exit_2(tmp_path):
    assert run(["train", "--override", f"data.dir={tmp_path / 'missing'}", "--out", str(tmp_path / "o")]) == 2


def test_check_grad_small():
    assert run(["check-grad", "--seeds", "2"]) == 0

import numpy as np
import pytest

from mtbf_twin import cli
from mtbf_twin.mtl_model import load_checkpoint
from mtbf_twin.scenario_sim import read_dataset

SMALL = """\
enc.image_size = 8
model.conv1_channels = 4
model.conv2_channels = 4
model.shared_width = 8
model.task2_hidden = 8
train.epochs = 1
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)
    assert cli.main(["gen-data", "--out", str(root / "d.tsv"), "--count", "40", "--splits", "24,8,8",
                     "--seed", "3"]) == 0
    assert cli.main(["train", "--config", str(root / "small.cfg"), "--data", str(root / "d.tsv"),
                     "--out", str(root / "run"), "--seed", "7"]) == 0
    return root


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_data_defaults(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "d.tsv") == 0
    ds = read_dataset(tmp_path / "d.tsv")
    assert len(ds) == 1150
    assert [len(ds.split(k)) for k in ("train", "val", "test")] == [850, 150, 150]
    assert "850/150/150" in capsys.readouterr().out


def test_gen_data_custom_and_byte_identical(tmp_path):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    for p in (a, b):
        assert run("gen-data", "--out", p, "--count", 8, "--splits", "4,2,2", "--seed", 11) == 0
    assert a.read_bytes() == b.read_bytes()
    assert [len(read_dataset(a).split(k)) for k in ("train", "val", "test")] == [4, 2, 2]


def test_gen_data_bad_splits(tmp_path):
    assert run("gen-data", "--out", tmp_path / "d.tsv", "--count", 8, "--splits", "4,2,1") == 1
    assert run("gen-data", "--out", tmp_path / "d.tsv", "--count", 8, "--splits", "4,x,4") == 1


def test_encode_caches(work, tmp_path, capsys):
    args = ["encode", "--config", work / "small.cfg", "--data", work / "d.tsv", "--out", tmp_path,
            "--export-ppm"]
    assert run(*args) == 0
    first = capsys.readouterr().out
    assert "40 images of 8x8x3" in first
    assert run(*args) == 0
    assert "0 computed" in capsys.readouterr().out
    arrays = list((tmp_path / "gaf_fe").glob("*.npy"))
    assert len(arrays) == 40 and np.load(arrays[0]).shape == (8, 8, 3)
    assert len(list((tmp_path / "gaf_fe").glob("*.ppm"))) == 40


def test_train_outputs(work):
    out = work / "run"
    for name in ("model.ckpt", "history.csv", "metrics.csv", "time_sweep.tsv", "report.txt"):
        assert (out / name).exists()
    assert load_checkpoint(out / "model.ckpt").mode == "multi_task"
    assert (out / "metrics.csv").read_text().startswith("# mtbf-metrics version=1")


def test_train_rerun_is_byte_identical(work, tmp_path):
    assert run("train", "--config", work / "small.cfg", "--data", work / "d.tsv", "--out", tmp_path,
               "--seed", 7) == 0
    for name in ("model.ckpt", "history.csv", "metrics.csv", "time_sweep.tsv"):
        assert (tmp_path / name).read_bytes() == (work / "run" / name).read_bytes(), name


def test_eval_reports_split(work, tmp_path, capsys):
    assert run("eval", "--checkpoint", work / "run" / "model.ckpt", "--data", work / "d.tsv",
               "--split", "test", "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "split: test (8 samples)" in out and "accuracy:" in out and "springback RMSE" in out
    assert (tmp_path / "eval_test.csv").exists() and (tmp_path / "eval_test.txt").exists()


def test_eval_mode_mismatch(work):
    assert run("eval", "--checkpoint", work / "run" / "model.ckpt", "--data", work / "d.tsv",
               "--mode", "task1_only") == 2


def test_ablate_mtl_five_columns(work, tmp_path, capsys):
    assert run("ablate", "mtl", "--config", work / "small.cfg", "--data", work / "d.tsv", "--out", tmp_path) == 0
    lines = (tmp_path / "ablate_mtl.txt").read_text().splitlines()
    assert len(lines[1].split("\t")) == 6
    assert lines[2].startswith("Accuracy") and lines[2].count("-") >= 2
    csv_lines = (tmp_path / "ablate_mtl.csv").read_text().splitlines()
    assert csv_lines[0] == "# mtbf-runs version=1" and len(csv_lines) == 2 + 5


def test_ablate_regularization_repeats(work, tmp_path):
    assert run("ablate", "regularization", "--config", work / "small.cfg", "--data", work / "d.tsv",
               "--out", tmp_path, "--repeats", 1) == 0
    assert len((tmp_path / "ablate_regularization.csv").read_text().splitlines()) == 2 + 4


def test_stream_events(work, tmp_path):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    for p in (a, b):
        assert run("stream", "--checkpoint", work / "run" / "model.ckpt", "--data", work / "d.tsv",
                   "--sample-id", 5, "--frame-interval", 10, "--out", p) == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == "#mtbf-stream\tversion=1"
    rows = [ln.split("\t") for ln in lines[2:]]
    assert [int(r[1]) for r in rows] == list(range(10, 101, 10))
    for r in rows:
        probs = np.array([float(x) for x in r[4:8]])
        assert abs(probs.sum() - 1) < 1e-9
        assert r[3] in cli.te.CLASS_NAMES


def test_stream_scenario_file(work, tmp_path):
    from mtbf_twin.scenario_sim import PARAM_NAMES, SimConfig, scenario_for_index
    scenario, _ = scenario_for_index(SimConfig(count=40, seed=3), 0)
    sc = tmp_path / "job42.txt"
    sc.write_text("".join(f"{n} = {getattr(scenario, n)!r}\n" for n in PARAM_NAMES))
    assert run("stream", "--checkpoint", work / "run" / "model.ckpt", "--scenario", sc,
               "--frame-interval", 30, "--out", tmp_path / "ev.tsv") == 0
    rows = [r.split("\t") for r in (tmp_path / "ev.tsv").read_text().splitlines()[2:]]
    assert [r[0] for r in rows] == ["job42"] * 4
    assert [int(r[1]) for r in rows] == [30, 60, 90, 100]
    sc.write_text("D = 40\n")
    assert run("stream", "--checkpoint", work / "run" / "model.ckpt", "--scenario", sc) == 2


def test_stream_rejects_single_task_checkpoint(work, tmp_path):
    assert run("train", "--config", work / "small.cfg", "--data", work / "d.tsv", "--out", tmp_path,
               "--mode", "task2_only") == 0
    assert run("stream", "--checkpoint", tmp_path / "model.ckpt", "--data", work / "d.tsv",
               "--sample-id", 0) == 2


def test_stream_needs_a_source(work):
    assert run("stream", "--checkpoint", work / "run" / "model.ckpt") == 1


def test_exit_codes(work, tmp_path, capsys):
    assert run("train", "--data", tmp_path / "missing.tsv", "--out", tmp_path) == 2
    assert run("train", "--data", work / "d.tsv", "--out", tmp_path, "--encoding", "bogus") == 1
    assert "gaf_fe" in capsys.readouterr().err
    assert run("frobnicate") == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.no_such_key = 3\n")
    assert run("train", "--config", bad, "--data", work / "d.tsv", "--out", tmp_path) == 1
    corrupt = tmp_path / "c.ckpt"
    data = bytearray((work / "run" / "model.ckpt").read_bytes())
    data[len(data) // 2] ^= 0xFF
    corrupt.write_bytes(bytes(data))
    assert run("eval", "--checkpoint", corrupt, "--data", work / "d.tsv") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exits_3(work, tmp_path):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text(SMALL + "train.lr = 1e300\ntrain.clip = 1e300\n")
    assert run("train", "--config", cfg, "--data", work / "d.tsv", "--out", tmp_path) == 3

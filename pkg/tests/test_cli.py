import re

import numpy as np
import pytest

from xformer import cli
from xformer.cli import architecture_rows
from xformer.io import archive, raster
from xformer.model.spec import default_spec, toy_spec
from xformer.model.train import HELDOUT_SAMPLES, toy_datasets
from xformer.model.xformer import build_xformer

from conftest import run_cli

LAYOUT = [
    ("224²×3", "Conv2d (3×3) ↓2", "16", "1", "2", "Stem_in"),
    ("112²×16", "MV3", "32", "1", "1", "1"),
    ("112²×32", "MV3 ↓2", "64", "1", "2", "2"),
    ("56²×64", "MV3", "64", "2", "1", ""),
    ("56²×64", "MV3 ↓2", "96", "1", "2", "3"),
    ("28²×96", "XF Block", "96", "2", "-", ""),
    ("28²×96", "MV3 ↓2", "128", "1", "2", "4"),
    ("14²×128", "XF Block", "128", "3", "-", ""),
    ("14²×128", "MV3 ↓2", "160", "1", "2", "5"),
    ("7²×160", "XF Block", "160", "4", "-", ""),
    ("7²×160", "Conv2d (1×1)", "640", "1", "1", "Stem_out"),
    ("7²×640", "AvgPool (7×7)", "640", "1", "-", "Global Pooling"),
    ("1²×640", "Linear", "1000", "1", "-", "Classifier Head"),
]


def total_params(text):
    return int(re.search(r"total parameters: ([\d,]+)", text).group(1).replace(",", ""))


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


# -- describe -----------------------------------------------------------------------


def test_describe_layout_rows():
    assert architecture_rows(default_spec()) == LAYOUT


def test_describe_prints_table_and_audit():
    run = run_cli("describe")
    assert run.code == 0 and run.err == ""
    for row in LAYOUT:
        assert re.search(r"\s*\|\s*".join(re.escape(v) for v in row if v), run.out), row
    assert "Parameters by part" in run.out and "Parameters by kind" in run.out
    assert total_params(run.out) == build_xformer(default_spec()).num_parameters()


def test_describe_small_head(tmp_path):
    full = total_params(run_cli("describe").out)
    run = run_cli("describe", "--config", write(tmp_path, "c.yaml", "model: {classes: 10}\n"))
    assert run.code == 0
    assert "| Linear          | 10" in run.out
    # the classifier carries a bias, so each removed class also drops one bias entry
    assert full - total_params(run.out) == (640 + 1) * 990


@pytest.mark.parametrize("text", ["model: [1, 2", "model: {foo: 1}", "bench: {resolutions: [0]}"])
def test_bad_config_exits_2_without_output(tmp_path, text):
    run = run_cli("describe", "--config", write(tmp_path, "bad.yaml", text))
    assert run.code == 2 and run.out == ""
    assert run.err.startswith("error: ")


def test_unknown_key_is_named(tmp_path):
    run = run_cli("describe", "--config", write(tmp_path, "bad.yaml", "model: {stages: [{out_channels: 8, depth: 2}]}"))
    assert run.code == 2 and "model.stages[1].depth" in run.err


def test_usage_errors_exit_2():
    assert run_cli("no-such-command").code == 2
    assert run_cli("describe", "--seed", "-4").code == 2
    assert run_cli("describe", "--config", "/nonexistent/c.yaml").code == 2


# -- bench ----------------------------------------------------------------------------


def test_bench_writes_ten_rows(tmp_path):
    run = run_cli("bench", "--out", tmp_path)
    assert run.code == 0
    rows = (tmp_path / cli.CSV_NAME).read_text().splitlines()
    assert rows[0] == ",".join(cli.profiler.CSV_HEADER) and len(rows) == 11
    assert sorted({r.split(",")[0] for r in rows[1:]}, key=int) == ["256", "512", "768", "1024", "1280"]
    assert all(r.split(",")[6] == "" for r in rows[1:])
    assert (tmp_path / cli.PLOT_NAME).exists()
    assert "(quadratic)" in run.out and "(linear)" in run.out


def test_bench_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("bench", "--out", a).code == 0
    assert run_cli("bench", "--out", b).code == 0
    assert (a / cli.CSV_NAME).read_bytes() == (b / cli.CSV_NAME).read_bytes()
    assert (a / cli.PLOT_NAME).read_bytes() == (b / cli.PLOT_NAME).read_bytes()


def test_bench_single_resolution(tmp_path):
    cfg = write(tmp_path, "c.yaml", "bench: {resolutions: [512]}\n")
    run = run_cli("bench", "--config", cfg, "--out", tmp_path / "o")
    assert run.code == 0
    assert "ratios omitted" in run.out and "slope" not in run.out
    assert len((tmp_path / "o" / cli.CSV_NAME).read_text().splitlines()) == 3


def test_bench_unwritable_output(tmp_path):
    blocker = write(tmp_path, "file", "")
    run = run_cli("bench", "--out", blocker / "sub")
    assert run.code == 1 and "cannot write" in run.err


# -- gradcheck ------------------------------------------------------------------------


def test_gradcheck_requires_f64():
    run = run_cli("gradcheck")
    assert run.code == 2 and "--f64" in run.err


def test_gradcheck_passes():
    run = run_cli("gradcheck", "--f64")
    assert run.code == 0, run.out
    assert run.out.count("PASS") == 5 and "all gradient checks passed" in run.out


def test_gradcheck_detects_corrupted_backward():
    run = run_cli("gradcheck", "--f64", "--corrupt-backward", "softmax")
    assert run.code == 1
    line = next(l for l in run.out.splitlines() if "mhsa_forward" in l)
    assert line.startswith("FAIL")
    assert float(re.search(r"error ([\d.e+-]+)", line).group(1)) > 1e-2


def test_corruption_hook_restores_rules():
    from xformer.verify import corrupted_backward, run_gradcheck

    with corrupted_backward("l2_normalize"):
        assert not run_gradcheck(0)[0].passed
    assert all(r.passed for r in run_gradcheck(0))
    with pytest.raises(ValueError):
        with corrupted_backward("nope"):
            pass


# -- toy-train ------------------------------------------------------------------------


def test_toy_train_zero_steps(tmp_path):
    cfg = write(tmp_path, "c.yaml", "train: {steps: 0, samples: 4}\n")
    run = run_cli("toy-train", "--config", cfg, "--out", tmp_path / "o", "--seed", 3)
    assert run.code == 0
    assert len((tmp_path / "o" / cli.LOSS_NAME).read_text().splitlines()) == 2
    saved = archive.load_archive(tmp_path / "o" / cli.ARCHIVE_NAME)
    init = build_xformer(toy_spec(), 3).state_dict()
    assert list(saved) == list(init)
    assert all(saved[k].tobytes() == v.tobytes() for k, v in init.items())


def test_toy_train_resume_continues_curve(tmp_path):
    cfg = write(tmp_path, "c.yaml", "train: {steps: 2, samples: 4}\n")
    assert run_cli("toy-train", "--config", cfg, "--out", tmp_path / "a").code == 0
    assert run_cli("toy-train", "--config", cfg, "--out", tmp_path / "b",
                   "--resume", tmp_path / "a" / cli.ARCHIVE_NAME).code == 0
    a = (tmp_path / "a" / cli.LOSS_NAME).read_text().splitlines()
    b = (tmp_path / "b" / cli.LOSS_NAME).read_text().splitlines()
    assert abs(float(a[-1].split(",")[1]) - float(b[1].split(",")[1])) <= 1e-6


def test_toy_train_divergence_fails(tmp_path):
    cfg = write(tmp_path, "c.yaml", "train: {steps: 20, samples: 4, lr: 1.0e+6}\n")
    with pytest.warns(RuntimeWarning):
        run = run_cli("toy-train", "--config", cfg, "--out", tmp_path / "o")
    assert run.code == 1 and "diverged" in run.err


def test_toy_train_bad_resume(tmp_path):
    bad = write(tmp_path, "bad.xfw", "junk")
    run = run_cli("toy-train", "--out", tmp_path / "o", "--resume", bad)
    assert run.code == 1 and "cannot resume" in run.err


# -- infer ----------------------------------------------------------------------------


def infer_rows(run):
    lines = run.out.splitlines()
    assert lines[0] == "rank\tclass\tscore"
    return [(int(c), float(s)) for _, c, s in (l.split("\t") for l in lines[1:])]


def zero_head_archive(tmp_path, spec):
    model = build_xformer(spec, 0)
    model.classifier.weight.data[:] = 0.0
    model.classifier.bias.data[:] = 0.0
    path = tmp_path / "zero.xfw"
    archive.save_archive(model, path)
    cfg = write(tmp_path, "c.yaml", f"model: {{resolution: {spec.resolution}, classes: {spec.num_classes}}}\n")
    return path, cfg


def test_infer_zero_head_is_uniform(tmp_path):
    spec = default_spec().replace(resolution=64, num_classes=8)
    path, cfg = zero_head_archive(tmp_path, spec)
    img = tmp_path / "zero.ppm"
    raster.write_ppm(img, np.zeros((20, 30, 3), np.uint8))
    run = run_cli("infer", "--config", cfg, path, img)
    assert run.code == 0, run.err
    rows = infer_rows(run)
    assert len(rows) == 5
    assert all(abs(s - 1 / 8) <= 1e-6 for _, s in rows)


def test_infer_top_k_capped_by_classes(tmp_path):
    spec = default_spec().replace(resolution=64, num_classes=3)
    path, cfg = zero_head_archive(tmp_path, spec)
    img = tmp_path / "x.ppm"
    raster.write_ppm(img, np.full((8, 8, 3), 9, np.uint8))
    assert len(infer_rows(run_cli("infer", "--config", cfg, path, img))) == 3
    assert run_cli("infer", "--config", cfg, path, img, "--top-k", "0").code == 2


def test_infer_mismatch_names_parameter(tmp_path, trained_run):
    img = tmp_path / "x.ppm"
    raster.write_ppm(img, np.zeros((4, 4, 3), np.uint8))
    run = run_cli("infer", trained_run.archive, img)
    assert run.code == 1 and "stem.weight" in run.err


def test_infer_bad_inputs(tmp_path, trained_run):
    bad_img = write(tmp_path, "x.ppm", "P5 1 1 255\n\0")
    run = run_cli("infer", "--config", trained_run.config, trained_run.archive, bad_img)
    assert run.code == 1 and "cannot read image" in run.err
    run = run_cli("infer", "--config", trained_run.config, tmp_path / "none.xfw", bad_img)
    assert run.code == 1 and "cannot read archive" in run.err


def test_infer_repeatable(tmp_path, trained_run):
    img = tmp_path / "x.ppm"
    raster.write_ppm(img, np.random.default_rng(0).integers(0, 256, (40, 50, 3), dtype=np.uint8))
    a = run_cli("infer", "--config", trained_run.config, trained_run.archive, img)
    b = run_cli("infer", "--config", trained_run.config, trained_run.archive, img)
    assert a.code == 0 and a.out == b.out


def test_infer_trained_archive_accuracy(tmp_path, trained_run):
    _, held = toy_datasets(0, resolution=64)
    assert len(held) == HELDOUT_SAMPLES
    correct = 0
    for i, (image, label) in enumerate(zip(held.images, held.labels)):
        img = tmp_path / f"{i}.ppm"
        raster.write_ppm(img, raster.to_uint8(image))
        run = run_cli("infer", "--config", trained_run.config, trained_run.archive, img, "--top-k", "1")
        assert run.code == 0, run.err
        correct += infer_rows(run)[0][0] == label
    assert correct >= 90

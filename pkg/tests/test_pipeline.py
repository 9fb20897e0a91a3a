import json
import shutil
from importlib import resources

import jsonschema
import numpy as np
import pytest

from dualview.cli import main
from dualview.denoiser import load_checkpoint
from dualview.imageio import decode_netpbm, read_pgm, read_ppm
from dualview.pipeline import (
    MANIFEST, PipelineError, RunConfig, build_report, cmd_evaluate, cmd_phantoms, cmd_report,
    config_hash, score_corpus,
)
from dualview.report import render_table1, render_table2
from dualview.stats import ComparisonResult, DescriptiveStats, Significance, emd_1d

# 95th percentile of the IoU EMD over 1000 random 250/250 splits of the desk
# held-out corpus (500 pairs, seed 2, 64 px); pinned from the first oracle run
NULL_EMD_BAND = 0.0103


def test_table1_real_row_fixture():
    real = DescriptiveStats(count=2500, mean=0.654, std=0.113, min=0.0, q1=0.592, median=0.668,
                            q3=0.733, max=0.932, iqr=0.141, mean_difference=None)
    assert render_table1("IoU", [("Real", real)]).splitlines() == [
        "IoU",
        "Dataset  Count   Mean  MeanDiff    Std  Min     Q1  Median     Q3    Max    IQR",
        "Real      2500  0.654       N/A  0.113    0  0.592   0.668  0.733  0.932  0.141",
    ]


def test_table2_row_fixture():
    c = ComparisonResult(0.020, 0.077, 0.01, Significance.DOUBLE_STAR, False)
    assert render_table2("IoU", [("Model_diff", c)]).splitlines()[2] == "Model_diff  0.020  0.077  **"


def test_table2_gap_and_missing_rows():
    gap = ComparisonResult(0.03, 0.2, 0.002, Significance.NONE, True)
    lines = render_table2("DSC", [("Model_sum", gap), ("Model_zeros", None)]).splitlines()
    assert lines[2].endswith("ns (gap)") and lines[3] == "Model_zeros  (missing)"


def run(*argv):
    return main([str(a) for a in argv])


def test_phantoms_cli_counts_and_determinism(tmp_path):
    assert run("phantoms", "--n", 100, "--seed", 7, "--out", tmp_path / "a", "--image-size", 16) == 0
    assert len(list((tmp_path / "a").glob("*.pgm"))) == 200
    assert run("phantoms", "--n", 100, "--seed", 7, "--out", tmp_path / "b", "--image-size", 16) == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run("phantoms", "--n", 3) == 2
    assert run("nonsense") == 2
    assert run("train", "--corpus", tmp_path, "--out", tmp_path, "--image-size", 30) == 2
    bad = tmp_path / "cfg.json"
    bad.write_text('{"bogus": 1}')
    assert run("phantoms", "--config", bad, "--out", tmp_path) == 2


def test_runtime_errors_exit_1(tmp_path):
    assert run("preprocess", "--data", tmp_path / "nope", "--out", tmp_path / "x") == 1
    assert run("sample", "--checkpoint", tmp_path / "nope.mrgb", "--out", tmp_path / "s") == 1


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 4, "seed": 3, "image_size": 16, "out": str(tmp_path / "fromfile")}))
    assert run("phantoms", "--config", cfg, "--n", 2) == 0
    m = json.loads((tmp_path / "fromfile" / MANIFEST).read_text())
    assert m["config"]["n"] == 2 and m["config"]["seed"] == 3


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """phantoms -> preprocess -> train -> sample on 16 px images with a short schedule."""
    d = tmp_path_factory.mktemp("run")
    assert run("phantoms", "--n", 10, "--seed", 1, "--out", d / "ph", "--image-size", 16) == 0
    assert run("phantoms", "--n", 12, "--seed", 2, "--out", d / "held", "--image-size", 16) == 0
    for mode in ("sum", "absdiff", "zero"):
        assert run("preprocess", "--data", d / "ph", "--out", d / f"enc_{mode}", "--mode", mode) == 0
    train_args = ["--image-size", 16, "--T", 20, "--batch-size", 4, "--lr", 1e-3, "--mode", "absdiff"]
    assert run("train", "--corpus", d / "enc_absdiff", "--out", d / "tr", "--epochs", 4,
               "--checkpoint-epochs", "2", *train_args) == 0
    assert run("sample", "--checkpoint", d / "tr" / "final.mrgb", "--out", d / "smp", "--n", 5,
               "--batch", 2, "--seed", 9) == 0
    return d, train_args


def codes(path):
    samples, _ = decode_netpbm(path.read_bytes())
    return np.rint(samples * 65535).astype(np.int64)


def test_preprocess_sum_and_zero_postconditions(small_run):
    d, _ = small_run
    files = sorted((d / "enc_sum").glob("*.ppm"))
    assert len(files) == 10
    for f in files:
        c = codes(f)
        assert np.array_equal(c[..., 2], np.minimum(c[..., 0] + c[..., 1], 65535))
        assert not codes(d / "enc_zero" / f.name)[..., 2].any()
        a = codes(d / "enc_absdiff" / f.name)
        assert np.array_equal(a[..., 2], np.abs(a[..., 0] - a[..., 1]))
    prov = json.loads((d / "enc_sum" / "provenance.json").read_text())
    assert len(prov) == 10 and prov[0]["steps"][0] == "normalize_max"


def test_preprocess_rerun_identical(small_run, tmp_path):
    d, _ = small_run
    assert run("preprocess", "--data", d / "ph", "--out", tmp_path / "again", "--mode", "sum") == 0
    for f in (d / "enc_sum").iterdir():
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()


def test_train_outputs_and_resume(small_run, tmp_path):
    d, train_args = small_run
    trace = (d / "tr" / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,loss" and len(trace) == 5
    assert (d / "tr" / "epoch_002.mrgb").exists()
    assert run("train", "--corpus", d / "enc_absdiff", "--out", tmp_path / "res", "--epochs", 4,
               "--checkpoint-epochs", "2", "--resume", d / "tr" / "epoch_002.mrgb", *train_args) == 0
    assert (tmp_path / "res" / "loss_trace.csv").read_text() == (d / "tr" / "loss_trace.csv").read_text()
    assert (tmp_path / "res" / "final.mrgb").read_bytes() == (d / "tr" / "final.mrgb").read_bytes()


def test_train_lr_comparison_harness(small_run, tmp_path):
    d, train_args = small_run
    traces = []
    for lr in ("1e-4", "1e-5"):
        args = [a for a in train_args] + ["--lr", lr]
        assert run("train", "--corpus", d / "enc_absdiff", "--out", tmp_path / lr, "--epochs", 2, *args) == 0
        traces.append((tmp_path / lr / "loss_trace.csv").read_text().splitlines())
    assert len(traces[0]) == len(traces[1]) == 3


def test_train_shape_mismatch(small_run, tmp_path):
    d, _ = small_run
    assert run("train", "--corpus", d / "enc_absdiff", "--out", tmp_path / "x", "--epochs", 1,
               "--image-size", 32) == 1


def test_sample_outputs(small_run, tmp_path):
    d, _ = small_run
    assert len(list((d / "smp").glob("*.ppm"))) == 5
    assert len(list((d / "smp").glob("*.pgm"))) == 10
    for f in (d / "smp").glob("*.p?m"):
        img = read_ppm(f) if f.suffix == ".ppm" else read_pgm(f)
        assert 0 <= img.data.min() and img.data.max() <= 1
    assert run("sample", "--checkpoint", d / "tr" / "final.mrgb", "--out", tmp_path / "s2", "--n", 5,
               "--batch", 3, "--seed", 9) == 0
    for f in (d / "smp").glob("sample_*"):
        assert f.read_bytes() == (tmp_path / "s2" / f.name).read_bytes()
    ck = load_checkpoint(d / "tr" / "final.mrgb")
    assert ck.epoch == 4 and ck.train_config["third_channel_mode"] == "absdiff"


def test_evaluate_self_comparison(small_run, tmp_path):
    d, _ = small_run
    shutil.copytree(d / "enc_sum", tmp_path / "copy")
    cmd_evaluate(d / "enc_sum", tmp_path / "copy", tmp_path / "ev", label="Copy")
    ev = json.loads((tmp_path / "ev" / "evaluation.json").read_text())
    for metric in ("iou", "dsc"):
        c = ev["comparison"][metric]
        assert (c["emd"], c["ks_d"], c["p_value"]) == (0.0, 0.0, 1.0)
    density = (tmp_path / "ev" / "density.csv").read_text().splitlines()
    assert len(density) == 1 + 2 * 2 * 50


def test_evaluate_does_not_touch_inputs(small_run, tmp_path):
    d, _ = small_run
    before = {f.name: f.read_bytes() for f in (d / "smp").iterdir()}
    cmd_evaluate(d / "held", d / "smp", tmp_path / "ev")
    assert before == {f.name: f.read_bytes() for f in (d / "smp").iterdir()}
    ev = json.loads((tmp_path / "ev" / "evaluation.json").read_text())
    assert ev["synth_label"] == "Model_diff"
    assert ev["corpora"]["Real"]["iou"]["count"] == 12


def test_evaluate_empty_corpus(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(PipelineError):
        score_corpus(tmp_path / "empty", "x", True)


def test_null_split_below_pinned_band(tmp_path):
    cmd_phantoms(tmp_path / "held", 500, 2, 64, 0.06)
    iou = score_corpus(tmp_path / "held", "Real", True).iou
    assert emd_1d(iou[:250], iou[250:]) <= NULL_EMD_BAND


@pytest.fixture(scope="module")
def three_evals(small_run, tmp_path_factory):
    d, _ = small_run
    out = tmp_path_factory.mktemp("evals")
    for mode, label in (("sum", "Model_sum"), ("absdiff", "Model_diff"), ("zero", "Model_zeros")):
        cmd_evaluate(d / "held", d / f"enc_{mode}", out / label, label=label)
    return out


def test_report_merges_three_models(three_evals, tmp_path):
    evals = [(l, three_evals / l) for l in ("Model_sum", "Model_diff", "Model_zeros")]
    cmd_report(evals, tmp_path / "rep")
    text = (tmp_path / "rep" / "report.txt").read_text()
    iou_table = text.split("\n\n")[0].splitlines()
    assert [l.split()[0] for l in iou_table[2:]] == ["Real", "Model_sum", "Model_diff", "Model_zeros"]
    schema = json.loads(resources.files("dualview").joinpath("data/report_schema.json").read_text())
    jsonschema.validate(json.loads((tmp_path / "rep" / "report.json").read_text()), schema)


def test_report_missing_model_gap_marker(three_evals, tmp_path):
    evals = [("Model_sum", tmp_path / "absent"), ("Model_diff", three_evals / "Model_diff")]
    assert run("report", "--eval", f"Model_sum={evals[0][1]}", "--eval", f"Model_diff={evals[1][1]}",
               "--out", tmp_path / "rep") == 0
    text = (tmp_path / "rep" / "report.txt").read_text()
    rows = [l.split() for l in text.splitlines() if l.startswith("Model_sum")]
    assert len(rows) == 5 and all(r == ["Model_sum", "(missing)"] for r in rows)
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    schema = json.loads(resources.files("dualview").joinpath("data/report_schema.json").read_text())
    jsonschema.validate(report, schema)
    assert build_report(evals)["models"][0] == {"label": "Model_sum", "missing": True}


def test_report_all_missing_fails(tmp_path):
    assert run("report", "--eval", f"x={tmp_path / 'nope'}", "--out", tmp_path / "rep") == 1


def test_run_config_and_hash():
    cfg = RunConfig()
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    assert config_hash(cfg.to_dict()) == config_hash(json.loads(json.dumps(cfg.to_dict())))
    with pytest.raises(ValueError):
        RunConfig(n_real=1)


def test_stage_manifests_record_outputs(small_run):
    d, _ = small_run
    m = json.loads((d / "smp" / MANIFEST).read_text())
    assert m["tool_version"] and len(m["config_hash"]) == 64
    assert set(m["outputs"]) == {f.name for f in (d / "smp").iterdir() if f.name != MANIFEST}

import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from pneumoseg import cli, rle
from pneumoseg.ingest import read_pgm, write_pgm
from pneumoseg.model import ModelConfig, build, save_checkpoint

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ["main", "stats", "rle-encode", "rle-decode", "train", "predict", "evaluate", "gradcheck", "fixtures"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("command", COMMANDS)
def test_help_golden(command, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "80")
    argv = ["--help"] if command == "main" else [command, "--help"]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    assert out == (GOLDEN / f"help_{command}.txt").read_text()


@pytest.mark.parametrize("command", COMMANDS[1:])
def test_every_optional_flag_documents_default(command):
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        if action.required or action.dest == "help":
            continue
        assert "default" in (action.help or ""), (command, action.dest)


def test_usage_errors_exit_2(capsys, tmp_path):
    assert run(capsys, "train", "--config", "a.yaml", "--preset", "exp1", "--data", tmp_path, "--out", tmp_path)[0] == 2
    assert run(capsys, "bogus")[0] == 2
    (tmp_path / "empty").mkdir()
    code, _, err = run(capsys, "predict", "--checkpoint", "x.nts", "--input", tmp_path / "empty", "--out", "o.csv")
    assert code == 2 and "no .dcm or .pgm" in err
    assert run(capsys, "train", "--preset", "exp1", "--data", tmp_path / "nope", "--out", tmp_path)[0] == 2


def test_invalid_config_keys_listed(capsys, tmp_path, small_blob_dir):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("name: x\nfoo: 1\nscheduler:\n  bar: 2\n")
    code, _, err = run(capsys, "train", "--config", cfg, "--data", small_blob_dir, "--out", tmp_path / "o")
    assert code == 2 and "foo" in err and "scheduler.bar" in err


def test_operational_error_exit_1(capsys, tmp_path, small_blob_dir):
    shutil.copytree(small_blob_dir / "images", tmp_path / "in")
    code, _, err = run(capsys, "predict", "--checkpoint", tmp_path / "missing.nts", "--input", tmp_path / "in",
                       "--out", tmp_path / "o.csv")
    assert code == 1


def test_exp5_snapshot(capsys, tmp_path, small_blob_dir):
    code, _, _ = run(capsys, "train", "--preset", "exp5", "--data", small_blob_dir, "--out", tmp_path, "--dry-run")
    assert code == 0
    snap = yaml.safe_load((tmp_path / "resolved_config.yaml").read_text())
    assert [(s["resolution"], s["batch_size"], s["epochs"], s["swa_last_k"]) for s in snap["stages"]] == [
        (256, 64, 100, 5), (512, 16, 70, 3)]
    assert (snap["swa"], snap["b_th"], snap["r_th"], snap["channels"]) == (True, 0.75, 2048, 3)


def test_desk_scale_snapshot(capsys, tmp_path, small_blob_dir):
    code, _, _ = run(capsys, "train", "--preset", "exp5", "--desk-scale", "--seed", 4, "--data", small_blob_dir,
                     "--out", tmp_path, "--dry-run")
    assert code == 0
    snap = yaml.safe_load((tmp_path / "resolved_config.yaml").read_text())
    assert snap["width_multiplier"] == 0.25 and snap["seed"] == 4
    assert [(s["resolution"], s["epochs"]) for s in snap["stages"]] == [(64, 5), (128, 3)]


def test_predict_defaults_mirror_exp5():
    a = cli.build_parser().parse_args(["predict", "--checkpoint", "c", "--input", "i", "--out", "o"])
    assert (a.b_th, a.r_th, a.tta, a.removal_mode) == (0.75, 2048, True, "whole")
    assert cli.build_parser().parse_args(["predict", "--checkpoint", "c", "--input", "i", "--out", "o",
                                          "--tta=false"]).tta is False


def test_predict_tta_flag_changes_only_averaging(capsys, tmp_path, small_blob_dir):
    from pneumoseg.inference import PredictConfig, list_inputs, postprocess, predict_proba
    from pneumoseg.ingest import load_image, preprocess

    model = build(ModelConfig(width_multiplier=0.125), seed=3)
    ck = tmp_path / "m.nts"
    save_checkpoint(model, ck)
    images = small_blob_dir / "images"
    common = ["--checkpoint", ck, "--input", images, "--b-th", 0.5, "--r-th", 0, "--resolution", 64,
              "--output-resolution", 64]
    assert run(capsys, "predict", *common, "--out", tmp_path / "t.csv", "--tta=true")[0] == 0
    assert run(capsys, "predict", *common, "--out", tmp_path / "f.csv", "--tta=false")[0] == 0
    model.eval()
    for tta, name in [(True, "t.csv"), (False, "f.csv")]:
        recs = rle.parse_annotation_csv(tmp_path / name)
        cfg = PredictConfig(b_th=0.5, r_th=0, tta=tta, resolution=64, output_resolution=64)
        for path, rec in zip(list_inputs(images), recs):
            s = preprocess(load_image(path), None, 64, 3)
            expect = postprocess(predict_proba(model, s.image[None], tta)[0], cfg)
            np.testing.assert_array_equal(rle.rle_decode(rec, 64, 64), expect)


def test_evaluate_identical(capsys, tmp_path):
    from pneumoseg.synthetic import write_golden_csvs

    g = write_golden_csvs(tmp_path) / "golden_annotations.csv"
    code, out, _ = run(capsys, "evaluate", "--pred", g, "--truth", g, "--report", tmp_path / "r.csv")
    assert code == 0 and "mean DSC 1.0000" in out
    assert (tmp_path / "r.csv").read_text().startswith("image_id,dsc,iou")


def test_evaluate_mismatch_exit_1(capsys, tmp_path):
    rle.write_submission_csv([rle.RleRecord.empty("a")], tmp_path / "p.csv")
    rle.write_submission_csv([rle.RleRecord.empty("b")], tmp_path / "t.csv")
    code, _, err = run(capsys, "evaluate", "--pred", tmp_path / "p.csv", "--truth", tmp_path / "t.csv")
    assert code == 1 and "only in predictions: a" in err


def test_stats_known_composition(capsys, tmp_path):
    assert run(capsys, "fixtures", "--out", tmp_path, "--kind", "dicom")[0] == 0
    code, out, _ = run(capsys, "stats", "--data", tmp_path, "--format", "csv")
    assert code == 0
    counts = {f[1]: int(f[4]) for f in (line.split(",") for line in out.splitlines()) if f[0] == "count"}
    assert counts == {"samples": 10, "positive": 4, "negative": 6, "single_mask": 2, "multiple_masks": 2}
    code, text, _ = run(capsys, "stats", "--data", tmp_path)
    assert "Female" in text


def test_stats_missing_labels(capsys, tmp_path):
    (tmp_path / "images").mkdir()
    assert run(capsys, "stats", "--data", tmp_path)[0] == 2


def test_rle_encode_decode(capsys, tmp_path):
    m = np.zeros((4, 4), np.uint8)
    m[1:4, 1] = 1
    (tmp_path / "m.pgm").write_bytes(write_pgm(m * 255))
    code, out, _ = run(capsys, "rle-encode", "--mask", tmp_path / "m.pgm", "--id", "img")
    assert code == 0 and out.strip() == "img,5 3"
    (tmp_path / "a.csv").write_text("ImageId,EncodedPixels\nimg,5 3\n")
    code, _, _ = run(capsys, "rle-decode", "--csv", tmp_path / "a.csv", "--height", 4, "--width", 4,
                     "--out", tmp_path / "dec")
    assert code == 0
    np.testing.assert_array_equal(read_pgm((tmp_path / "dec" / "img.pgm").read_bytes()) > 0, m)
    assert run(capsys, "rle-decode", "--csv", tmp_path / "a.csv", "--id", "zz", "--out", tmp_path / "d2")[0] == 2


def test_fixtures_all(capsys, tmp_path):
    assert run(capsys, "fixtures", "--out", tmp_path, "--n", 6, "--size", 32)[0] == 0
    assert len(list((tmp_path / "blobs" / "images").glob("*.pgm"))) == 6
    assert (tmp_path / "dicom" / "annotations.csv").exists()
    assert (tmp_path / "golden" / "golden_annotations.csv").exists()


def test_gradcheck_exit_0(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    assert "conv2d" in out and "resnet34_unet_end_to_end" in out and "FAIL" not in out

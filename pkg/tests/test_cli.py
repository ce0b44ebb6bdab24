"""End-to-end tests for the command-line interface.

Everything runs in-process through main(argv) against small phantom
dataset trees, checking exit codes, file outputs, flag/file precedence,
and byte determinism of the evaluation report.
"""

import json

import numpy as np
import pytest

from cardioseg.cli import EXIT_CASE_FAILURES, EXIT_CONFIG, EXIT_OK, main
from cardioseg.dataset import load_dataset, write_phantom_tree
from cardioseg.grid import SigmaModel
from cardioseg.niftiio import read_nifti_file


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "acdc"
    split = write_phantom_tree(root, per_class=2, test_per_class=1, seed=7, dims=(2, 48, 48))
    return root, split


def evaluate_args(root, out, **extra):
    argv = [
        "evaluate", "--data", str(root), "--out", str(out),
        "--model-input-size", "32", "--repetitions", "2", "--split", "test",
    ]
    for key, value in extra.items():
        argv += [f"--{key.replace('_', '-')}", str(value)]
    return argv


class TestExitCodes:
    def test_empty_dataset_dir_is_config_error(self, tmp_path):
        empty = tmp_path / "nothing"
        empty.mkdir()
        rc = main(["segment", "--data", str(empty), "--out", str(tmp_path / "o")])
        assert rc == EXIT_CONFIG

    def test_missing_dataset_dir_is_config_error(self, tmp_path):
        rc = main(["segment", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
        assert rc == EXIT_CONFIG

    @pytest.mark.parametrize(
        "flag,value",
        [
            ("--threshold", "1.5"),
            ("--jobs", "0"),
            ("--repetitions", "0"),
            ("--cascade-thresholds", "0.5,0.5"),
            ("--model-input-size", "8"),
            ("--split", "all,oops"),
        ],
    )
    def test_bad_flag_values(self, tree, tmp_path, flag, value):
        root, _ = tree
        argv = ["evaluate", "--data", str(root), "--out", str(tmp_path / "o"), flag, value]
        if flag == "--split":
            with pytest.raises(SystemExit) as exc:
                main(argv)
            assert exc.value.code == EXIT_CONFIG
        else:
            assert main(argv) == EXIT_CONFIG

    def test_missing_backend_file(self, tree, tmp_path):
        root, _ = tree
        rc = main(
            ["segment", "--data", str(root), "--out", str(tmp_path / "o"),
             "--segmenter", f"model:{tmp_path / 'ghost.onnx'}"]
        )
        assert rc == EXIT_CONFIG

    def test_missing_sigma_model_file(self, tree, tmp_path):
        root, _ = tree
        rc = main(
            ["segment", "--data", str(root), "--out", str(tmp_path / "o"),
             "--sigma-model", str(tmp_path / "ghost.json")]
        )
        assert rc == EXIT_CONFIG

    def test_case_failure_exits_one_but_completes(self, tmp_path):
        root = tmp_path / "acdc"
        write_phantom_tree(root, per_class=1, test_per_class=0, seed=3, dims=(2, 48, 48))
        victim = sorted((root / "training").iterdir())[0]
        for gt in victim.glob("*_gt.nii.gz"):
            gt.unlink()
        out = tmp_path / "seg"
        rc = main(
            ["segment", "--data", str(root), "--out", str(out),
             "--model-input-size", "32", "--split", "all"]
        )
        assert rc == EXIT_CASE_FAILURES
        # the other four cases still produced output
        assert len(list(out.glob("*_seg.nii.gz"))) == 8


class TestSegmentOutputs:
    def test_masks_round_trip_and_match_gt(self, tree, tmp_path):
        root, split = tree
        out = tmp_path / "seg"
        rc = main(
            ["segment", "--data", str(root), "--out", str(out),
             "--model-input-size", "32", "--split", "test"]
        )
        assert rc == EXIT_OK
        records, _ = load_dataset(root)
        by_id = {r.patient_id: r for r in records}
        files = sorted(out.glob("*_seg.nii.gz"))
        assert len(files) == 2 * len(split.test)
        pid = split.test[0]
        record = by_id[pid]
        vol = read_nifti_file(out / f"{pid}_frame{record.ed_frame:02d}_seg.nii.gz")
        assert vol.raw.dtype == np.uint8
        gt = np.stack([m.grid.data for m in record.gt_for("ED")])
        # oracle backends reproduce the ground truth exactly
        assert np.array_equal(vol.raw, gt.astype(np.uint8))

    def test_overlays_only_when_requested(self, tree, tmp_path):
        root, _ = tree
        plain = tmp_path / "plain"
        rc = main(
            ["segment", "--data", str(root), "--out", str(plain),
             "--model-input-size", "32", "--split", "test"]
        )
        assert rc == EXIT_OK
        assert list(plain.glob("*.png")) == []
        with_png = tmp_path / "png"
        rc = main(
            ["segment", "--data", str(root), "--out", str(with_png),
             "--model-input-size", "32", "--split", "test", "--overlays"]
        )
        assert rc == EXIT_OK
        pngs = list(with_png.glob("*.png"))
        # 5 test cases x 2 phases x 2 slices
        assert len(pngs) == 20


class TestClassify:
    def test_oracle_cascade_agrees_with_truth(self, tree, tmp_path):
        root, split = tree
        out = tmp_path / "cls"
        rc = main(
            ["classify", "--data", str(root), "--out", str(out),
             "--model-input-size", "32", "--split", "test"]
        )
        assert rc == EXIT_OK
        payload = json.loads((out / "classification.json").read_text())
        assert sorted(payload) == sorted(split.test)
        for entry in payload.values():
            assert entry["predicted"] == entry["truth"]
            assert entry["trace"], "every case records at least one stage decision"
            stages = [d["stage"] for d in entry["trace"]]
            assert stages == sorted(stages)
            assert set(entry["classifiers_invoked"]) == set(stages)


class TestConfigFilePrecedence:
    def test_file_values_are_used(self, tree, tmp_path):
        root, _ = tree
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "# comment line\n"
            f"data={root}\n"
            "model-input-size=32\n"
            "repetitions=2\n"
            "seed=9\n"
            "split=test\n"
        )
        out = tmp_path / "ev"
        rc = main(["evaluate", "--config", str(cfg), "--out", str(out)])
        assert rc == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert report["meta"]["seed"] == 9
        assert report["meta"]["repetitions"] == 2

    def test_flags_override_file(self, tree, tmp_path):
        root, _ = tree
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            f"data={root}\nmodel-input-size=32\nrepetitions=2\nseed=9\nsplit=test\n"
        )
        out = tmp_path / "ev"
        rc = main(["evaluate", "--config", str(cfg), "--out", str(out), "--seed", "4"])
        assert rc == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert report["meta"]["seed"] == 4

    def test_malformed_config_line(self, tree, tmp_path):
        root, _ = tree
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"data={root}\nthis line has no equals sign\n")
        rc = main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == EXIT_CONFIG


class TestEvaluateDeterminism:
    def test_two_runs_byte_identical(self, tree, tmp_path):
        root, _ = tree
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        for out in (out_a, out_b):
            rc = main(
                evaluate_args(root, out, seed=5, segmenter="noisy:1", localizer="noisy:1")
            )
            assert rc == EXIT_OK
        assert (out_a / "report.json").read_bytes() == (out_b / "report.json").read_bytes()
        assert (out_a / "report.csv").read_bytes() == (out_b / "report.csv").read_bytes()

    def test_jobs_do_not_change_report(self, tree, tmp_path):
        root, _ = tree
        out_a = tmp_path / "serial"
        out_b = tmp_path / "pooled"
        rc = main(evaluate_args(root, out_a, seed=5, segmenter="noisy:1"))
        assert rc == EXIT_OK
        rc = main(evaluate_args(root, out_b, seed=5, segmenter="noisy:1", jobs=3))
        assert rc == EXIT_OK
        assert (out_a / "report.json").read_bytes() == (out_b / "report.json").read_bytes()

    def test_ablate_flag_adds_table(self, tree, tmp_path):
        root, _ = tree
        out = tmp_path / "ab"
        rc = main(evaluate_args(root, out, seed=2) + ["--ablate"])
        assert rc == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert "ablation" in report
        assert set(report["ablation"]) == {"original", "L", "D", "L+D", "L+D+PP"}


class TestCalibrateSigma:
    def test_persisted_model_round_trips(self, tree, tmp_path):
        root, _ = tree
        out = tmp_path / "cal"
        rc = main(
            ["calibrate-sigma", "--data", str(root), "--out", str(out),
             "--scales", "2,3", "--split", "test"]
        )
        assert rc == EXIT_OK
        payload = json.loads((out / "sigma_model.json").read_text())
        model = SigmaModel.from_dict(payload)
        assert model.predict(2.0) == pytest.approx(model.slope * 2.0 + model.intercept)
        assert len(payload["points"]) >= 2

    def test_single_scale_is_config_error(self, tree, tmp_path):
        root, _ = tree
        rc = main(
            ["calibrate-sigma", "--data", str(root), "--out", str(tmp_path / "o"),
             "--scales", "2", "--split", "test"]
        )
        assert rc == EXIT_CONFIG

    def test_scale_at_or_below_one_rejected(self, tree, tmp_path):
        root, _ = tree
        rc = main(
            ["calibrate-sigma", "--data", str(root), "--out", str(tmp_path / "o"),
             "--scales", "1.0,2.0", "--split", "test"]
        )
        assert rc == EXIT_CONFIG


class TestReportCommand:
    def test_summarizes_existing_report(self, tree, tmp_path, capsys):
        root, _ = tree
        out = tmp_path / "ev"
        assert main(evaluate_args(root, out)) == EXIT_OK
        csv_path = tmp_path / "summary.csv"
        rc = main(["report", "--in", str(out / "report.json"), "--out", str(csv_path)])
        assert rc == EXIT_OK
        captured = capsys.readouterr()
        assert "overall accuracy" in captured.out
        assert csv_path.read_text().startswith("table,")

    def test_missing_report_file(self, tmp_path):
        rc = main(["report", "--in", str(tmp_path / "ghost.json")])
        assert rc == EXIT_CONFIG

    def test_non_report_json(self, tmp_path):
        bogus = tmp_path / "x.json"
        bogus.write_text("[1, 2, 3]\n")
        rc = main(["report", "--in", str(bogus)])
        assert rc == EXIT_CONFIG

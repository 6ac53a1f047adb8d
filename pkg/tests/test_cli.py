import csv
import json

import pytest

from pcldet.cli import main
from pcldet.datagen import load_dataset
from pcldet.metrics import read_detections


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared tiny dataset + trained run for the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "train.jsonl")
    assert run(
        "gen", "--images", "6", "--classes", "2", "--proposals", "45",
        "--feature-dim", "8", "--seed", "3", "-o", data,
    ) == 0
    rundir = str(root / "run")
    assert run(
        "train", "--data", data, "--k", "2", "--schedule", "30:0.01",
        "--embed-dim", "8", "--seed", "1", "-o", rundir,
    ) == 0
    return {"root": root, "data": data, "rundir": rundir}


class TestGen:
    def test_writes_loadable_file_and_config(self, tmp_path):
        out = str(tmp_path / "d.jsonl")
        assert run("gen", "--images", "4", "--classes", "2", "--proposals", "45",
                   "--seed", "9", "-o", out) == 0
        manifest = load_dataset(out)
        assert len(manifest.images) == 4
        assert (tmp_path / "d.jsonl.run.json").exists()

    def test_same_flags_twice_identical_files(self, tmp_path):
        a, b = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
        args = ["gen", "--images", "4", "--classes", "2", "--proposals", "45",
                "--seed", "9"]
        assert run(*args, "-o", a) == 0
        assert run(*args, "-o", b) == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_single_class_rejected_with_config_exit(self, tmp_path, capsys):
        out = str(tmp_path / "d.jsonl")
        assert run("gen", "--classes", "1", "-o", out) == 2
        assert "num_classes" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self, capsys):
        assert run("gen", "--not-a-flag", "1") == 1
        assert "usage" in capsys.readouterr().err


class TestTrain:
    def test_outputs_exist_with_expected_columns(self, workdir):
        rundir = workdir["rundir"]
        ckpt = json.loads(open(f"{rundir}/checkpoint.json").read())
        assert ckpt["num_refinements"] == 2
        with open(f"{rundir}/train_log.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [
            "iteration", "lr", "loss_total",
            "loss_stream_0", "loss_stream_1", "loss_stream_2",
            "mean_num_centers",
        ]
        assert len(rows) == 31
        config = json.loads(open(f"{rundir}/run_config.json").read())
        assert config["config"]["num_refinements"] == 2

    def test_missing_dataset_is_data_error(self, tmp_path, capsys):
        assert run("train", "--data", str(tmp_path / "none.jsonl"),
                   "-o", str(tmp_path / "r")) == 2
        assert "error" in capsys.readouterr().err

    def test_k0_and_conference_configuration_run(self, workdir, tmp_path):
        for extra in (
            ["--k", "0"],
            ["--center-method", "highest", "--refine-loss", "assigned_weighted"],
        ):
            out = str(tmp_path / f"run{len(extra)}")
            assert run(
                "train", "--data", workdir["data"], "--schedule", "10:0.01",
                "--embed-dim", "8", "-o", out, *extra,
            ) == 0

    def test_bad_schedule_is_config_error(self, workdir, tmp_path):
        assert run(
            "train", "--data", workdir["data"], "--schedule", "oops",
            "-o", str(tmp_path / "r"),
        ) == 2


class TestEvalScoreClusters:
    def test_eval_report_and_rescore_roundtrip(self, workdir, tmp_path):
        report_path = str(tmp_path / "report.json")
        dets_path = str(tmp_path / "dets.jsonl")
        assert run(
            "eval", "--checkpoint", f"{workdir['rundir']}/checkpoint.json",
            "--data", workdir["data"], "--dump-dets", dets_path,
            "-o", report_path,
        ) == 0
        report = json.loads(open(report_path).read())
        assert set(report["per_class"]) == {"1", "2"}
        assert report["map"] is not None

        rescored_path = str(tmp_path / "rescored.json")
        assert run(
            "score", "--dets", dets_path, "--data", workdir["data"],
            "-o", rescored_path,
        ) == 0
        rescored = json.loads(open(rescored_path).read())
        assert rescored["map"] == pytest.approx(report["map"])
        assert rescored["mean_corloc"] == pytest.approx(report["mean_corloc"])
        assert len(read_detections(dets_path)) > 0

    def test_eval_to_stdout_when_no_output(self, workdir, capsys):
        assert run(
            "eval", "--checkpoint", f"{workdir['rundir']}/checkpoint.json",
            "--data", workdir["data"],
        ) == 0
        out = capsys.readouterr().out
        assert json.loads(out)["num_images"] == 6

    def test_eval_mismatched_dataset_rejected(self, workdir, tmp_path, capsys):
        other = str(tmp_path / "other.jsonl")
        assert run("gen", "--images", "3", "--classes", "3", "--proposals", "45",
                   "--seed", "4", "-o", other) == 0
        assert run(
            "eval", "--checkpoint", f"{workdir['rundir']}/checkpoint.json",
            "--data", other,
        ) == 2
        assert "classes" in capsys.readouterr().err

    def test_clusters_dump_partitions_and_recomputes(self, workdir, tmp_path):
        out = str(tmp_path / "clusters.json")
        assert run(
            "clusters", "--checkpoint", f"{workdir['rundir']}/checkpoint.json",
            "--data", workdir["data"], "--stream", "1", "-o", out,
        ) == 0
        doc = json.loads(open(out).read())
        assert len(doc["images"]) == 6
        for record in doc["images"]:
            members = [
                i for cl in record["object_clusters"] for i in cl["member_indices"]
            ] + record["background"]["member_indices"]
            assert sorted(members) == list(range(record["num_proposals"]))
        # a second run reproduces the dump exactly
        out2 = str(tmp_path / "clusters2.json")
        assert run(
            "clusters", "--checkpoint", f"{workdir['rundir']}/checkpoint.json",
            "--data", workdir["data"], "--stream", "1", "-o", out2,
        ) == 0
        assert open(out).read() == open(out2).read()

    def test_clusters_stream_out_of_range_is_usage_error(self, workdir, capsys):
        assert run(
            "clusters", "--checkpoint", f"{workdir['rundir']}/checkpoint.json",
            "--data", workdir["data"], "--stream", "9",
        ) == 1
        assert "stream" in capsys.readouterr().err


class TestDeterminism:
    def test_gen_train_eval_chain_is_reproducible(self, tmp_path):
        reports = []
        for tag in ("x", "y"):
            data = str(tmp_path / f"{tag}.jsonl")
            rundir = str(tmp_path / f"run_{tag}")
            report = str(tmp_path / f"rep_{tag}.json")
            assert run("gen", "--images", "5", "--classes", "2", "--proposals",
                       "45", "--feature-dim", "8", "--seed", "2", "-o", data) == 0
            assert run("train", "--data", data, "--k", "1", "--schedule",
                       "20:0.01", "--embed-dim", "8", "--seed", "5",
                       "-o", rundir) == 0
            assert run("eval", "--checkpoint", f"{rundir}/checkpoint.json",
                       "--data", data, "-o", report) == 0
            reports.append(
                (
                    (tmp_path / f"{tag}.jsonl").read_bytes(),
                    (tmp_path / f"run_{tag}" / "checkpoint.json").read_bytes(),
                    (tmp_path / f"rep_{tag}.json").read_bytes(),
                )
            )
        assert reports[0] == reports[1]

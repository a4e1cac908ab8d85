"""Batch CLI: outputs, manifests, and bit-identical reruns."""

from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from elicit.cli import main
from elicit.data import load_dataset
from elicit.evaluation import feedback_to_csv
from elicit.kernels import BACKEND
from elicit.model import FeedbackAnswer, FeedbackEvent, FeedbackSet

SYNTH_ARGS = [
    "synth",
    "--seed", "0",
    "--n-samples", "12",
    "--n-features", "10",
    "--n-drugs", "2",
    "--nonzero-per-drug", "2",
    "--pool-features", "4",
    "--noise-sd", "0.5",
    "--weight-scale", "1.0",
]

SYNTH_FILES = (
    "data.tsv",
    "response.tsv",
    "features.tsv",
    "drugs.tsv",
    "truth.json",
    "pool.csv",
    "manifest.json",
)


def run_synth(out: Path) -> None:
    assert main(SYNTH_ARGS + ["--out", str(out)]) == 0


@pytest.fixture(scope="module")
def instance(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("synth") / "inst"
    run_synth(out)
    return out


def dataset_args(inst: Path) -> list[str]:
    return [
        "--data", str(inst / "data.tsv"),
        "--response", str(inst / "response.tsv"),
        "--features", str(inst / "features.tsv"),
        "--drugs", str(inst / "drugs.tsv"),
    ]


def test_synth_writes_complete_instance(instance):
    for name in SYNTH_FILES:
        assert (instance / name).is_file(), name
    ds = load_dataset(
        instance / "data.tsv",
        instance / "response.tsv",
        instance / "features.tsv",
        instance / "drugs.tsv",
    )
    assert (ds.n_samples, ds.n_features, ds.n_drugs) == (12, 10, 2)
    truth = json.loads((instance / "truth.json").read_text())
    assert np.array(truth["weights"]).shape == (10, 2)
    assert np.array(truth["active"]).sum(axis=0).tolist() == [2, 2]
    pool_lines = (instance / "pool.csv").read_text().strip().split("\n")
    assert len(pool_lines) == 1 + 4 * 2
    manifest = json.loads((instance / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seeds"] == [0]
    assert manifest["backend"] == BACKEND
    assert manifest["versions"]["numpy"] == np.__version__


def test_synth_rerun_is_bit_identical(instance, tmp_path):
    out2 = tmp_path / "again"
    assert main(["rerun", str(instance / "manifest.json"), "--out", str(out2)]) == 0
    for name in SYNTH_FILES:
        if name == "manifest.json":
            continue  # records the redirected --out argument
        assert (out2 / name).read_bytes() == (instance / name).read_bytes(), name


def test_fit_ep_outputs_and_rerun(instance, tmp_path):
    out = tmp_path / "fit"
    argv = ["fit", *dataset_args(instance), "--seed", "1", "--out", str(out)]
    assert main(argv) == 0
    metrics = (out / "metrics.csv").read_text().strip().split("\n")
    assert metrics[0] == "drug_id,mse,c_index"
    assert metrics[-1].startswith("average,")
    assert len(metrics) == 1 + 2 + 1
    posterior = (out / "posterior.csv").read_text()
    assert posterior.startswith("drug_id,feature_id,")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "fit"
    assert len(manifest["inputs"]) == 4
    assert all(v.startswith("sha256:") for v in manifest["inputs"].values())

    out2 = tmp_path / "fit2"
    assert main(["rerun", str(out / "manifest.json"), "--out", str(out2)]) == 0
    assert (out2 / "posterior.csv").read_bytes() == (out / "posterior.csv").read_bytes()
    assert (out2 / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_fit_with_feedback_changes_posterior(instance, tmp_path):
    fb = FeedbackSet(
        [FeedbackEvent("d00", "f0000", FeedbackAnswer.RELEVANT_POSITIVE, iteration=1)]
    )
    fb_path = tmp_path / "feedback.csv"
    fb_path.write_text(feedback_to_csv(fb))
    plain = tmp_path / "plain"
    cond = tmp_path / "cond"
    base = ["fit", *dataset_args(instance), "--seed", "1"]
    assert main(base + ["--out", str(plain)]) == 0
    assert main(base + ["--feedback", str(fb_path), "--out", str(cond)]) == 0
    assert (cond / "posterior.csv").read_text() != (plain / "posterior.csv").read_text()
    manifest = json.loads((cond / "manifest.json").read_text())
    assert str(fb_path) in manifest["inputs"]


def test_fit_gibbs_engine(instance, tmp_path):
    out = tmp_path / "gibbs"
    argv = [
        "fit", *dataset_args(instance), "--engine", "gibbs", "--seed", "3",
        "--gibbs-samples", "150", "--gibbs-burnin", "50", "--out", str(out),
    ]
    assert main(argv) == 0
    lines = (out / "posterior.csv").read_text().strip().split("\n")
    assert lines[0] == "drug_id,feature_id,weight_mean,weight_sd,inclusion"
    assert len(lines) == 1 + 2 * 10
    incl = [float(ln.split(",")[4]) for ln in lines[1:]]
    assert all(0.0 <= g <= 1.0 for g in incl)


def test_simulate_report_and_traces(instance, tmp_path):
    out = tmp_path / "sim"
    argv = [
        "simulate", *dataset_args(instance),
        "--pool", str(instance / "pool.csv"),
        "--strategies", "random,eig",
        "--budget", "4", "--cadence", "2", "--seeds", "0",
        "--truth", str(instance / "truth.json"),
        "--random-runs", "3",
        "--out", str(out),
    ]
    assert main(argv) == 0
    report = json.loads((out / "report.json").read_text())
    row = report["seeds"][0]
    assert len(row["auc"]["random"]) == 3
    assert isinstance(row["auc"]["eig"], float)
    assert 0.0 < row["p_value"]["eig"] <= 1.0
    assert row["half_improvement"]["eig"] >= 0
    for name in ("trace_eig_0.csv", "queries_eig_0.csv", "trace_random_0_0.csv",
                 "trace_random_0_2.csv", "queries_random_0_1.csv"):
        assert (out / name).is_file(), name
    head = (out / "trace_eig_0.csv").read_text().split("\n")[0]
    assert "wall_time" not in head

    # Identical invocation reproduces every output byte-for-byte.
    out2 = tmp_path / "sim2"
    argv2 = argv[:-1] + [str(out2)]
    assert main(argv2) == 0
    for f in sorted(out.iterdir()):
        if f.name == "manifest.json":
            continue
        assert (out2 / f.name).read_bytes() == f.read_bytes(), f.name


def test_simulate_replay_expert(instance, tmp_path):
    pool_pairs = [
        ln.split(",")[:2]
        for ln in (instance / "pool.csv").read_text().strip().split("\n")[1:]
    ]
    fb = FeedbackSet(
        [
            FeedbackEvent(d, f, FeedbackAnswer.RELEVANT_UNKNOWN_DIRECTION, iteration=i)
            for i, (d, f) in enumerate(pool_pairs, start=1)
        ]
    )
    fb_path = tmp_path / "table.csv"
    fb_path.write_text(feedback_to_csv(fb))
    out = tmp_path / "replay"
    argv = [
        "simulate", *dataset_args(instance),
        "--pool", str(instance / "pool.csv"),
        "--strategies", "random",
        "--budget", "3", "--cadence", "3", "--seeds", "1",
        "--expert", "replay", "--feedback", str(fb_path),
        "--random-runs", "2",
        "--out", str(out),
    ]
    assert main(argv) == 0
    qlog = (out / "queries_random_1_0.csv").read_text().strip().split("\n")
    assert len(qlog) == 1 + 3
    assert all(ln.endswith(",rel_unknown") for ln in qlog[1:])


def test_cli_validation_failures(instance, tmp_path, capsys):
    out = str(tmp_path / "x")
    base = ["simulate", *dataset_args(instance), "--budget", "2",
            "--cadence", "1", "--out", out]
    cases = [
        base + ["--strategies", "greedy", "--seeds", "0"],
        base + ["--strategies", "random", "--seeds", "a,b"],
        base + ["--strategies", "bandit", "--seeds", "0",
                "--truth", str(instance / "truth.json")],
        base + ["--strategies", "random", "--seeds", "0"],  # oracle, no truth
        base + ["--strategies", "random", "--seeds", "0", "--expert", "replay"],
    ]
    for argv in cases:
        assert main(argv) == 2, argv
        assert "error:" in capsys.readouterr().err
        assert not Path(out).exists()


def test_failed_run_leaves_no_outputs(tmp_path, capsys):
    out = tmp_path / "never"
    argv = [
        "fit", "--data", str(tmp_path / "missing.tsv"),
        "--response", str(tmp_path / "missing2.tsv"),
        "--seed", "0", "--out", str(out),
    ]
    assert main(argv) == 2
    assert "error:" in capsys.readouterr().err
    assert not out.exists()


def test_console_script_help():
    proc = subprocess.run(
        [sys.executable, "-m", "elicit.cli", "--help"],
        capture_output=True, text=True,
    )
    # No module __main__ guard shortcut: call the installed entry point.
    proc = subprocess.run(["elicit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for word in ("fit", "simulate", "synth", "descvec", "serve", "rerun"):
        assert word in proc.stdout


def test_descvec_outputs(tmp_path):
    features = tmp_path / "features.tsv"
    features.write_text(
        "id\tkind\tgene\nm_a\tmutation\tKRAS\nm_b\tmutation\tTP53\n"
    )
    drugs = tmp_path / "drugs.tsv"
    drugs.write_text("id\tname\tgroup\ttargets\ndA\tDrug A\tg1\tKRAS\n")
    gmt = tmp_path / "sets.gmt"
    gmt.write_text("RAS_PATHWAY\tdesc\tKRAS\tNRAS\n")
    out = tmp_path / "desc"
    argv = [
        "descvec", "--features", str(features), "--drugs", str(drugs),
        "--pathways", str(gmt), "--out", str(out),
    ]
    assert main(argv) == 0
    schema = json.loads((out / "schema.json").read_text())
    assert "RAS_PATHWAY" in schema["pathways"]
    assert schema["length"] == len(schema["slots"])
    desc = (out / "descriptions.csv").read_text().strip().split("\n")
    assert desc[0].startswith("drug_id,feature_id,")
    assert len(desc) == 1 + 2  # one drug, two features

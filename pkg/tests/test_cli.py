import json
import os

import pytest

from stprune import cli

TINY_ARGS = ["--set", "model=tinytoy", "--set", "num_classes=4",
             "--set", "data_n=400", "--set", "target_ratio=0.3",
             "--set", "band=0.2", "--set", "width_grid=0.3,0.5,0.7,1.0",
             "--set", "T_total=40", "--set", "T_shr=30", "--set", "k=10",
             "--set", "N_p=4", "--set", "batch_size=8"]


def run_cli(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_prune_writes_all_artifacts(tmp_path, capsys):
    out = str(tmp_path / "run")
    code, stdout, _ = run_cli(["prune", "--out", out] + TINY_ARGS, capsys)
    assert code == 0
    for f in ("config.txt", "iterations.csv", "final_arch.txt", "summary.json",
              "weights.bin", "weights.manifest.json", "pruned_weights.bin",
              "pruned_model.stpgraph"):
        assert os.path.exists(os.path.join(out, f)), f
    summary = json.loads(stdout)
    assert 0.3 * 0.8 <= summary["flops_ratio"] <= 0.3 * 1.2
    pools = [f for f in os.listdir(out) if f.startswith("pool_")]
    assert len(pools) == 4  # one checkpoint per shrink interval
    last = json.load(open(os.path.join(out, sorted(pools)[-1])))
    assert len(last["entries"]) == 1


def test_unknown_config_key_exits_2(tmp_path, capsys):
    out = str(tmp_path / "run")
    code, _, err = run_cli(
        ["prune", "--out", out, "--set", "warble=3"], capsys)
    assert code == 2
    assert "warble" in err
    assert json.loads(err.strip().splitlines()[-1])["exit_code"] == 2


def test_rerun_same_seed_byte_identical(tmp_path, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run_cli(["prune", "--out", a, "--seed", "3"] + TINY_ARGS,
                   capsys)[0] == 0
    assert run_cli(["prune", "--out", b, "--seed", "3"] + TINY_ARGS,
                   capsys)[0] == 0
    for f in ("iterations.csv", "summary.json", "final_arch.txt"):
        fa = open(os.path.join(a, f), "rb").read()
        fb = open(os.path.join(b, f), "rb").read()
        assert fa == fb, f


def test_estimate_full_arch_is_exactly_one(capsys):
    code, out, _ = run_cli(
        ["estimate", "--model", "resnet50-cifar",
         "--arch", "((3, 4, 6, 3), (1.0, 1.0, 1.0, 1.0))"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["flops_ratio"] == 1.0 and rep["params_ratio"] == 1.0


def test_estimate_reference_arch(capsys):
    code, out, _ = run_cli(
        ["estimate", "--model", "resnet50-cifar",
         "--arch", "((2, 3, 4, 2), (0.3, 0.3, 0.3, 0.7))"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["flops_ratio"] == pytest.approx(0.1489, abs=0.015)
    assert rep["params_ratio"] == pytest.approx(0.2194, abs=0.015)


def test_estimate_malformed_arch_exits_2(capsys):
    code, _, err = run_cli(
        ["estimate", "--model", "resnet50-cifar", "--arch", "pear-shaped"],
        capsys)
    assert code == 2


def test_verification_suite_passes_with_defaults(capsys):
    code, out, _ = run_cli(["verify-appendix-e", "--trials", "100"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["grad_max_rel_error"] <= 1e-6
    assert 3.5 <= rep["taylor_ratio_min"] <= rep["taylor_ratio_max"] <= 4.5


def test_verification_impossible_tolerance_exits_1(capsys):
    code, out, _ = run_cli(
        ["verify-appendix-e", "--trials", "10", "--grad-tol", "0"], capsys)
    assert code == 1
    assert json.loads(out)["pass"] is False


def test_verification_report_is_seed_deterministic(capsys):
    _, a, _ = run_cli(["verify-appendix-e", "--trials", "20", "--seed", "5"],
                      capsys)
    _, b, _ = run_cli(["verify-appendix-e", "--trials", "20", "--seed", "5"],
                      capsys)
    assert a == b


def test_analyze_renders_tables_and_figures(tmp_path, capsys):
    run = str(tmp_path / "run")
    assert run_cli(["prune", "--out", run] + TINY_ARGS, capsys)[0] == 0
    rep = str(tmp_path / "report")
    code, _, _ = run_cli(["analyze", "--run", run, "--out", rep], capsys)
    assert code == 0
    for f in ("magnitude_profile.csv", "magnitude_profile.png",
              "pool_trajectory.csv", "pool_trajectory.png",
              "loss_curves.png"):
        path = os.path.join(rep, f)
        assert os.path.exists(path) and os.path.getsize(path) > 0, f


def test_pool_inspect_orders_by_score(tmp_path, capsys):
    run = str(tmp_path / "run")
    assert run_cli(["prune", "--out", run] + TINY_ARGS, capsys)[0] == 0
    first = sorted(f for f in os.listdir(run) if f.startswith("pool_"))[0]
    code, out, _ = run_cli(
        ["pool-inspect", "--pool", os.path.join(run, first)], capsys)
    assert code == 0
    rep = json.loads(out)
    scores = [e["score"] for e in rep["entries"] if e["score"] is not None]
    assert scores == sorted(scores)


def test_baseline_commands_produce_summaries(tmp_path, capsys):
    sup = str(tmp_path / "sup")
    code, out, _ = run_cli(["baseline-suppressed", "--out", sup] + TINY_ARGS,
                           capsys)
    assert code == 0
    assert "final_arch" in json.loads(out)
    std = str(tmp_path / "std")
    code, out, _ = run_cli(["baseline-standard", "--out", std] + TINY_ARGS,
                           capsys)
    assert code == 0
    assert os.path.exists(os.path.join(std, "summary.json"))

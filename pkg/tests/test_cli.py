import json

import pytest

from cleanloop.cli import main
from cleanloop.data import error_mask, load_dataset


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def noisy_dataset(tmp_path):
    base = tmp_path / "base.jsonl"
    noisy = tmp_path / "noisy.jsonl"
    assert run_cli("generate", base, "--size", 100, "--seed", 1, "--dim", 1024) == 0
    assert run_cli("perturb", base, noisy, "--rate", 0.05, "--seed", 2) == 0
    return noisy


class TestGenerate:
    def test_writes_loadable_file(self, tmp_path):
        out = tmp_path / "d.jsonl"
        assert run_cli("generate", out, "--size", 20, "--seed", 3, "--dim", 1024) == 0
        ds = load_dataset(out)
        assert len(ds.instances) == 20
        assert ds.feature_dim == 1024

    def test_sequence_task(self, tmp_path):
        out = tmp_path / "s.jsonl"
        assert run_cli("generate", out, "--task", "sequence", "--size", 10,
                       "--seed", 0, "--dim", 1024) == 0
        assert load_dataset(out).task_kind == "sequence"


class TestPerturb:
    def test_exact_error_count(self, noisy_dataset):
        ds = load_dataset(noisy_dataset)
        assert ds.has_gold
        assert error_mask(ds).sum() == 5  # 5% of 100 annotations

    def test_same_seed_byte_identical(self, tmp_path, noisy_dataset):
        other = tmp_path / "noisy2.jsonl"
        assert run_cli("perturb", tmp_path / "base.jsonl", other, "--rate", 0.05,
                       "--seed", 2) == 0
        assert other.read_bytes() == noisy_dataset.read_bytes()

    def test_invalid_rate_exits_2(self, tmp_path, noisy_dataset):
        assert run_cli("perturb", tmp_path / "base.jsonl", tmp_path / "x.jsonl",
                       "--rate", 1.5) == 2

    def test_missing_input_exits_1(self, tmp_path):
        assert run_cli("perturb", tmp_path / "absent.jsonl", tmp_path / "y.jsonl") == 1


class TestRun:
    def run_fast(self, dataset, out, *extra):
        return run_cli(
            "run", dataset, "--out", out, "--folds", 3, "--epochs", 2,
            "--seeds", 2, "--k", 10, "--max-iters", 2, *extra,
        )

    def test_outputs_fixed_names(self, tmp_path, noisy_dataset):
        out = tmp_path / "run_active"
        assert self.run_fast(noisy_dataset, out, "--method", "active") == 0
        names = {p.name for p in out.iterdir()}
        assert {
            "manifest.json", "aggregate.json",
            "seed0.report.json", "seed0.scores.csv", "seed0.pr.csv",
            "seed1.report.json", "seed1.scores.csv", "seed1.pr.csv",
            "pr_curves.png", "iteration_yield.png",
        } <= names

    def test_manifest_pins_run(self, tmp_path, noisy_dataset):
        out = tmp_path / "run_m"
        assert self.run_fast(noisy_dataset, out, "--method", "ensemble") == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["method"] == "ensemble"
        assert manifest["config"]["folds"] == 3
        assert manifest["seeds"] == [0, 1]
        assert len(manifest["dataset"]["sha256"]) == 64
        aggregate = json.loads((out / "aggregate.json").read_text())
        assert aggregate["std_kind"] == "population"
        assert len(aggregate["aps"]) == 2

    def test_rerun_is_byte_identical(self, tmp_path, noisy_dataset):
        a, b = tmp_path / "run_a", tmp_path / "run_b"
        assert self.run_fast(noisy_dataset, a, "--method", "ensemble") == 0
        assert self.run_fast(noisy_dataset, b, "--method", "ensemble") == 0
        for path in sorted(a.iterdir()):
            assert path.read_bytes() == (b / path.name).read_bytes(), path.name

    def test_zero_iteration_active_equals_ensemble(self, tmp_path, noisy_dataset):
        ens, act = tmp_path / "r_ens", tmp_path / "r_act"
        assert run_cli("run", noisy_dataset, "--out", ens, "--method", "ensemble",
                       "--folds", 3, "--epochs", 2, "--seeds", 1, "--no-figures") == 0
        assert run_cli("run", noisy_dataset, "--out", act, "--method", "active",
                       "--folds", 3, "--epochs", 2, "--seeds", 1, "--max-iters", 0,
                       "--no-figures") == 0
        ens_rank = json.loads((ens / "seed0.report.json").read_text())["ranking"]
        act_rank = json.loads((act / "seed0.report.json").read_text())["ranking"]
        assert ens_rank == act_rank

    def test_ensembling_ablation_flags_change_output(self, tmp_path, noisy_dataset):
        wo_test, wo_train = tmp_path / "wo_test", tmp_path / "wo_train"
        assert self.run_fast(noisy_dataset, wo_test, "--method", "ensemble",
                             "--no-test-ens", "--no-figures") == 0
        assert self.run_fast(noisy_dataset, wo_train, "--method", "ensemble",
                             "--no-train-ens", "--no-figures") == 0
        a = (wo_test / "seed0.scores.csv").read_text()
        b = (wo_train / "seed0.scores.csv").read_text()
        assert a != b

    def test_both_ensembling_flags_off_exits_2(self, tmp_path, noisy_dataset):
        assert self.run_fast(noisy_dataset, tmp_path / "nope", "--no-test-ens",
                             "--no-train-ens") == 2

    def test_unknown_method_is_usage_error(self, tmp_path, noisy_dataset):
        with pytest.raises(SystemExit) as err:
            run_cli("run", noisy_dataset, "--method", "sorcery")
        assert err.value.code == 2

    def test_run_without_gold_exits_2(self, tmp_path):
        base = tmp_path / "clean.jsonl"
        run_cli("generate", base, "--size", 30, "--dim", 1024)
        assert run_cli("run", base, "--out", tmp_path / "r", "--folds", 2,
                       "--epochs", 1) == 2

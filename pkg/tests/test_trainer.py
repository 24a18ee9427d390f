import numpy as np
import pytest

from cleanloop.data import Dataset, Instance, LabelSpace
from cleanloop.features import hash_text
from cleanloop.synth import token_tag_sequences, two_cluster_classification
from cleanloop.trainer import (
    TrainerConfig,
    UnitTable,
    assign_folds,
    best_epoch_by_test_loss,
    ce_gradient,
    ce_loss,
    cross_validate,
    export_dynamics,
    load_dynamics,
    log_softmax,
    softmax,
    train_fold,
    train_full,
)

DIM = 2**10

FIELDS = ("assigned_prob", "max_other_prob", "assigned_logit", "max_other_logit", "loss")


def toy_dataset(n=10, dim=DIM):
    return two_cluster_classification(n, seed=1, dim=dim)


class TestFolds:
    def test_balanced_assignment(self):
        ds = toy_dataset(10)
        assignment = assign_folds(ds, 5, seed=0)
        counts = np.bincount(list(assignment.fold_of.values()), minlength=5)
        assert counts.tolist() == [2, 2, 2, 2, 2]

    def test_sizes_differ_by_at_most_one(self):
        ds = toy_dataset(13)
        counts = np.bincount(list(assign_folds(ds, 5, seed=3).fold_of.values()))
        assert counts.max() - counts.min() <= 1

    def test_deterministic(self):
        ds = toy_dataset(12)
        assert assign_folds(ds, 3, seed=9) == assign_folds(ds, 3, seed=9)
        assert assign_folds(ds, 3, seed=9) != assign_folds(ds, 3, seed=10)

    def test_depends_on_dataset_seed(self):
        a = two_cluster_classification(12, seed=1, dim=DIM)
        b = two_cluster_classification(12, seed=2, dim=DIM)
        # same instance ids, different dataset seed -> different shuffle
        assert assign_folds(a, 3, seed=0) != assign_folds(b, 3, seed=0)

    def test_fold_count_out_of_range(self):
        ds = toy_dataset(10)
        with pytest.raises(ValueError):
            assign_folds(ds, 11, seed=0)
        with pytest.raises(ValueError):
            assign_folds(ds, 1, seed=0)


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(scale=30, size=(200, 7))
        np.testing.assert_allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-9)

    def test_no_overflow_on_large_logits(self):
        logits = np.array([[1e305, -1e305, 0.0]])
        probs = softmax(logits)
        assert np.isfinite(probs).all()
        np.testing.assert_allclose(probs.sum(), 1.0, atol=1e-9)

    def test_log_softmax_consistent(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(50, 4))
        np.testing.assert_allclose(np.exp(log_softmax(logits)), softmax(logits), atol=1e-12)


class TestGradient:
    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(42)
        features = rng.normal(size=(12, 10))
        labels = rng.integers(3, size=12)
        weights = rng.normal(scale=0.5, size=(10, 3))
        l2 = 0.01
        grad = ce_gradient(weights, features, labels, l2)
        h = 1e-6
        for _ in range(30):
            i, j = rng.integers(10), rng.integers(3)
            bumped = weights.copy()
            bumped[i, j] += h
            up = ce_loss(bumped, features, labels, l2)
            bumped[i, j] -= 2 * h
            down = ce_loss(bumped, features, labels, l2)
            numeric = (up - down) / (2 * h)
            assert abs(grad[i, j] - numeric) <= 1e-4 * max(1e-8, abs(numeric))


def dense_reference_run(dataset, config):
    """Independent dense-numpy SGD with the documented schedule."""
    table = UnitTable(dataset)
    X = table.matrix.toarray()
    y = table.labels
    n_units, dim = X.shape
    W = np.zeros((dim, table.n_labels))
    rng = np.random.default_rng([config.seed])
    probs_by_epoch = []
    for _ in range(config.epochs):
        order = rng.permutation(np.arange(n_units))
        for start in range(0, n_units, config.batch_size):
            batch = order[start : start + config.batch_size]
            Xb, yb = X[batch], y[batch]
            P = softmax(Xb @ W)
            P[np.arange(len(batch)), yb] -= 1.0
            grad = Xb.T @ P / len(batch)
            W = (1 - config.learning_rate * config.l2) * W - config.learning_rate * grad
        probs_by_epoch.append(softmax(X @ W))
    return probs_by_epoch


class TestSgd:
    def test_zero_learning_rate_gives_uniform_probs(self):
        ds = toy_dataset(8)
        run = train_full(ds, TrainerConfig(epochs=1, learning_rate=0.0, seed=0))
        np.testing.assert_allclose(run.assigned_prob[0], 0.5, atol=1e-12)
        np.testing.assert_allclose(run.max_other_prob[0], 0.5, atol=1e-12)
        np.testing.assert_allclose(run.assigned_logit[0], 0.0, atol=1e-12)

    def test_matches_dense_reference(self):
        ds = toy_dataset(9)
        config = TrainerConfig(epochs=3, learning_rate=0.2, batch_size=4, l2=0.01, seed=5)
        reference = dense_reference_run(ds, config)
        run = train_full(ds, config)
        table = UnitTable(ds)
        units = np.arange(table.n_units)
        for epoch, P in enumerate(reference):
            np.testing.assert_allclose(
                run.assigned_prob[epoch], P[units, table.labels], rtol=1e-10, atol=1e-12
            )

    def test_separable_toy_converges(self):
        space = LabelSpace(("x", "y"))
        texts = ["aa aa", "aa ab", "bb bb", "bb ba"]
        instances = tuple(
            Instance(id=f"t{i}", observed_labels=(i // 2,),
                     features=(hash_text(t, DIM),), text=t)
            for i, t in enumerate(texts)
        )
        ds = Dataset("classification", space, instances, feature_dim=DIM)
        run = train_full(ds, TrainerConfig(epochs=50, learning_rate=0.5, l2=0.0, seed=0))
        assert (run.assigned_prob[-1] > 0.9).all()

    def test_bit_identical_reruns(self):
        ds = toy_dataset(12)
        config = TrainerConfig(epochs=3, seed=7)
        a = cross_validate(ds, 3, config)
        b = cross_validate(ds, 3, config)
        for field in FIELDS + ("test_loss",):
            assert np.array_equal(getattr(a, field), getattr(b, field))


class TestCrossValidate:
    def test_completeness(self):
        ds = toy_dataset(9)
        tensor = cross_validate(ds, 3, TrainerConfig(epochs=2, seed=0))
        assert tensor.assigned_prob.shape == (3, 2, 9)
        assert tensor.test_loss.shape == (3, 2)
        # every instance tests in exactly one fold
        counts = np.bincount(tensor.instance_fold, minlength=3)
        assert counts.tolist() == [3, 3, 3]

    def test_sequence_tokens_share_fold(self):
        ds = token_tag_sequences(8, seed=2, dim=DIM)
        tensor = cross_validate(ds, 4, TrainerConfig(epochs=1, seed=0))
        # fold is a function of the instance, by construction of unit_fold
        assert tensor.n_units == ds.annotation_count
        assert len(tensor.instance_fold) == 8

    def test_parallel_equals_sequential(self):
        ds = toy_dataset(20)
        config = TrainerConfig(epochs=2, seed=3)
        seq = cross_validate(ds, 4, config, threads=1)
        par = cross_validate(ds, 4, config, threads=4)
        for field in FIELDS + ("test_loss",):
            assert np.array_equal(getattr(seq, field), getattr(par, field))

    def test_env_thread_cap(self, monkeypatch):
        monkeypatch.setenv("CLEANLOOP_THREADS", "2")
        ds = toy_dataset(8)
        tensor = cross_validate(ds, 2, TrainerConfig(epochs=1, seed=0))
        assert tensor.fold_count == 2

    def test_snapshot_probability_bounds(self):
        ds = toy_dataset(15)
        tensor = cross_validate(ds, 3, TrainerConfig(epochs=4, seed=1))
        total = tensor.assigned_prob + tensor.max_other_prob
        assert (total <= 1 + 1e-9).all()
        assert (tensor.assigned_prob >= 0).all() and (tensor.assigned_prob <= 1).all()

    def test_train_fold_validates_fold_index(self):
        ds = toy_dataset(6)
        assignment = assign_folds(ds, 2, seed=0)
        with pytest.raises(ValueError):
            train_fold(ds, 5, assignment, TrainerConfig(epochs=1))


class TestBestEpoch:
    def make_tensor(self, test_losses):
        from oracles import make_tensor

        rng = np.random.default_rng(0)
        tensor = make_tensor(rng, 2, len(test_losses), [1, 1, 1, 1])
        tensor.test_loss[0] = np.array(test_losses)
        return tensor

    def test_argmin(self):
        assert best_epoch_by_test_loss(self.make_tensor([0.9, 0.4, 0.6]), 0) == 2

    def test_tie_goes_to_earliest(self):
        assert best_epoch_by_test_loss(self.make_tensor([0.5, 0.5]), 0) == 1

    def test_single_epoch(self):
        assert best_epoch_by_test_loss(self.make_tensor([0.7]), 0) == 1


class TestExport:
    def test_round_trip(self, tmp_path):
        ds = token_tag_sequences(6, seed=4, dim=DIM)
        tensor = cross_validate(ds, 2, TrainerConfig(epochs=2, seed=0))
        path = tmp_path / "dynamics.jsonl"
        export_dynamics(tensor, path)
        loaded = load_dynamics(path, ds)
        for field in FIELDS:
            assert np.array_equal(getattr(tensor, field), getattr(loaded, field))
        np.testing.assert_allclose(tensor.test_loss, loaded.test_loss, rtol=1e-12)
        assert np.array_equal(tensor.instance_fold, loaded.instance_fold)

    def test_incomplete_file_rejected(self, tmp_path):
        ds = toy_dataset(4)
        tensor = cross_validate(ds, 2, TrainerConfig(epochs=1, seed=0))
        path = tmp_path / "dynamics.jsonl"
        export_dynamics(tensor, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ValueError):
            load_dynamics(path, ds)

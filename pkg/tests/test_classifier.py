import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import sparse

from newsclf.classifier import (
    AdamState,
    FeaturizerConfig,
    LinearModel,
    TrainConfig,
    adam_init,
    adam_step,
    encode_labels,
    featurize,
    featurize_batch,
    featurize_texts,
    load_model,
    loss_and_gradient,
    predict_labels,
    predict_multiclass,
    predict_multilabel,
    save_model,
    tokenize,
    train,
    tune_threshold,
)
from newsclf.corpus import Dataset, LabeledInstance, LabelKind, LabelSpace, Subtask
from newsclf.errors import NumericError, ValidationError

DIM = 2**10
FCFG = FeaturizerConfig(hash_dim=DIM, ngram_max=1, max_tokens=64)
S1 = LabelSpace(Subtask.S1, LabelKind.MULTICLASS, ("opinion", "reporting", "satire"))
ML5 = LabelSpace(Subtask.S2, LabelKind.MULTILABEL, tuple(f"f{i}" for i in range(14)))


def zero_model(space, fcfg=FCFG, threshold=0.5):
    n = len(space.labels)
    return LinearModel(
        space.kind, np.zeros((n, fcfg.hash_dim)), np.zeros(n), space, fcfg, threshold
    )


def toy_corpus(space, n_per_label, seed, multilabel=False):
    rng = np.random.default_rng(seed)
    filler = [f"word{i}" for i in range(30)]
    instances = []
    for li, label in enumerate(space.labels):
        for j in range(n_per_label):
            words = list(rng.choice(filler, size=8)) + [f"key{li}"] * 3
            rng.shuffle(words)
            labels = frozenset([label])
            instances.append(
                LabeledInstance(f"{label}-{j}", " ".join(words), labels)
            )
    return Dataset(space.subtask, frozenset(["en"]), tuple(instances), space)


class TestTokenize:
    def test_punctuation_and_lowercase(self):
        assert tokenize("Hello, world!", FCFG) == ["hello", "world"]

    def test_empty(self):
        assert tokenize("", FCFG) == []

    def test_truncates_to_max_tokens(self):
        text = " ".join(f"tok{i}" for i in range(600))
        cfg = FeaturizerConfig(hash_dim=DIM, max_tokens=512)
        tokens = tokenize(text, cfg)
        assert len(tokens) == 512
        assert tokens[0] == "tok0" and tokens[-1] == "tok511"

    def test_lowercase_off(self):
        cfg = replace(FCFG, lowercase=False)
        assert tokenize("Hello API", cfg) == ["Hello", "API"]

    def test_unicode_words(self):
        assert tokenize("café творчество!", FCFG) == ["café", "творчество"]


class TestFeaturize:
    def test_deterministic(self):
        a = featurize(["alpha", "beta"], FCFG)
        b = featurize(["alpha", "beta"], FCFG)
        assert (a != b).nnz == 0

    def test_empty_is_zero_vector(self):
        v = featurize([], FCFG)
        assert v.shape == (1, DIM)
        assert v.nnz == 0

    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            tokens = [f"w{i}" for i in rng.integers(0, 50, size=rng.integers(1, 30))]
            v = featurize(tokens, FCFG)
            assert np.sqrt((v.multiply(v)).sum()) == pytest.approx(1.0, abs=1e-12)

    def test_bigrams_add_features(self):
        uni = FeaturizerConfig(hash_dim=DIM, ngram_max=1, max_tokens=64)
        bi = FeaturizerConfig(hash_dim=DIM, ngram_max=2, max_tokens=64)
        tokens = ["a", "b", "c"]
        assert featurize(tokens, bi).nnz > featurize(tokens, uni).nnz

    def test_batch_rows_match_single(self):
        lists = [["a", "b"], [], ["c"]]
        batch = featurize_batch(lists, FCFG)
        for row, tokens in enumerate(lists):
            single = featurize(tokens, FCFG)
            assert (batch[row] != single).nnz == 0

    def test_hash_dim_validation(self):
        with pytest.raises(ValidationError):
            FeaturizerConfig(hash_dim=1000)
        with pytest.raises(ValidationError):
            FeaturizerConfig(hash_dim=2**9)

    def test_ngram_range_validation(self):
        with pytest.raises(ValidationError):
            FeaturizerConfig(hash_dim=DIM, ngram_min=3, ngram_max=2)


def random_batch(rng, space, fcfg):
    n = int(rng.integers(2, 6))
    texts = [
        " ".join(f"w{rng.integers(0, 40)}" for _ in range(int(rng.integers(3, 12))))
        for _ in range(n)
    ]
    features = featurize_texts(texts, fcfg)
    n_labels = len(space.labels)
    if space.kind is LabelKind.MULTICLASS:
        targets = rng.integers(0, n_labels, size=n)
    else:
        targets = (rng.random((n, n_labels)) < 0.3).astype(float)
    return features, targets


def random_model(rng, space, fcfg):
    n = len(space.labels)
    return LinearModel(
        space.kind,
        rng.normal(0, 0.5, size=(n, fcfg.hash_dim)),
        rng.normal(0, 0.5, size=n),
        space,
        fcfg,
    )


def fd_gradient_check(model, batch, h=1e-5):
    """Max relative error of analytic vs central-difference gradients.

    Weight columns never touched by the batch have exactly zero analytic
    gradient (the loss never reads them), so only active columns are probed.
    """
    features, _ = batch
    loss, (d_weights, d_bias) = loss_and_gradient(model, batch)
    active = np.unique(features.indices)

    untouched = np.setdiff1d(np.arange(model.featurizer.hash_dim), active)[:5]
    assert np.all(d_weights[:, untouched] == 0.0)

    worst = 0.0
    for row in range(model.weights.shape[0]):
        for col in active:
            w_plus = model.weights.copy()
            w_plus[row, col] += h
            w_minus = model.weights.copy()
            w_minus[row, col] -= h
            up = loss_and_gradient(replace(model, weights=w_plus), batch)[0]
            down = loss_and_gradient(replace(model, weights=w_minus), batch)[0]
            fd = (up - down) / (2 * h)
            err = abs(fd - d_weights[row, col]) / max(abs(fd), abs(d_weights[row, col]), 1e-8)
            worst = max(worst, err)
        b_plus = model.bias.copy()
        b_plus[row] += h
        b_minus = model.bias.copy()
        b_minus[row] -= h
        up = loss_and_gradient(replace(model, bias=b_plus), batch)[0]
        down = loss_and_gradient(replace(model, bias=b_minus), batch)[0]
        fd = (up - down) / (2 * h)
        err = abs(fd - d_bias[row]) / max(abs(fd), abs(d_bias[row]), 1e-8)
        worst = max(worst, err)
    return worst


class TestLoss:
    def test_zero_weight_multiclass_is_ln3(self):
        model = zero_model(S1)
        features = featurize_texts(["some words here", "more words"], FCFG)
        targets = np.array([0, 2])
        loss, _ = loss_and_gradient(model, (features, targets))
        assert loss == pytest.approx(math.log(3), abs=1e-12)

    def test_zero_weight_multilabel_is_L_ln2(self):
        model = zero_model(ML5)
        features = featurize_texts(["some words"], FCFG)
        targets = np.zeros((1, 14))
        loss, _ = loss_and_gradient(model, (features, targets))
        assert loss == pytest.approx(14 * math.log(2), abs=1e-12)

    def test_empty_batch_rejected(self):
        model = zero_model(S1)
        features = sparse.csr_matrix((0, DIM))
        with pytest.raises(ValidationError):
            loss_and_gradient(model, (features, np.array([], dtype=np.int64)))

    def test_nonfinite_loss_raises(self):
        n = len(S1.labels)
        model = LinearModel(S1.kind, np.ones((n, DIM)), np.zeros(n), S1, FCFG)
        # overflow cannot happen with the stable formulations, so force a NaN
        # through the features themselves
        features = sparse.csr_matrix(([np.nan], ([0], [0])), shape=(1, DIM))
        with pytest.raises(NumericError):
            loss_and_gradient(model, (features, np.array([0])))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(99)
        for trial in range(25):
            space = S1 if trial % 2 == 0 else ML5
            model = random_model(rng, space, FCFG)
            batch = random_batch(rng, space, FCFG)
            assert fd_gradient_check(model, batch) < 1e-4


class TestAdam:
    CFG = TrainConfig(learning_rate=0.05)

    def test_zero_gradient_leaves_params(self):
        params = (np.array([1.0, -2.0]),)
        state = adam_init(params)
        new_params, new_state = adam_step(params, (np.zeros(2),), state, self.CFG)
        assert np.array_equal(new_params[0], params[0])
        assert new_state.step == 1

    def test_moments_decay_toward_zero(self):
        params = (np.array([1.0]),)
        state = AdamState(1, (np.array([0.4]),), (np.array([0.9]),))
        _, new_state = adam_step(params, (np.zeros(1),), state, self.CFG)
        assert new_state.first_moment[0][0] == pytest.approx(0.4 * 0.9)
        assert new_state.second_moment[0][0] == pytest.approx(0.9 * 0.999)

    def test_first_step_is_lr_times_sign(self):
        g = np.array([0.5, -0.25, 3.0])
        params = (np.zeros(3),)
        new_params, _ = adam_step(params, (g,), adam_init(params), self.CFG)
        assert np.allclose(new_params[0], -0.05 * np.sign(g), atol=1e-6)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        params = (rng.normal(size=(3, 4)), rng.normal(size=3))
        grad = (rng.normal(size=(3, 4)), rng.normal(size=3))
        a = adam_step(params, grad, adam_init(params), self.CFG)
        b = adam_step(params, grad, adam_init(params), self.CFG)
        assert np.array_equal(a[0][0], b[0][0])
        assert np.array_equal(a[0][1], b[0][1])

    def test_shape_mismatch_rejected(self):
        params = (np.zeros(3),)
        with pytest.raises(ValidationError):
            adam_step(params, (np.zeros(4),), adam_init(params), self.CFG)

    def test_inputs_not_mutated(self):
        params = (np.ones(3),)
        grad = (np.full(3, 2.0),)
        state = adam_init(params)
        adam_step(params, grad, state, self.CFG)
        assert np.array_equal(params[0], np.ones(3))
        assert np.array_equal(state.first_moment[0], np.zeros(3))


TRAIN_CFG = TrainConfig(epochs=10, max_seq_len=64, batch_size=4, learning_rate=0.05)


class TestTrain:
    def test_loss_decreases_on_separable_data(self):
        ds = toy_corpus(S1, 20, seed=1)
        losses = []
        train(ds, TRAIN_CFG, FCFG, seed=0, epoch_losses=losses)
        assert len(losses) == TRAIN_CFG.epochs
        assert losses[-1] < losses[0]
        assert losses[-1] < math.log(3) / 2

    def test_deterministic(self):
        ds = toy_corpus(S1, 10, seed=2)
        a = train(ds, TRAIN_CFG, FCFG, seed=7)
        b = train(ds, TRAIN_CFG, FCFG, seed=7)
        assert a.equals(b)

    def test_different_seed_different_model(self):
        ds = toy_corpus(S1, 10, seed=2)
        a = train(ds, TRAIN_CFG, FCFG, seed=7)
        b = train(ds, TRAIN_CFG, FCFG, seed=8)
        assert not a.equals(b)

    def test_fits_own_training_data(self):
        from newsclf.metrics import score_multiclass

        ds = toy_corpus(S1, 20, seed=3)
        model = train(ds, TRAIN_CFG, FCFG, seed=0)
        pred = predict_labels(model, [i.text for i in ds.instances])
        gold = {i.unit_id: next(iter(i.labels)) for i in ds.instances}
        got = {i.unit_id: p for i, p in zip(ds.instances, pred)}
        assert score_multiclass(gold, got, S1).f1_macro >= 0.95

    def test_empty_dataset_rejected(self):
        ds = Dataset(Subtask.S1, frozenset(["en"]), (), S1)
        with pytest.raises(ValidationError):
            train(ds, TRAIN_CFG, FCFG, seed=0)

    def test_max_tokens_follows_train_cfg(self):
        ds = toy_corpus(S1, 5, seed=4)
        cfg = replace(TRAIN_CFG, max_seq_len=32)
        model = train(ds, cfg, FCFG, seed=0)
        assert model.featurizer.max_tokens == 32


class TestPredict:
    def test_zero_weights_uniform_and_first_label(self):
        model = zero_model(S1)
        label, probs = predict_multiclass(model, "anything at all")
        assert label == "opinion"  # tie broken toward the lowest index
        assert np.allclose(probs, 1 / 3)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(11)
        model = random_model(rng, S1, FCFG)
        for _ in range(20):
            text = " ".join(f"w{rng.integers(0, 40)}" for _ in range(6))
            _, probs = predict_multiclass(model, text)
            assert abs(probs.sum() - 1.0) < 1e-9

    def test_handmade_weights_pick_satire(self):
        fcfg = FCFG
        weights = np.zeros((3, DIM))
        from newsclf.classifier import _hash_ngram

        joke_col = _hash_ngram("joke", DIM)
        weights[2, joke_col] = 5.0
        model = LinearModel(LabelKind.MULTICLASS, weights, np.zeros(3), S1, fcfg)
        label, _ = predict_multiclass(model, "joke")
        assert label == "satire"

    def test_multilabel_boundary_inclusive(self):
        model = zero_model(ML5, threshold=0.5)
        chosen, scores = predict_multilabel(model, "whatever")
        assert chosen == frozenset(ML5.labels)  # all scores exactly 0.5
        assert np.allclose(scores, 0.5)

    def test_multilabel_higher_threshold_empties(self):
        model = zero_model(ML5, threshold=0.6)
        chosen, _ = predict_multilabel(model, "whatever")
        assert chosen == frozenset()

    def test_multilabel_sign_structure(self):
        from newsclf.classifier import _hash_ngram

        weights = np.zeros((14, DIM))
        col = _hash_ngram("trigger", DIM)
        weights[3, col] = 4.0
        weights[7, col] = -4.0
        model = LinearModel(
            LabelKind.MULTILABEL, weights, np.zeros(14), ML5, FCFG, 0.6
        )
        chosen, _ = predict_multilabel(model, "trigger")
        assert "f3" in chosen and "f7" not in chosen

    def test_kind_checked(self):
        with pytest.raises(ValidationError):
            predict_multilabel(zero_model(S1), "x")
        with pytest.raises(ValidationError):
            predict_multiclass(zero_model(ML5), "x")


class TestMultilabelTraining:
    def test_learns_keyword_labels(self):
        from newsclf.metrics import score_multilabel

        rng = np.random.default_rng(21)
        filler = [f"word{i}" for i in range(30)]
        space = ML5
        instances = []
        for j in range(120):
            active = frozenset(
                space.labels[i] for i in range(5) if rng.random() < 0.4
            )
            words = list(rng.choice(filler, size=6))
            for label in active:
                words += [f"key_{label}"] * 3
            rng.shuffle(words)
            instances.append(LabeledInstance(f"u{j}", " ".join(words), active))
        ds = Dataset(Subtask.S2, frozenset(["en"]), tuple(instances), space)
        model = train(ds, TRAIN_CFG, FCFG, seed=0)
        pred = predict_labels(model, [i.text for i in ds.instances])
        gold = {i.unit_id: set(i.labels) for i in ds.instances}
        got = {i.unit_id: set(p) for i, p in zip(ds.instances, pred)}
        assert score_multilabel(gold, got, space).f1_micro >= 0.9


class TestThresholdTuning:
    def test_returns_smallest_best_candidate(self):
        ds = toy_corpus(ML5, 4, seed=5)
        model = train(ds, TrainConfig(epochs=3, max_seq_len=64), FCFG, seed=0)
        t = tune_threshold(model, ds)
        assert 0 < t < 1

    def test_rejects_multiclass(self):
        with pytest.raises(ValidationError):
            tune_threshold(zero_model(S1), toy_corpus(S1, 2, seed=0))


class TestSerialization:
    def test_round_trip_exact(self, tmp_path):
        ds = toy_corpus(S1, 5, seed=6)
        model = train(ds, TrainConfig(epochs=2, max_seq_len=64), FCFG, seed=0)
        path = tmp_path / "model.npz"
        save_model(model, path)
        back = load_model(path)
        assert back.equals(model)

    def test_version_gate(self, tmp_path):
        ds = toy_corpus(S1, 3, seed=6)
        model = train(ds, TrainConfig(epochs=1, max_seq_len=64), FCFG, seed=0)
        path = tmp_path / "model.npz"
        save_model(model, path)
        import json

        import numpy as np

        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            weights, bias = data["weights"], data["bias"]
        meta["format_version"] = 99
        with open(path, "wb") as fh:
            np.savez(
                fh,
                meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
                weights=weights,
                bias=bias,
            )
        from newsclf.errors import FormatError

        with pytest.raises(FormatError, match="version"):
            load_model(path)

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "model.npz"
        path.write_bytes(b"not a model")
        from newsclf.errors import FormatError

        with pytest.raises(FormatError):
            load_model(path)


class TestEncodeLabels:
    def test_multiclass_indices(self):
        ds = toy_corpus(S1, 1, seed=0)
        y = encode_labels(ds)
        assert y.dtype == np.int64
        assert set(y.tolist()) == {0, 1, 2}

    def test_multilabel_matrix(self):
        space = ML5
        instances = (
            LabeledInstance("a", "x", frozenset(["f0", "f3"])),
            LabeledInstance("b", "y", frozenset()),
        )
        ds = Dataset(Subtask.S2, frozenset(["en"]), instances, space)
        y = encode_labels(ds)
        assert y.shape == (2, 14)
        assert y[0, 0] == 1.0 and y[0, 3] == 1.0 and y.sum() == 2.0

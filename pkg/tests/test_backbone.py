import numpy as np
import pytest
from sklearn.svm import LinearSVC

from gatecascade import (
    Backbone,
    Block,
    DataError,
    LabeledDataset,
    NumericalError,
    UsageError,
    forward_collect,
    forward_partial,
    load_backbone,
    predict_final,
    save_backbone,
    train_backbone,
)
from gatecascade.backbone import argmax_first, predict_batch


def identity_backbone(dim=3):
    eye = np.eye(dim)
    blocks = (Block(eye, np.zeros(dim), "identity"), Block(eye, np.zeros(dim), "identity"))
    return Backbone(blocks, (0, 1), Block(eye, np.zeros(dim), "identity"))


def two_blobs(seed=0, n=50):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(-3, 0.5, size=(n, 2)), rng.normal(3, 0.5, size=(n, 2))])
    return LabeledDataset(X, np.repeat([0, 1], n), 2)


class TestFlops:
    def test_small_backbone_total(self, small_backbone):
        assert small_backbone.block_flops == (72, 136)
        assert small_backbone.classifier.flops == 51
        assert small_backbone.total_flops == 259

    def test_partial_flops(self, small_backbone):
        _, flops = forward_partial(small_backbone, np.ones(4), 0)
        assert flops == 72

    def test_additivity(self, small_backbone):
        bb = small_backbone
        for p in bb.tap_points:
            _, flops = forward_partial(bb, np.ones(4), p)
            rest = sum(bb.block_flops[p + 1:]) + bb.classifier.flops
            assert flops + rest == bb.total_flops


class TestForward:
    def test_identity_backbone(self):
        bb = identity_backbone()
        x = np.array([0.5, -2.0, 7.0])
        trace = forward_collect(bb, x)
        for act in trace.tap_activations.values():
            np.testing.assert_array_equal(act, x)
        np.testing.assert_array_equal(trace.logits, x)
        assert trace.flops_used == bb.total_flops

    def test_predict_identity(self):
        assert predict_final(identity_backbone(), [0, 0, 7])[0] == 2

    def test_argmax_ties_to_lowest(self):
        assert argmax_first([0.1, 0.9, 0.3]) == 1
        assert argmax_first([0.5, 0.5]) == 0

    def test_tap_consistency(self, small_backbone, rng):
        for _ in range(20):
            x = rng.normal(size=4)
            trace = forward_collect(small_backbone, x)
            for p in small_backbone.tap_points:
                act, _ = forward_partial(small_backbone, x, p)
                assert act.tobytes() == trace.tap_activations[p].tobytes()

    def test_nan_rejected(self, small_backbone):
        with pytest.raises(DataError):
            forward_collect(small_backbone, [0, np.nan, 0, 0])

    def test_dimension_mismatch(self, small_backbone):
        with pytest.raises(DataError):
            forward_collect(small_backbone, np.ones(5))

    def test_bad_tap(self, small_backbone):
        with pytest.raises(UsageError):
            forward_partial(small_backbone, np.ones(4), 99)

    def test_chain_checked(self):
        b1 = Block(np.ones((2, 3)), np.zeros(3))
        b2 = Block(np.ones((4, 2)), np.zeros(2))
        with pytest.raises(DataError):
            Backbone((b1, b2), (0,), Block(np.ones((2, 2)), np.zeros(2)))


class TestTraining:
    def test_separable_blobs(self):
        data = two_blobs()
        oracle = LinearSVC().fit(data.features, data.labels)
        assert oracle.score(data.features, data.labels) == 1.0
        bb = train_backbone(data, [2, 8, 8], epochs=50, learning_rate=0.05, seed=0)
        assert np.mean(predict_batch(bb, data.features) == data.labels) >= 0.99

    def test_deterministic(self):
        data = two_blobs()
        a = train_backbone(data, [2, 8, 8], epochs=5, seed=3)
        b = train_backbone(data, [2, 8, 8], epochs=5, seed=3)
        assert a.checksum() == b.checksum()
        assert a.checksum() != train_backbone(data, [2, 8, 8], epochs=5, seed=4).checksum()

    def test_zero_epochs(self):
        with pytest.raises(UsageError):
            train_backbone(two_blobs(), [2, 8], epochs=0)

    def test_dims_must_match_features(self):
        with pytest.raises(DataError):
            train_backbone(two_blobs(), [3, 8], epochs=1)

    def test_divergence_detected(self):
        rng = np.random.default_rng(0)
        data = LabeledDataset(rng.normal(size=(40, 2)) * 1e3, np.arange(40) % 2, 2)
        with pytest.raises(NumericalError, match="learning rate"):
            train_backbone(data, [2, 64, 64], epochs=50, learning_rate=1e3, seed=0,
                           activation="identity")

    def test_loss_smoke_monotone(self):
        rng = np.random.default_rng(7)
        data = LabeledDataset(rng.normal(size=(10, 3)), np.arange(10) % 2, 2)
        _, history = train_backbone(data, [3, 6], epochs=30, learning_rate=1e-3,
                                    batch_size=10, seed=0, return_history=True)
        for before, after in zip(history, history[1:]):
            assert after <= before * 1.05

    def test_default_taps(self):
        bb = train_backbone(two_blobs(), [2, 4, 4, 4], epochs=1)
        assert bb.tap_points == (0, 1)


class TestModelFile:
    def test_round_trip(self, tmp_path, rng):
        bb = train_backbone(two_blobs(), [2, 5, 4], epochs=3, seed=1)
        path = tmp_path / "bb.txt"
        save_backbone(bb, path)
        back = load_backbone(path)
        assert back.checksum() == bb.checksum()
        assert back.tap_points == bb.tap_points
        for _ in range(10):
            x = rng.normal(size=2)
            np.testing.assert_array_equal(forward_collect(back, x).logits,
                                          forward_collect(bb, x).logits)
        assert path.read_text().splitlines()[0] == "gatecascade-backbone v1"

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bb.txt"
        path.write_text("something else\n")
        with pytest.raises(DataError, match="header"):
            load_backbone(path)

    def test_truncated(self, tmp_path, small_backbone):
        path = tmp_path / "bb.txt"
        save_backbone(small_backbone, path)
        path.write_text("\n".join(path.read_text().splitlines()[:4]))
        with pytest.raises(DataError):
            load_backbone(path)

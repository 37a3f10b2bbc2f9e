import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opmark.detector import (
    BENIGN, MALICIOUS, DimensionMismatch, EmptyEvalSet, EvalReport, Hyperparameters, LabeledSample,
    SingleClassDataset, Tree, TreeEnsembleModel, evaluate, evaluate_arrays, fit_arrays, predict, train,
)
from opmark.markov import FeatureVector

FAST = {"random-forest": Hyperparameters.forest(n_trees=30), "gradient-boosted": Hyperparameters.boosting(n_trees=60)}


def blobs(n=200, d=5, gap=12.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    X = rng.standard_normal((n, d)) + gap * y[:, None] * np.eye(d)[0]
    return X, y


def xor_data(n=600, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 4))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    return X, y


@pytest.mark.parametrize("kind", sorted(FAST))
def test_separable_blobs(kind):
    X, y = blobs()
    Xt, yt = blobs(seed=1)
    assert evaluate_arrays(fit_arrays(X, y, FAST[kind]), Xt, yt).accuracy == 1.0


@pytest.mark.parametrize("kind", sorted(FAST))
def test_learns_xor(kind):
    X, y = xor_data()
    Xt, yt = xor_data(seed=1)
    assert evaluate_arrays(fit_arrays(X, y, FAST[kind], seed=2), Xt, yt).accuracy >= 0.95


@pytest.mark.parametrize("kind", sorted(FAST))
def test_deterministic_in_seed(kind):
    X, y = xor_data(200)
    a = fit_arrays(X, y, FAST[kind], seed=4)
    b = fit_arrays(X, y, FAST[kind], seed=4)
    assert a.dumps() == b.dumps()
    c = fit_arrays(X, y, FAST[kind], seed=5)
    assert a.dumps() != c.dumps()


def test_depth_limit_respected():
    X, y = xor_data(300)
    model = fit_arrays(X, y, Hyperparameters.forest(n_trees=5, max_depth=3))
    assert max(t.depth for t in model.trees) <= 3


def test_boosting_loss_never_increases():
    X, y = xor_data(300)
    losses = fit_arrays(X, y, FAST["gradient-boosted"]).train_loss
    assert len(losses) == 61
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_stump_prediction():
    model = TreeEnsembleModel("random-forest", [Tree.stump(0, 0.5, 0.1, 0.9)], 2)
    assert predict(model, np.array([1.0, 0.0])) == (MALICIOUS, 0.9)
    assert predict(model, FeatureVector("MM:linear", np.array([0.0, 0.0]))) == (BENIGN, 0.1)


def test_score_tie_goes_to_benign():
    model = TreeEnsembleModel("random-forest", [Tree.stump(0, 0.5, 0.5, 0.5)], 1)
    assert predict(model, np.array([3.0]))[0] == BENIGN


def test_confusion_arithmetic():
    r = EvalReport(tp=99, tn=95, fp=5, fn=1)
    assert r.accuracy == pytest.approx(0.97)
    assert r.false_positive_rate == pytest.approx(0.05)
    assert r.false_negative_rate == pytest.approx(0.01)
    assert r.csv_row().splitlines()[0].startswith("accuracy,false_positive_rate")


def test_from_predictions_and_sweep():
    r = EvalReport.from_predictions([0, 0, 1, 1], [0, 1, 1, 0], scores=[0.1, 0.7, 0.9, 0.4])
    assert (r.tp, r.tn, r.fp, r.fn) == (1, 1, 1, 1)
    sweep = r.sweep([0.0, 0.5, 1.0])
    assert [s["fpr"] for s in sweep] == [1.0, 0.5, 0.0]
    assert [s["fnr"] for s in sweep] == [0.0, 0.5, 1.0]


def test_identical_benign_rows_give_identical_fpr():
    X, y = blobs(200, gap=1.5)
    model = fit_arrays(X, y, FAST["random-forest"])
    Xt, yt = blobs(100, gap=1.5, seed=3)
    shifted = Xt.copy()
    shifted[yt == 1] += 10.0  # only the malicious rows differ
    a, b = evaluate_arrays(model, Xt, yt), evaluate_arrays(model, shifted, yt)
    assert a.false_positive_rate == b.false_positive_rate


def test_labeled_sample_api():
    X, y = blobs(40)
    samples = [LabeledSample(FeatureVector("GF:linear", x), "malicious" if l else "benign", f"s{i}")
               for i, (x, l) in enumerate(zip(X, y))]
    model = train(samples, FAST["random-forest"])
    report = evaluate(model, samples)
    assert report.sample_ids[0] == "s0" and report.accuracy == 1.0


def test_errors():
    X, y = blobs(20)
    with pytest.raises(SingleClassDataset):
        fit_arrays(X, np.zeros(20, dtype=int))
    with pytest.raises(DimensionMismatch):
        fit_arrays(X, y[:5])
    model = fit_arrays(X, y, FAST["random-forest"])
    with pytest.raises(DimensionMismatch):
        model.decision(np.zeros((1, 3)))
    with pytest.raises(EmptyEvalSet):
        evaluate_arrays(model, X[:0], y[:0])
    with pytest.raises(EmptyEvalSet):
        evaluate(model, [])
    with pytest.raises(ValueError):
        Hyperparameters("svm")


@pytest.mark.parametrize("kind", sorted(FAST))
def test_serialization_bit_identical(kind, tmp_path):
    X, y = xor_data(200)
    model = fit_arrays(X, y, FAST[kind], seed=1)
    model.save(tmp_path / "m.ote")
    back = TreeEnsembleModel.load(tmp_path / "m.ote")
    probe = np.random.default_rng(9).uniform(-1, 1, (50, 4))
    assert model.decision(probe).tobytes() == back.decision(probe).tobytes()
    assert TreeEnsembleModel.loads(model.dumps()).dumps() == model.dumps()


@settings(max_examples=20)
@given(st.integers(0, 1000))
def test_scores_are_probabilities(seed):
    X, y = blobs(60, d=3, gap=1.0, seed=seed)
    for hp in (Hyperparameters.forest(n_trees=5), Hyperparameters.boosting(n_trees=5)):
        s = fit_arrays(X, y, hp, seed=seed).decision(X)
        assert np.all((s >= 0) & (s <= 1))

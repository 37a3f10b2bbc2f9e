"""Random forests and gradient-boosted trees, implemented with numpy only.

Both ensembles split on quantile-binned features: each feature gets a set of
candidate thresholds from the training data, a split sends ``x <= t`` left,
and the same raw thresholds are used at prediction time.  Label 1 means
malicious; a score of exactly 0.5 is classified benign.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import container
from .ica import DimensionMismatch
from .markov import FeatureVector

log = logging.getLogger(__name__)

MAGIC = b"OTE1"
BENIGN, MALICIOUS = 0, 1
LABELS = {"benign": BENIGN, "malicious": MALICIOUS}
KINDS = ("random-forest", "gradient-boosted")


class SingleClassDataset(ValueError):
    pass


class EmptyEvalSet(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    features: FeatureVector
    label: int
    sample_id: str = ""

    def __post_init__(self):
        label = LABELS.get(self.label, self.label) if isinstance(self.label, str) else self.label
        if label not in (BENIGN, MALICIOUS):
            raise ValueError(f"bad label {self.label!r}")
        object.__setattr__(self, "label", int(label))


@dataclass(frozen=True)
class Hyperparameters:
    kind: str = "random-forest"
    n_trees: int = 100
    max_depth: int = 12
    learning_rate: float = 0.1
    max_features: float | str = "sqrt"  # forests: per-split feature subsample
    min_samples_leaf: int = 1
    n_bins: int = 32
    reg_lambda: float = 1.0  # boosting: L2 penalty on leaf values

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown ensemble kind {self.kind!r}")
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees, max_depth and min_samples_leaf must be positive")

    @classmethod
    def forest(cls, **kw) -> "Hyperparameters":
        return cls(**{"kind": "random-forest", "n_trees": 100, "max_depth": 12, **kw})

    @classmethod
    def boosting(cls, **kw) -> "Hyperparameters":
        return cls(**{"kind": "gradient-boosted", "n_trees": 200, "max_depth": 4, "learning_rate": 0.1,
                      "max_features": 1.0, **kw})


@dataclass
class Tree:
    """Flat array tree; ``feature == -1`` marks a leaf."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @classmethod
    def stump(cls, feature: int, threshold: float, left_value: float, right_value: float) -> "Tree":
        return cls(np.array([feature, -1, -1]), np.array([threshold, 0.0, 0.0]), np.array([1, -1, -1]),
                   np.array([2, -1, -1]), np.array([0.0, left_value, right_value]))

    @property
    def depth(self) -> int:
        def walk(i):
            return 0 if self.feature[i] < 0 else 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            go_left = np.zeros(len(X), dtype=bool)
            go_left[inner] = X[rows[inner], f[inner]] <= self.threshold[node[inner]]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)


@dataclass
class TreeEnsembleModel:
    kind: str
    trees: list[Tree]
    n_features: int
    hyperparameters: Hyperparameters = field(default_factory=Hyperparameters)
    seed: int = 0
    base_score: float = 0.0  # boosting: initial log-odds
    train_loss: list[float] = field(default_factory=list, repr=False)

    def decision(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"model expects {self.n_features} features, got {X.shape[1]}")
        total = np.zeros(len(X))
        for t in self.trees:
            total += t.apply(X)
        if self.kind == "random-forest":
            return total / len(self.trees)
        return _sigmoid(self.base_score + total)

    def save(self, path) -> None:
        container.save(path, MAGIC, self._meta(), self._arrays())

    def dumps(self) -> bytes:
        return container.dumps(MAGIC, self._meta(), self._arrays())

    def _meta(self) -> dict:
        return {"kind": self.kind, "n_features": self.n_features, "seed": self.seed,
                "base_score": self.base_score, "hyperparameters": asdict(self.hyperparameters)}

    def _arrays(self) -> dict:
        sizes = np.array([len(t.feature) for t in self.trees], dtype=np.int64)
        cat = lambda name, dt: np.concatenate([getattr(t, name) for t in self.trees]).astype(dt)
        return {"sizes": sizes, "feature": cat("feature", np.int64), "threshold": cat("threshold", np.float64),
                "left": cat("left", np.int64), "right": cat("right", np.int64), "value": cat("value", np.float64)}

    @classmethod
    def load(cls, path) -> "TreeEnsembleModel":
        return cls._from(*container.load(path, MAGIC))

    @classmethod
    def loads(cls, data: bytes) -> "TreeEnsembleModel":
        return cls._from(*container.loads(data, MAGIC))

    @classmethod
    def _from(cls, meta, a) -> "TreeEnsembleModel":
        trees, pos = [], 0
        for n in a["sizes"]:
            sl = slice(pos, pos + int(n))
            trees.append(Tree(a["feature"][sl], a["threshold"][sl], a["left"][sl], a["right"][sl], a["value"][sl]))
            pos += int(n)
        return cls(meta["kind"], trees, meta["n_features"], Hyperparameters(**meta["hyperparameters"]),
                   meta["seed"], meta["base_score"])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def _logloss(y: np.ndarray, F: np.ndarray) -> float:
    # mean of log(1 + exp(-s F)) with s = +-1
    s = 2.0 * y - 1.0
    return float(np.logaddexp(0.0, -s * F).mean())


# ---------------------------------------------------------------------------
# binning and split search

@dataclass
class _Binned:
    codes: np.ndarray  # n x d_active, uint8/uint16
    features: np.ndarray  # active column -> original feature index
    thresholds: list[np.ndarray]
    n_bins: int
    flat: Optional[np.ndarray] = None  # codes offset per column, built on first use


def _bin(X: np.ndarray, n_bins: int) -> _Binned:
    feats, thrs, cols = [], [], []
    qs = np.linspace(0, 1, n_bins + 1)[1:-1]
    for j in range(X.shape[1]):
        x = X[:, j]
        lo, hi = x.min(), x.max()
        if lo == hi:
            continue
        distinct = np.unique(x)
        if len(distinct) <= n_bins:
            t = (distinct[:-1] + distinct[1:]) / 2.0
        else:
            t = np.unique(np.quantile(distinct, qs))
            t = t[t < hi]
        feats.append(j)
        thrs.append(t)
        cols.append(np.searchsorted(t, x, side="left"))
    width = max((len(t) + 1 for t in thrs), default=1)
    dtype = np.uint8 if width <= 256 else np.uint16
    codes = np.stack(cols, axis=1).astype(dtype) if cols else np.zeros((len(X), 0), dtype=dtype)
    return _Binned(codes, np.asarray(feats, dtype=np.int64), thrs, width)


def _histograms(codes: np.ndarray, idx: np.ndarray, cols: np.ndarray, stats: Sequence[np.ndarray], nb: int):
    sub = codes[np.ix_(idx, cols)].astype(np.int64) + (np.arange(len(cols)) * nb)[None, :]
    flat = sub.ravel()
    size = len(cols) * nb
    return [np.bincount(flat, weights=np.repeat(s, len(cols)), minlength=size).reshape(len(cols), nb).cumsum(axis=1)
            for s in stats]


def _best_split(gain: np.ndarray, valid: np.ndarray):
    gain = np.where(valid, gain, -np.inf)
    k = int(np.argmax(gain))
    c, b = divmod(k, gain.shape[1])
    return c, b, gain.flat[k]


class _Builder:
    def __init__(self, data: _Binned, hp: Hyperparameters, rng: np.random.Generator):
        self.data, self.hp, self.rng = data, hp, rng
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []

    def _node(self) -> int:
        for arr in (self.feature, self.left, self.right):
            arr.append(-1)
        self.threshold.append(0.0)
        self.value.append(0.0)
        return len(self.feature) - 1

    def tree(self) -> Tree:
        return Tree(np.array(self.feature, dtype=np.int64), np.array(self.threshold), np.array(self.left, dtype=np.int64),
                    np.array(self.right, dtype=np.int64), np.array(self.value))

    def _columns(self) -> np.ndarray:
        d = self.data.codes.shape[1]
        mf = self.hp.max_features
        if mf == "sqrt":
            k = max(1, int(round(np.sqrt(d))))
        else:
            k = max(1, int(round(float(mf) * d)))
        if k >= d:
            return np.arange(d)
        return np.sort(self.rng.choice(d, size=k, replace=False))

    def split(self, node: int, idx: np.ndarray, depth: int, leaf_value, split_gain) -> None:
        self.value[node] = leaf_value(idx)
        msl = self.hp.min_samples_leaf
        if depth >= self.hp.max_depth or len(idx) < 2 * msl or self.data.codes.shape[1] == 0:
            return
        found = split_gain(idx, self._columns())
        if found is None:
            return
        col, b = found
        go_left = self.data.codes[idx, col] <= b
        self.feature[node] = int(self.data.features[col])
        self.threshold[node] = float(self.data.thresholds[col][b])
        l, r = self._node(), self._node()
        self.left[node], self.right[node] = l, r
        self.split(l, idx[go_left], depth + 1, leaf_value, split_gain)
        self.split(r, idx[~go_left], depth + 1, leaf_value, split_gain)


def _forest_tree(data: _Binned, y: np.ndarray, hp: Hyperparameters, rng: np.random.Generator) -> Tree:
    n = len(y)
    boot = rng.integers(0, n, size=n)
    b = _Builder(data, hp, rng)
    msl, nb = hp.min_samples_leaf, data.n_bins

    def leaf_value(idx):
        return float(y[idx].mean())

    def split_gain(idx, cols):
        pos = y[idx]
        if pos.min() == pos.max():
            return None
        cnt, npos = _histograms(data.codes, idx, cols, [np.ones(len(idx)), pos.astype(np.float64)], nb)
        nL, pL = cnt, npos
        nR, pR = cnt[:, -1:] - nL, npos[:, -1:] - pL
        with np.errstate(divide="ignore", invalid="ignore"):
            score = (pL**2 + (nL - pL) ** 2) / nL + (pR**2 + (nR - pR) ** 2) / nR
        parent = (pos.sum() ** 2 + (len(idx) - pos.sum()) ** 2) / len(idx)
        c, bb, best = _best_split(score - parent, (nL >= msl) & (nR >= msl))
        return (int(cols[c]), bb) if best > 1e-12 else None

    b.split(b._node(), boot, 0, leaf_value, split_gain)
    return b.tree()


def _boosting_tree(data: _Binned, g: np.ndarray, h: np.ndarray, hp: Hyperparameters, rng) -> Tree:
    """Level-wise growth: one batched histogram pass per level, larger child by subtraction."""
    codes, nb, lam, msl = data.codes, data.n_bins, hp.reg_lambda, hp.min_samples_leaf
    n, d = codes.shape
    cols = np.arange(d)
    if hp.max_features != "sqrt" and float(hp.max_features) < 1.0 and d:
        cols = np.sort(rng.choice(d, size=max(1, int(round(float(hp.max_features) * d))), replace=False))
    if len(cols) == d:
        if data.flat is None:
            data.flat = codes.astype(np.int64) + (np.arange(d) * nb)[None, :]
        flat = data.flat
    else:
        flat = codes[:, cols].astype(np.int64) + (np.arange(len(cols)) * nb)[None, :]
    width = len(cols) * nb
    b = _Builder(data, hp, rng)

    def hist(groups):
        rows = np.concatenate(groups)
        slot = np.repeat(np.arange(len(groups)), [len(r) for r in groups])
        idx = (flat[rows] + (slot * width)[:, None]).ravel()
        size = len(groups) * width
        out = []
        for w in (None, g[rows], h[rows]):
            wt = None if w is None else np.repeat(w, len(cols))
            out.append(np.bincount(idx, weights=wt, minlength=size).reshape(len(groups), len(cols), nb))
        return [np.stack(x) for x in zip(*out)]  # per group: (3, ncols, nb)

    root = b._node()
    frontier = [(root, np.arange(n), hist([np.arange(n)])[0] if len(cols) else None)]
    for depth in range(hp.max_depth + 1):
        children, smalls = [], []
        for node, idx, hst in frontier:
            b.value[node] = float(-g[idx].sum() / (h[idx].sum() + lam))
            if depth == hp.max_depth or len(idx) < 2 * msl or hst is None:
                continue
            cnt, GL, HL = (x.cumsum(axis=1) for x in hst)
            G, H, C = GL[:, -1:], HL[:, -1:], cnt[:, -1:]
            gain = GL**2 / (HL + lam) + (G - GL) ** 2 / (H - HL + lam) - G**2 / (H + lam)
            c, bb, best = _best_split(gain, (cnt >= msl) & (C - cnt >= msl))
            if not best > 1e-12:
                continue
            col = int(cols[c])
            go_left = codes[idx, col] <= bb
            b.feature[node] = int(data.features[col])
            b.threshold[node] = float(data.thresholds[col][bb])
            l, r = b._node(), b._node()
            b.left[node], b.right[node] = l, r
            li, ri = idx[go_left], idx[~go_left]
            small_left = len(li) <= len(ri)
            children.append((l, li, r, ri, hst, small_left))
            smalls.append(li if small_left else ri)
        if not children:
            break
        small_hists = hist(smalls)
        frontier = []
        for (l, li, r, ri, hst, small_left), sh in zip(children, small_hists):
            big = hst - sh
            frontier += [(l, li, sh if small_left else big), (r, ri, big if small_left else sh)]
    return b.tree()


def _guard_leaves(tree: Tree, leaf_of: np.ndarray, y: np.ndarray, F: np.ndarray, scale: float) -> None:
    """Scale leaf values by ``scale`` and halve any leaf step that would raise the loss."""
    s = 2.0 * y - 1.0
    for node in np.flatnonzero(tree.feature < 0):
        members = leaf_of == node
        step = tree.value[node] * scale
        if members.any():
            base = np.logaddexp(0.0, -s[members] * F[members]).sum()
            for _ in range(60):
                if np.logaddexp(0.0, -s[members] * (F[members] + step)).sum() <= base:
                    break
                step *= 0.5
            else:
                step = 0.0
        tree.value[node] = step


def _leaf_ids(tree: Tree, X: np.ndarray) -> np.ndarray:
    ids = Tree(tree.feature, tree.threshold, tree.left, tree.right, np.arange(len(tree.feature), dtype=np.float64))
    return ids.apply(X).astype(np.int64)


def fit_arrays(X: np.ndarray, y: np.ndarray, hp: Hyperparameters = Hyperparameters(), seed: int = 0) -> TreeEnsembleModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise DimensionMismatch("X must be 2-D with one row per label")
    if len(y) < 2 or len(np.unique(y)) < 2:
        raise SingleClassDataset("training needs samples of both classes")
    data = _bin(X, hp.n_bins)
    streams = np.random.SeedSequence(seed).spawn(hp.n_trees)
    if hp.kind == "random-forest":
        trees = [_forest_tree(data, y, hp, np.random.default_rng(s)) for s in streams]
        return TreeEnsembleModel(hp.kind, trees, X.shape[1], hp, seed)
    prior = y.mean()
    base = float(np.log(prior / (1 - prior)))
    F = np.full(len(y), base)
    losses = [_logloss(y, F)]
    trees = []
    for s in streams:
        p = _sigmoid(F)
        g, h = p - y, p * (1 - p)
        tree = _boosting_tree(data, g, h, hp, np.random.default_rng(s))
        leaf_of = _leaf_ids(tree, X)
        _guard_leaves(tree, leaf_of, y, F, hp.learning_rate)
        F = F + tree.value[leaf_of]
        losses.append(_logloss(y, F))
        trees.append(tree)
    return TreeEnsembleModel(hp.kind, trees, X.shape[1], hp, seed, base, losses)


def _stack(samples: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    dims = {len(s.features) for s in samples}
    if len(dims) > 1:
        raise DimensionMismatch(f"inconsistent feature lengths {sorted(dims)}")
    return np.stack([s.features.values for s in samples]), np.array([s.label for s in samples])


def train(samples: Sequence[LabeledSample], hp: Hyperparameters = Hyperparameters(), seed: int = 0) -> TreeEnsembleModel:
    if len(samples) < 2:
        raise SingleClassDataset("need at least two samples")
    X, y = _stack(samples)
    return fit_arrays(X, y, hp, seed)


def predict(model: TreeEnsembleModel, features: FeatureVector | np.ndarray) -> tuple[int, float]:
    values = features.values if isinstance(features, FeatureVector) else np.asarray(features)
    score = float(model.decision(values)[0])
    return (MALICIOUS if score > 0.5 else BENIGN), score


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    tp: int
    tn: int
    fp: int
    fn: int
    scores: list[float] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    sample_ids: list[str] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def false_positive_rate(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else 0.0

    @property
    def false_negative_rate(self) -> float:
        return self.fn / (self.fn + self.tp) if self.fn + self.tp else 0.0

    @classmethod
    def from_predictions(cls, labels, predicted, scores=(), ids=(), seconds=0.0) -> "EvalReport":
        labels = np.asarray(labels)
        predicted = np.asarray(predicted)
        tp = int(((labels == 1) & (predicted == 1)).sum())
        tn = int(((labels == 0) & (predicted == 0)).sum())
        fp = int(((labels == 0) & (predicted == 1)).sum())
        fn = int(((labels == 1) & (predicted == 0)).sum())
        return cls(tp, tn, fp, fn, [float(s) for s in scores], [int(l) for l in labels], list(ids), seconds)

    def sweep(self, thresholds: Iterable[float]) -> list[dict]:
        """Accuracy / FPR / FNR when classifying with ``score > t``."""
        s, y = np.asarray(self.scores), np.asarray(self.labels)
        out = []
        for t in thresholds:
            r = EvalReport.from_predictions(y, (s > t).astype(int))
            out.append({"threshold": float(t), "accuracy": r.accuracy, "fpr": r.false_positive_rate,
                        "fnr": r.false_negative_rate})
        return out

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "false_positive_rate": self.false_positive_rate,
                "false_negative_rate": self.false_negative_rate, "tp": self.tp, "tn": self.tn,
                "fp": self.fp, "fn": self.fn, "seconds": self.seconds}

    def to_json(self) -> str:
        return json.dumps({**self.summary(), "scores": self.scores, "labels": self.labels,
                           "sample_ids": self.sample_ids}, indent=1)

    def csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        s = self.summary()
        w.writerow(list(s))
        w.writerow(list(s.values()))
        return buf.getvalue()


def evaluate_arrays(model: TreeEnsembleModel, X: np.ndarray, y: np.ndarray, ids: Sequence[str] = ()) -> EvalReport:
    if len(y) == 0:
        raise EmptyEvalSet("nothing to evaluate")
    t0 = time.perf_counter()
    scores = model.decision(X)
    predicted = (scores > 0.5).astype(int)
    return EvalReport.from_predictions(y, predicted, scores, ids, time.perf_counter() - t0)


def evaluate(model: TreeEnsembleModel, samples: Sequence[LabeledSample]) -> EvalReport:
    if not samples:
        raise EmptyEvalSet("nothing to evaluate")
    X, y = _stack(samples)
    return evaluate_arrays(model, X, y, [s.sample_id for s in samples])

"""FastICA-style reduction of feature vectors (logcosh contrast, symmetric decorrelation)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import container
from .markov import FeatureVector, split_schema

log = logging.getLogger(__name__)

MAGIC = b"OIC1"
DEFAULT_COMPONENTS = 34
TOL = 1e-4
MAX_ITER = 200


class InsufficientSamples(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ICAModel:
    n_components: int
    mean: np.ndarray
    whitening: np.ndarray  # components x dim
    unmixing: np.ndarray  # components x components
    seed: int = 0
    converged: bool = field(default=True, compare=False)
    n_iter: int = field(default=0, compare=False)

    @property
    def fitted_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def components(self) -> np.ndarray:
        """Combined projection ``unmixing @ whitening``."""
        return self.unmixing @ self.whitening

    def save(self, path) -> None:
        container.save(path, MAGIC, {"n_components": self.n_components, "seed": self.seed},
                       {"mean": self.mean, "whitening": self.whitening, "unmixing": self.unmixing})

    @classmethod
    def load(cls, path) -> "ICAModel":
        meta, a = container.load(path, MAGIC)
        return cls(meta["n_components"], a["mean"], a["whitening"], a["unmixing"], meta["seed"])


def _sym_decorrelation(W: np.ndarray) -> np.ndarray:
    # W <- (W W^T)^{-1/2} W
    s, u = np.linalg.eigh(W @ W.T)
    s = np.clip(s, np.finfo(W.dtype).tiny, None)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ W


def fit(samples: np.ndarray, n_components: int = DEFAULT_COMPONENTS, seed: int = 0,
        tol: float = TOL, max_iter: int = MAX_ITER) -> ICAModel:
    """Center, whiten onto the top principal directions, then run fixed-point ICA.

    If the centered data has rank below ``n_components`` the model is reduced
    to the available rank (with a warning).
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("samples must be a 2-D array")
    n, d = X.shape
    if n_components < 1:
        raise ValueError("n_components must be positive")
    if n < n_components or n < 2:
        raise InsufficientSamples(f"{n} samples for {n_components} components")
    if n_components > d:
        raise DimensionMismatch(f"n_components {n_components} exceeds dimension {d}")

    mean = X.mean(axis=0)
    Xc = X - mean
    # covariance eigenvectors via the SVD of the data, avoiding a d x d matrix
    _, sv, vt = np.linalg.svd(Xc, full_matrices=False)
    eigvals = sv**2 / n
    rank = int((eigvals > eigvals[0] * 1e-10).sum()) if eigvals.size and eigvals[0] > 0 else 0
    k = n_components
    if rank < k:
        log.warning("covariance rank %d < %d components; reducing", rank, k)
        k = rank
        if k == 0:
            raise InsufficientSamples("training samples have zero variance")
    K = vt[:k] / np.sqrt(eigvals[:k])[:, None]
    Z = Xc @ K.T  # n x k, identity covariance

    rng = np.random.default_rng(seed)
    W = _sym_decorrelation(rng.standard_normal((k, k)))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Y = Z @ W.T
        g = np.tanh(Y)
        g_prime = 1.0 - g**2
        W_new = _sym_decorrelation((g.T @ Z) / n - g_prime.mean(axis=0)[:, None] * W)
        lim = np.max(np.abs(np.abs(np.einsum("ij,ij->i", W_new, W)) - 1.0))
        W = W_new
        if lim < tol:
            converged = True
            break
    if not converged:
        log.warning("ICA did not converge after %d iterations; keeping last iterate", max_iter)
    return ICAModel(k, mean, K, W, seed, converged, it)


def transform_matrix(model: ICAModel, samples: np.ndarray) -> np.ndarray:
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.fitted_dim:
        raise DimensionMismatch(f"expected dimension {model.fitted_dim}, got {X.shape[-1]}")
    return (X - model.mean) @ model.whitening.T @ model.unmixing.T


def transform(model: ICAModel, sample: FeatureVector | np.ndarray) -> FeatureVector:
    if isinstance(sample, FeatureVector):
        _, mode = split_schema(sample.schema)
        values = sample.values
    else:
        mode, values = "linear", np.asarray(sample, dtype=np.float64)
    out = transform_matrix(model, values[None, :])[0]
    return FeatureVector(f"ICA-MM:{mode}", out)

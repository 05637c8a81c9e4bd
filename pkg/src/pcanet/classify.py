"""Feature post-processing and classifiers used in the evaluation pipelines."""

from dataclasses import dataclass
import warnings

import numpy as np
from scipy import sparse

from .errors import InvalidInputError, InvalidStateError
from .linalg import sym_eig


class ReducedRankWarning(UserWarning):
    pass


def sqrt_transform(f):
    """Elementwise square root of a non-negative feature vector or matrix."""
    if sparse.issparse(f):
        if f.nnz and f.data.min() < 0:
            raise InvalidInputError("sqrt transform needs non-negative features")
        return f.sqrt()
    f = np.asarray(f, dtype=np.float64)
    if f.size and f.min() < 0:
        raise InvalidInputError("sqrt transform needs non-negative features")
    return np.sqrt(f)


# --------------------------------------------------------------------------
# (whitening) PCA


@dataclass
class WpcaProjector:
    mean: np.ndarray
    basis: np.ndarray  # (dim, d_out), orthonormal columns
    weights: np.ndarray  # (d_out,), 1/sqrt(eigenvalue), or ones without whitening
    eigenvalues: np.ndarray
    clamp_tol: float = 1e-8

    @property
    def d_out(self):
        return self.basis.shape[1]

    def transform(self, features):
        if sparse.issparse(features):
            proj = np.asarray(features @ self.basis) - self.mean @ self.basis
        else:
            proj = (np.asarray(features, dtype=np.float64) - self.mean) @ self.basis
        return proj * self.weights


def fit_wpca(gallery_features, d_out, clamp_tol=1e-8, whiten=True):
    """Fit a (whitening) PCA projection on gallery features.

    The covariance is the unbiased sample covariance.  When there are fewer
    samples than dimensions the eigenproblem is solved on the ``G x G`` Gram
    matrix.  Directions with eigenvalue ``<= clamp_tol * max`` are dropped;
    if that leaves fewer than ``d_out`` a ``ReducedRankWarning`` is issued.
    """
    x = gallery_features.toarray() if sparse.issparse(gallery_features) else gallery_features
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInputError("need at least two gallery feature vectors")
    n_samp, dim = x.shape
    if d_out < 1 or d_out > min(n_samp - 1, dim):
        raise InvalidInputError(f"d_out must lie in [1, {min(n_samp - 1, dim)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    if n_samp < dim:
        gram_vals, u = sym_eig(xc @ xc.T)
        values = gram_vals / (n_samp - 1)
        peak = values[0]
        keep = np.flatnonzero(values > clamp_tol * peak) if peak > 0 else np.array([], int)
        keep = keep[:d_out]
        basis = xc.T @ u[:, keep] / np.sqrt(gram_vals[keep])
    else:
        values, vecs = sym_eig(xc.T @ xc / (n_samp - 1))
        peak = values[0]
        keep = np.flatnonzero(values > clamp_tol * peak) if peak > 0 else np.array([], int)
        keep = keep[:d_out]
        basis = vecs[:, keep]
    if len(keep) == 0:
        raise InvalidInputError("gallery features have zero covariance")
    if len(keep) < d_out:
        warnings.warn(f"only {len(keep)} usable directions; projecting to {len(keep)} dims",
                      ReducedRankWarning, stacklevel=2)
    lam = values[keep]
    weights = 1.0 / np.sqrt(lam) if whiten else np.ones(len(keep))
    return WpcaProjector(mean, basis, weights, lam, clamp_tol)


# --------------------------------------------------------------------------
# distances and nearest neighbour


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch {a.shape} vs {b.shape}")
    return a, b


def chi_square_dist(a, b):
    """sum_j (a_j - b_j)^2 / (a_j + b_j); terms with a_j + b_j = 0 count as 0."""
    a, b = _pair(a, b)
    if (a.size and a.min() < 0) or (b.size and b.min() < 0):
        raise InvalidInputError("chi-square distance needs non-negative inputs")
    den = a + b
    num = (a - b) ** 2
    return float(np.sum(np.divide(num, den, out=np.zeros_like(num), where=den > 0)))


def cosine_dist(a, b):
    """1 - cos(a, b); a zero-norm input gives distance 1."""
    a, b = _pair(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(1.0 - (a @ b) / (na * nb))


def chi_square_to_all(gallery, probe, row_sums=None):
    """Chi-square distance from one probe to every gallery row.

    Uses ``(g-p)^2/(g+p) = g + p - 4gp/(g+p)``: the cross term is nonzero only
    where both vectors are, so histogram features (mostly zeros) are cheap.
    ``gallery`` may be dense or a scipy sparse matrix (CSC is fastest).
    """
    probe = np.asarray(probe, dtype=np.float64)
    is_sparse = sparse.issparse(gallery)
    g_min = (gallery.data.min(initial=0.0) if is_sparse else gallery.min(initial=0.0))
    if probe.min(initial=0.0) < 0 or g_min < 0:
        raise InvalidInputError("chi-square distance needs non-negative inputs")
    if row_sums is None:
        row_sums = np.asarray(gallery.sum(axis=1)).ravel()
    nz = np.flatnonzero(probe)
    p = probe[nz]
    if is_sparse:
        sub = sparse.csc_matrix(gallery)[:, nz]
        pp = np.repeat(p, np.diff(sub.indptr))
        g = sub.data
        cross = np.bincount(sub.indices, weights=g * pp / (g + pp), minlength=gallery.shape[0])
    else:
        g = gallery[:, nz]
        cross = (g * p / (g + p)).sum(axis=1)
    return np.maximum(row_sums + p.sum() - 4.0 * cross, 0.0)


def cosine_to_all(gallery, probe):
    probe = np.asarray(probe, dtype=np.float64)
    norms = np.linalg.norm(gallery, axis=1) * np.linalg.norm(probe)
    dots = gallery @ probe
    out = np.ones(len(gallery))
    ok = norms > 0
    out[ok] = 1.0 - dots[ok] / norms[ok]
    return out


_METRICS = {"chi-square": chi_square_to_all, "cosine": cosine_to_all}


class GalleryIndex:
    """Exhaustive nearest-neighbour search over enrolled feature vectors."""

    def __init__(self, features=None, labels=None, metric="chi-square"):
        if metric not in _METRICS:
            raise InvalidInputError(f"unknown metric {metric!r}")
        self.metric = metric
        self._features = []
        self._labels = []
        if features is not None:
            for f, lab in zip(features, labels):
                self.add(f, lab)

    def __len__(self):
        return len(self._labels)

    def add(self, feature, label):
        feature = np.asarray(feature, dtype=np.float64).ravel()
        if self._features and feature.shape != self._features[0].shape:
            raise InvalidInputError("gallery features must share one dimension")
        self._features.append(feature)
        self._labels.append(label)
        self._matrix = None
        self._row_sums = None
        self._csc = None

    @property
    def matrix(self):
        if getattr(self, "_matrix", None) is None:
            self._matrix = np.stack(self._features)
        return self._matrix

    @property
    def labels(self):
        return list(self._labels)

    def distances(self, probe):
        if not self._labels:
            raise InvalidStateError("gallery is empty")
        probe = np.asarray(probe, dtype=np.float64).ravel()
        if probe.shape != self._features[0].shape:
            raise InvalidInputError("probe dimension differs from gallery")
        if self.metric == "chi-square":
            if getattr(self, "_csc", None) is None:
                self._csc = sparse.csc_matrix(self.matrix)
                self._row_sums = self.matrix.sum(axis=1)
            return chi_square_to_all(self._csc, probe, self._row_sums)
        return cosine_to_all(self.matrix, probe)


def nn_classify(index, probe):
    """Label of the closest gallery entry; ties go to the earliest entry."""
    d = index.distances(probe)
    return index._labels[int(np.argmin(d))]


# --------------------------------------------------------------------------
# linear SVM


@dataclass
class LinearSvmModel:
    classes: np.ndarray
    weights: np.ndarray  # (n_classes, dim)
    biases: np.ndarray  # (n_classes,)
    C: float

    def decision_function(self, features):
        if sparse.issparse(features):
            scores = np.asarray(features @ self.weights.T)
        else:
            features = np.asarray(features, dtype=np.float64)
            scores = np.atleast_2d(features) @ self.weights.T
        return scores + self.biases

    def to_bytes(self):
        return (self.classes.astype("<i8").tobytes() + self.weights.astype("<f8").tobytes()
                + self.biases.astype("<f8").tobytes())


def svm_train(features, labels, C=1.0, epochs=20, seed=0):
    """One-vs-rest L2-regularized hinge-loss SVMs.

    Each binary problem minimizes ``|w|^2 / 2 + C * sum(hinge)`` by stochastic
    dual coordinate ascent: every epoch visits the samples in one seeded
    random permutation and updates that sample's dual variable for all
    classes at once.  The bias is an extra (regularized) weight on a constant
    feature of 1.  Given ``seed`` the result is deterministic.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise InvalidInputError("SVM training needs at least two classes")
    if not C > 0:
        raise InvalidInputError("C must be positive")
    is_sparse = sparse.issparse(features)
    x = features.tocsr().astype(np.float64) if is_sparse else np.asarray(features, dtype=np.float64)
    n_samp, dim = x.shape
    if len(labels) != n_samp:
        raise InvalidInputError("one label per feature vector required")
    targets = np.where(labels[:, None] == classes[None, :], 1.0, -1.0)
    if is_sparse:
        indptr, indices, data = x.indptr, x.indices, x.data
        sq_norms = np.asarray(x.multiply(x).sum(axis=1)).ravel() + 1.0
    else:
        sq_norms = np.einsum("ij,ij->i", x, x) + 1.0
    w = np.zeros((dim, len(classes)))
    b = np.zeros(len(classes))
    alpha = np.zeros((n_samp, len(classes)))
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for i in rng.permutation(n_samp):
            if is_sparse:
                idx = indices[indptr[i]:indptr[i + 1]]
                val = data[indptr[i]:indptr[i + 1]]
                scores = val @ w[idx] + b
            else:
                row = x[i]
                scores = row @ w + b
            y = targets[i]
            grad = y * scores - 1.0
            new = np.clip(alpha[i] - grad / sq_norms[i], 0.0, C)
            delta = (new - alpha[i]) * y
            moved = np.flatnonzero(delta)
            if len(moved) == 0:
                continue
            alpha[i] = new
            if is_sparse:
                w[np.ix_(idx, moved)] += np.outer(val, delta[moved])
            else:
                w[:, moved] += np.outer(row, delta[moved])
            b[moved] += delta[moved]
    return LinearSvmModel(classes, w.T.copy(), b, float(C))


def svm_predict(model, features):
    """Predicted label(s); ties go to the lowest class id."""
    scores = model.decision_function(features)
    pred = model.classes[np.argmax(scores, axis=1)]
    single = not sparse.issparse(features) and np.asarray(features).ndim == 1
    return pred[0] if single else pred

"""Stage filter banks: PCA, LDA, random Gaussian and multichannel PCA.

Patch scatter matrices are accumulated chunk by chunk over images in a fixed
order, so the learned filters are bit-identical however many worker threads
compute the partial sums.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import warnings

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, RankDeficiencyError
from .imaging import patch_rows, write_pnm
from .linalg import sym_eig

# images per partial scatter sum; part of the reduction tree, so it must not
# depend on the worker count
SCATTER_CHUNK = 64
RANK_TOL = 1e-10


class DegenerateFiltersWarning(UserWarning):
    pass


@dataclass
class FilterBank:
    """``L`` filters for one stage.

    ``filters`` has shape ``(L, k1, k2)`` for grayscale input and
    ``(L, channels, k1, k2)`` otherwise.
    """

    filters: np.ndarray
    provenance: str = "pca"
    seed: int | None = None
    eigenvalues: np.ndarray | None = field(default=None, repr=False)
    degenerate: bool = False

    def __post_init__(self):
        self.filters = np.asarray(self.filters, dtype=np.float64)
        if self.filters.ndim not in (3, 4):
            raise InvalidInputError(f"bad filter array shape {self.filters.shape}")
        if self.provenance not in ("pca", "lda", "random"):
            raise InvalidConfigError(f"unknown provenance {self.provenance!r}")

    @property
    def count(self):
        return self.filters.shape[0]

    @property
    def channels(self):
        return 1 if self.filters.ndim == 3 else self.filters.shape[1]

    @property
    def k1(self):
        return self.filters.shape[-2]

    @property
    def k2(self):
        return self.filters.shape[-1]

    def as_matrix(self):
        """Filters as rows of an ``(L, channels*k1*k2)`` matrix."""
        return self.filters.reshape(self.count, -1)


def _gather(maps, k1, k2):
    # (b, m, n) or (b, C, m, n) -> (b*m*n, C*k1*k2), channel blocks stacked
    if maps.ndim == 3:
        return patch_rows(maps, k1, k2).reshape(-1, k1 * k2)
    b, ch, m, n = maps.shape
    rows = patch_rows(maps.reshape(b * ch, m, n), k1, k2).reshape(b, ch, m * n, k1 * k2)
    return np.moveaxis(rows, 1, 2).reshape(b * m * n, ch * k1 * k2)


def _chunks(total, size):
    return [(lo, min(lo + size, total)) for lo in range(0, total, size)]


def reduce_in_order(fn, chunks, workers=1):
    """Map ``fn`` over ``chunks`` (threads if ``workers > 1``) and left-fold the sum."""
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total


def patch_scatter(maps, k1, k2, workers=1):
    """``X @ X.T`` for the mean-removed zero-padded patches of all maps.

    ``maps`` is ``(N, m, n)`` or ``(N, C, m, n)``; for multichannel maps each
    channel's patch is mean-removed on its own and the channel blocks are
    stacked, matching a ``(C*k1*k2)``-dimensional patch vector.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim not in (3, 4) or maps.shape[0] == 0:
        raise InvalidInputError(f"expected a non-empty stack of maps, got {maps.shape}")

    def part(bounds):
        rows = _gather(maps[bounds[0]:bounds[1]], k1, k2)
        return rows.T @ rows

    return reduce_in_order(part, _chunks(maps.shape[0], SCATTER_CHUNK), workers)


def _top_eigvectors(scatter, n_filters):
    values, vectors = sym_eig(scatter)
    peak = values[0] if len(values) else 0.0
    rank = int(np.sum(values > RANK_TOL * peak)) if peak > 0 else 0
    if rank < n_filters:
        raise RankDeficiencyError(
            f"patch covariance has rank {rank}; at most {rank} filters can be learned, "
            f"{n_filters} requested", achievable=rank)
    return values[:n_filters], vectors[:, :n_filters]


def _check_count(n_filters, dim):
    if n_filters < 1:
        raise InvalidConfigError("need at least one filter")
    if n_filters > dim:
        raise InvalidConfigError(f"{n_filters} filters exceed patch dimension {dim}")


def pca_bank_from_scatter(scatter, k1, k2, n_filters, channels=1):
    """Top-``n_filters`` eigenvectors of a patch scatter, reshaped to grids."""
    dim = channels * k1 * k2
    scatter = np.asarray(scatter, dtype=np.float64)
    if scatter.shape != (dim, dim):
        raise InvalidInputError(f"scatter shape {scatter.shape} does not match {dim}")
    _check_count(n_filters, dim)
    values, vectors = _top_eigvectors(scatter, n_filters)
    shape = (n_filters, k1, k2) if channels == 1 else (n_filters, channels, k1, k2)
    return FilterBank(vectors.T.reshape(shape).copy(), "pca", eigenvalues=values)


def learn_pca_bank(patches, k1, k2, n_filters):
    """PCA filters from a pooled patch matrix with one patch per column."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] != k1 * k2:
        raise InvalidInputError(f"expected ({k1 * k2}, count) patches, got {patches.shape}")
    return pca_bank_from_scatter(patches @ patches.T, k1, k2, n_filters)


def learn_multichannel_pca_bank(patches, k1, k2, n_filters, channels=3):
    """PCA filters from channel-stacked patches ``[X_r; X_g; X_b]``.

    Each resulting filter has shape ``(channels, k1, k2)``; applying it sums
    the per-channel cross-correlations.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] != channels * k1 * k2:
        raise InvalidInputError(
            f"expected ({channels * k1 * k2}, count) stacked patches, got {patches.shape}")
    return pca_bank_from_scatter(patches @ patches.T, k1, k2, n_filters, channels)


def make_random_bank(k1, k2, channels, n_filters, seed):
    """i.i.d. standard normal filter entries from ``default_rng(seed)``."""
    if n_filters < 1 or k1 < 1 or k2 < 1:
        raise InvalidConfigError("filter bank dimensions must be positive")
    rng = np.random.default_rng(seed)
    shape = (n_filters, k1, k2) if channels == 1 else (n_filters, channels, k1, k2)
    return FilterBank(rng.standard_normal(shape), "random", seed=seed)


# --------------------------------------------------------------------------
# LDA


class ClassScatter:
    """Streaming accumulator for per-class patch statistics.

    Each sample is the ``(m*n, dim)`` mean-removed patch matrix of one image
    (transposed relative to the usual column layout).  Patches inherit the
    class of the image they came from.
    """

    def __init__(self):
        self.counts = {}
        self.sums = {}
        self.scatters = {}

    def add(self, rows, label):
        rows = np.asarray(rows, dtype=np.float64)
        label = int(label)
        if label in self.counts:
            if rows.shape != self.sums[label].shape:
                raise InvalidInputError("all images must yield the same patch matrix shape")
            self.counts[label] += 1
            self.sums[label] += rows
            self.scatters[label] += rows.T @ rows
        else:
            if self.sums and rows.shape != next(iter(self.sums.values())).shape:
                raise InvalidInputError("all images must yield the same patch matrix shape")
            self.counts[label] = 1
            self.sums[label] = rows.copy()
            self.scatters[label] = rows.T @ rows

    def add_batch(self, rows, labels):
        for r, lab in zip(rows, labels):
            self.add(r, lab)

    def merge(self, other):
        for label in other.counts:
            if label in self.counts:
                self.counts[label] += other.counts[label]
                self.sums[label] += other.sums[label]
                self.scatters[label] += other.scatters[label]
            else:
                self.counts[label] = other.counts[label]
                self.sums[label] = other.sums[label].copy()
                self.scatters[label] = other.scatters[label].copy()
        return self

    @property
    def classes(self):
        return sorted(self.counts)

    def class_means(self):
        """Per-class mean patch matrices, ``(m*n, dim)`` each."""
        return {c: self.sums[c] / self.counts[c] for c in self.classes}

    def within(self):
        """Sum over classes of the per-class patch covariance."""
        means = self.class_means()
        dim = next(iter(means.values())).shape[1]
        total = np.zeros((dim, dim))
        for c in self.classes:
            g = means[c]
            total += (self.scatters[c] - self.counts[c] * (g.T @ g)) / self.counts[c]
        return 0.5 * (total + total.T)

    def between(self):
        """Scatter of the class means around their average, divided by ``C``."""
        means = self.class_means()
        grand = sum(means.values()) / len(means)
        dim = grand.shape[1]
        total = np.zeros((dim, dim))
        for c in self.classes:
            d = means[c] - grand
            total += d.T @ d
        total /= len(means)
        return 0.5 * (total + total.T)


def lda_directions(within, between, rel_tol=RANK_TOL):
    """Eigenpairs of ``pinv(within) @ between`` with non-zero eigenvalue.

    Solved in the whitened range of ``within`` so the returned vectors are
    exact eigenvectors of the non-symmetric product.  When ``within`` is
    identically zero every direction has an unbounded ratio and the leading
    eigenvectors of ``between`` are returned instead.
    Vectors are unit-norm columns but not mutually orthogonal in general.
    """
    w_vals, w_vecs = sym_eig(within)
    peak = w_vals[0]
    keep = w_vals > rel_tol * peak if peak > 0 else np.zeros(len(w_vals), bool)
    if not keep.any():
        values, vectors = sym_eig(between)
    else:
        whiten = w_vecs[:, keep] / np.sqrt(w_vals[keep])
        values, q = sym_eig(whiten.T @ between @ whiten)
        vectors = whiten @ q
        vectors /= np.linalg.norm(vectors, axis=0)
    b_peak = max(abs(values[0]), 0.0) if len(values) else 0.0
    nz = values > rel_tol * b_peak if b_peak > 0 else np.zeros(len(values), bool)
    return values[nz], vectors[:, nz]


def _orthonormal_completion(vectors, dim, total):
    # Gram-Schmidt over the given vectors, topped up with unit vectors e_0, e_1, ...
    basis = []
    candidates = [vectors[:, j] for j in range(vectors.shape[1])] + list(np.eye(dim))
    for v in candidates:
        if len(basis) == total:
            break
        w = v.astype(np.float64).copy()
        for _ in range(2):
            for b in basis:
                w -= (b @ w) * b
        norm = np.linalg.norm(w)
        if norm > 1e-8 * max(np.linalg.norm(v), 1e-300):
            basis.append(w / norm)
    return np.stack(basis, axis=1)


def lda_bank_from_scatter(scatter, k1, k2, n_filters, channels=1):
    """LDA filters from accumulated class statistics."""
    if len(scatter.classes) < 2:
        raise InvalidInputError("LDA filter learning needs at least two classes")
    dim = channels * k1 * k2
    _check_count(n_filters, dim)
    between = scatter.between()
    values, vectors = lda_directions(scatter.within(), between)
    degenerate = vectors.shape[1] < n_filters
    if degenerate:
        warnings.warn(
            f"only {vectors.shape[1]} discriminant directions with non-zero between-class "
            f"scatter; completing the bank to {n_filters} with arbitrary orthonormal vectors",
            DegenerateFiltersWarning, stacklevel=2)
    basis = _orthonormal_completion(vectors[:, :n_filters], dim, n_filters)
    eig = np.zeros(n_filters)
    eig[:min(n_filters, len(values))] = values[:n_filters]
    shape = (n_filters, k1, k2) if channels == 1 else (n_filters, channels, k1, k2)
    return FilterBank(basis.T.reshape(shape).copy(), "lda", eigenvalues=eig, degenerate=degenerate)


def learn_lda_bank(per_image_patches, k1, k2, n_filters):
    """LDA filters from ``(patch_matrix, label)`` pairs, one pair per image.

    Each patch matrix is ``(k1*k2, m*n)`` as produced by ``extract_patches``.
    """
    scatter = ClassScatter()
    for patches, label in per_image_patches:
        patches = np.asarray(patches, dtype=np.float64)
        if patches.shape[0] != k1 * k2:
            raise InvalidInputError(f"patch dimension {patches.shape[0]} != {k1 * k2}")
        scatter.add(patches.T, label)
    return lda_bank_from_scatter(scatter, k1, k2, n_filters)


# --------------------------------------------------------------------------
# visualization


def _normalize(tile):
    lo, hi = tile.min(), tile.max()
    return np.zeros_like(tile) if hi == lo else (tile - lo) / (hi - lo)


def filter_grid(bank, gap=1):
    """Tile a bank's filters side by side, each min-max normalized to [0, 1].

    Returns a ``(k1, width)`` array, or ``(3, k1, width)`` for RGB filters.
    """
    tiles = bank.filters if bank.channels > 1 else bank.filters[:, None]
    ch = tiles.shape[1]
    width = bank.count * bank.k2 + (bank.count - 1) * gap
    out = np.zeros((ch, bank.k1, width))
    for i, tile in enumerate(tiles):
        c0 = i * (bank.k2 + gap)
        out[:, :, c0:c0 + bank.k2] = _normalize(tile)
    return out[0] if ch == 1 else out


def export_filters(bank, path):
    write_pnm(path, filter_grid(bank))

"""Cascaded filter-bank networks: training, binary hashing, block histograms, SPP.

A network has one or two filter stages.  For two stages, every stage-1
response map is filtered by all stage-2 filters, the ``L2`` outputs are
binarized (strictly positive -> 1) and packed into one integer code map with
bit weight ``2**l`` for the ``l``-th filter (0-based), and each code map is
summarized by histograms over a grid of blocks.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import struct
import time
import zlib
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .errors import (
    BadMagicError, ChecksumError, InvalidConfigError, InvalidInputError,
    TruncatedFileError, UnsupportedVersionError,
)
from .filters import (
    SCATTER_CHUNK, ClassScatter, FilterBank, _gather, lda_bank_from_scatter,
    make_random_bank, pca_bank_from_scatter, reduce_in_order,
)
from .imaging import as_image, correlate_stack

MODEL_MAGIC = b"PCNT"
MODEL_VERSION = 1
MAX_CODE_BITS = 31

# float64 elements of stage-2 responses held at once during extraction
_RESPONSE_BUDGET = 4 * 2**20


@dataclass(frozen=True)
class StageSpec:
    k1: int
    k2: int
    n_filters: int
    provenance: str = "pca"
    seed: int | None = None

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1 or self.n_filters < 1:
            raise InvalidConfigError("filter size and count must be positive")
        if self.provenance not in ("pca", "lda", "random"):
            raise InvalidConfigError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "random" and self.seed is None:
            raise InvalidConfigError("random filter banks need a seed")


@dataclass(frozen=True)
class NetworkConfig:
    """Network topology and output-layer geometry.

    ``code_bits`` only applies to single-stage networks: it sets how many
    consecutive filter responses are packed into one code map (default: all
    of them).
    """

    stages: tuple
    block_h: int
    block_w: int
    overlap_ratio: float = 0.0
    spp_levels: tuple | None = None
    channels: int = 1
    code_bits: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.spp_levels is not None:
            object.__setattr__(self, "spp_levels", tuple(int(g) for g in self.spp_levels))
            if not self.spp_levels or min(self.spp_levels) < 1:
                raise InvalidConfigError("SPP levels must be positive grid sizes")
        if not 1 <= len(self.stages) <= 2:
            raise InvalidConfigError("networks have one or two stages")
        if self.block_h < 1 or self.block_w < 1:
            raise InvalidConfigError("block dimensions must be positive")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise InvalidConfigError("overlap ratio must lie in [0, 1)")
        if self.channels not in (1, 3):
            raise InvalidConfigError("channels must be 1 or 3")
        if len(self.stages) == 2 and self.code_bits not in (None, self.stages[1].n_filters):
            raise InvalidConfigError("code_bits is fixed to L2 for two-stage networks")
        if self.bits > MAX_CODE_BITS:
            raise InvalidConfigError(f"{self.bits} code bits exceed the limit of {MAX_CODE_BITS}")
        if len(self.stages) == 1 and self.stages[0].n_filters % self.bits:
            raise InvalidConfigError("code_bits must divide the number of filters")

    @classmethod
    def create(cls, k=7, filters=(8, 8), block=(7, 7), overlap_ratio=0.0,
               provenance="pca", seed=None, **kw):
        """Shorthand: the same square filter size and provenance at every stage."""
        seeds = [None if seed is None else seed + i for i in range(len(filters))]
        stages = tuple(StageSpec(k, k, n, provenance, s) for n, s in zip(filters, seeds))
        return cls(stages, block[0], block[1], overlap_ratio, **kw)

    @property
    def bits(self):
        if len(self.stages) == 2:
            return self.stages[1].n_filters
        return self.code_bits or self.stages[0].n_filters

    @property
    def n_code_maps(self):
        if len(self.stages) == 2:
            return self.stages[0].n_filters
        return self.stages[0].n_filters // self.bits

    @property
    def bins(self):
        return 2 ** self.bits

    def stride(self):
        return (max(1, self.block_h - int(np.floor(self.overlap_ratio * self.block_h))),
                max(1, self.block_w - int(np.floor(self.overlap_ratio * self.block_w))))

    def block_origins(self, m, n):
        """Top-left corners of all full blocks on an ``m x n`` map, row-major."""
        if self.block_h > m or self.block_w > n:
            raise InvalidConfigError(f"block {self.block_h}x{self.block_w} exceeds map {m}x{n}")
        sh, sw = self.stride()
        return (np.arange(0, m - self.block_h + 1, sh), np.arange(0, n - self.block_w + 1, sw))

    def n_blocks(self, m, n):
        rows, cols = self.block_origins(m, n)
        return len(rows) * len(cols)

    def feature_dim(self, m, n):
        per_cell = self.n_code_maps * self.bins
        if self.spp_levels:
            return per_cell * sum(g * g for g in self.spp_levels)
        return per_cell * self.n_blocks(m, n)


def single_stage_equivalent_config(config):
    """One stage with ``L1*L2`` filters covering the two-stage receptive field.

    Responses are hashed ``L2`` at a time, so the feature dimension matches the
    two-stage network.
    """
    if len(config.stages) == 1:
        return config
    s1, s2 = config.stages
    stage = StageSpec(s1.k1 + s2.k1 - 1, s1.k2 + s2.k2 - 1, s1.n_filters * s2.n_filters,
                      s1.provenance, s1.seed)
    return replace(config, stages=(stage,), code_bits=s2.n_filters)


@dataclass
class NetworkModel:
    config: NetworkConfig
    banks: list
    image_shape: tuple | None = None
    # diagnostics from training; not persisted
    scatters: list = field(default_factory=list, repr=False, compare=False)
    timings: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.banks) != len(self.config.stages):
            raise InvalidConfigError("one filter bank per stage required")
        for i, (bank, spec) in enumerate(zip(self.banks, self.config.stages)):
            want_ch = self.config.channels if i == 0 else 1
            if (bank.count, bank.k1, bank.k2, bank.channels) != (spec.n_filters, spec.k1, spec.k2, want_ch):
                raise InvalidConfigError(f"stage {i + 1} bank does not match its spec")
            bank.filters.setflags(write=False)


# --------------------------------------------------------------------------
# training


def _stack_images(images, channels):
    try:
        arr = np.asarray(images, dtype=np.float64)
    except ValueError as exc:
        raise InvalidInputError("images must share one shape") from exc
    want = 3 if channels == 1 else 4
    if arr.ndim != want or arr.shape[0] == 0:
        raise InvalidInputError(
            f"expected a non-empty stack of {'grayscale' if channels == 1 else 'RGB'} images, "
            f"got shape {arr.shape}")
    if channels == 3 and arr.shape[1] != 3:
        raise InvalidInputError("RGB stacks must be (N, 3, m, n)")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("images contain non-finite samples")
    return arr


def _learn_bank(spec, maps_fn, n_items, labels, channels, workers):
    """Learn one stage. ``maps_fn(lo, hi)`` yields ``(b, per, [C,] m, n)`` input maps."""
    if spec.provenance == "random":
        return make_random_bank(spec.k1, spec.k2, channels, spec.n_filters, spec.seed), None
    chunks = [(lo, min(lo + SCATTER_CHUNK, n_items)) for lo in range(0, n_items, SCATTER_CHUNK)]
    if spec.provenance == "pca":
        def part(bounds):
            maps = maps_fn(*bounds)
            rows = _gather(maps.reshape((-1,) + maps.shape[2:]), spec.k1, spec.k2)
            return rows.T @ rows

        scatter = reduce_in_order(part, chunks, workers)
        return pca_bank_from_scatter(scatter, spec.k1, spec.k2, spec.n_filters, channels), scatter

    if labels is None:
        raise InvalidInputError("LDA filter learning requires class labels")

    def part(bounds):
        lo, hi = bounds
        maps = maps_fn(lo, hi)
        acc = ClassScatter()
        for i in range(hi - lo):
            for single in maps[i]:
                acc.add(_gather(single[None], spec.k1, spec.k2), labels[lo + i])
        return acc

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(part, chunks))
    else:
        parts = [part(c) for c in chunks]
    acc = parts[0]
    for p in parts[1:]:
        acc.merge(p)
    return lda_bank_from_scatter(acc, spec.k1, spec.k2, spec.n_filters, channels), None


def train(images, config, labels=None, workers=1):
    """Learn every stage's filter bank from a stack of training images.

    ``images`` is an ``(N, m, n)`` / ``(N, 3, m, n)`` array or a
    ``LabeledDataset`` (whose labels are then used).  Labels are needed only
    for LDA stages.
    """
    if hasattr(images, "images") and hasattr(images, "labels"):
        labels = images.labels if labels is None else labels
        images = images.images
    imgs = _stack_images(images, config.channels)
    n_items = imgs.shape[0]
    if labels is not None:
        labels = np.asarray(labels)
        if len(labels) != n_items:
            raise InvalidInputError("one label per image required")
    m, n = imgs.shape[-2:]
    config.block_origins(m, n)

    banks, scatters, timings = [], [], {}
    t0 = time.perf_counter()
    s1 = config.stages[0]
    bank1, sc = _learn_bank(s1, lambda lo, hi: imgs[lo:hi, None], n_items, labels,
                            config.channels, workers)
    banks.append(bank1)
    scatters.append(sc)
    timings["stage1_filter_learning"] = 0.0 if s1.provenance == "random" else time.perf_counter() - t0

    if len(config.stages) == 2:
        t0 = time.perf_counter()
        s2 = config.stages[1]
        bank2, sc = _learn_bank(s2, lambda lo, hi: correlate_stack(imgs[lo:hi], bank1.filters),
                                n_items, labels, 1, workers)
        banks.append(bank2)
        scatters.append(sc)
        timings["stage2_filter_learning"] = 0.0 if s2.provenance == "random" else time.perf_counter() - t0
    timings["filter_learning"] = sum(timings.values())
    return NetworkModel(config, banks, (m, n), scatters, timings)


# --------------------------------------------------------------------------
# output layer


def _code_dtype(bits):
    return np.uint8 if bits <= 8 else np.uint16 if bits <= 16 else np.uint32


def _pack_bits(responses, axis):
    # responses: bit planes along `axis`; H(x) = 1 for x > 0
    bits = responses.shape[axis]
    weights = (np.uint64(1) << np.arange(bits, dtype=np.uint64))
    shape = [1] * responses.ndim
    shape[axis] = bits
    codes = ((responses > 0) * weights.reshape(shape)).sum(axis=axis, dtype=np.uint64)
    return codes.astype(_code_dtype(bits))


def encode_codes(responses):
    """Pack ``L`` same-size response maps into one integer code map."""
    responses = [np.asarray(r, dtype=np.float64) for r in responses]
    if not responses:
        raise InvalidInputError("need at least one response map")
    if any(r.shape != responses[0].shape or r.ndim != 2 for r in responses):
        raise InvalidInputError("response maps must share one 2-D shape")
    if len(responses) > MAX_CODE_BITS:
        raise InvalidInputError(f"at most {MAX_CODE_BITS} responses can be packed")
    return _pack_bits(np.stack(responses), axis=0)


def _histograms(codes, config):
    """``(N, M, m, n)`` code maps -> ``(N, M, B, bins)`` block histograms."""
    n_img, n_maps, m, n = codes.shape
    rows, cols = config.block_origins(m, n)
    sh, sw = config.stride()
    win = sliding_window_view(codes, (config.block_h, config.block_w), axis=(2, 3))
    win = win[:, :, rows[0]:rows[-1] + 1:sh, cols[0]:cols[-1] + 1:sw]
    n_blocks = len(rows) * len(cols)
    flat = win.reshape(n_img * n_maps * n_blocks, -1).astype(np.int64)
    bins = config.bins
    flat += (np.arange(flat.shape[0], dtype=np.int64) * bins)[:, None]
    counts = np.bincount(flat.ravel(), minlength=flat.shape[0] * bins)
    return counts.reshape(n_img, n_maps, n_blocks, bins).astype(np.float64)


def block_histograms(code, block_h, block_w, overlap_ratio, bins):
    """Concatenated per-block code histograms of one code map.

    Blocks step by ``block - floor(overlap_ratio * block)`` (at least 1) from
    the top-left corner; pixels not covered by a full block are ignored.
    """
    code = np.asarray(code)
    if code.ndim != 2:
        raise InvalidInputError("code map must be 2-D")
    bits = int(round(np.log2(bins)))
    if 2 ** bits != bins:
        raise InvalidConfigError("bin count must be a power of two")
    if code.size and (code.min() < 0 or code.max() >= bins):
        raise InvalidInputError("code values outside [0, bins)")
    cfg = NetworkConfig((StageSpec(1, 1, bits),), block_h, block_w, overlap_ratio)
    return _histograms(code[None, None], cfg).ravel()


class SppPooled(NamedTuple):
    features: np.ndarray  # (n_cells, M * bins)
    empty_cells: int


def spp_pool(hists, origins, map_shape, levels=(4, 2, 1)):
    """Per-bin max pooling of block histograms over a spatial pyramid.

    Parameters
    ----------
    hists : ndarray, shape (M, B, bins)
        Block histograms of the ``M`` code maps, blocks in row-major order.
    origins : (rows, cols)
        Block-origin coordinates as returned by ``NetworkConfig.block_origins``.
    map_shape : (m, n)
    levels : sequence of int
        Grid size per pyramid level; cells are visited level by level, then
        row-major.  A block belongs to the cell containing its origin.
    """
    hists = np.asarray(hists, dtype=np.float64)
    n_maps, n_blocks, bins = hists.shape
    rows, cols = (np.asarray(o) for o in origins)
    if len(rows) * len(cols) != n_blocks:
        raise InvalidInputError("origins do not match the number of blocks")
    m, n = map_shape
    r_grid, c_grid = np.meshgrid(rows, cols, indexing="ij")
    r_grid, c_grid = r_grid.ravel(), c_grid.ravel()
    per_block = np.moveaxis(hists, 1, 0).reshape(n_blocks, n_maps * bins)
    pooled, empty = [], 0
    for g in levels:
        cell = (r_grid * g // m) * g + (c_grid * g // n)
        for idx in range(g * g):
            members = per_block[cell == idx]
            if len(members):
                pooled.append(members.max(axis=0))
            else:
                pooled.append(np.zeros(n_maps * bins))
                empty += 1
    return SppPooled(np.stack(pooled), empty)


# --------------------------------------------------------------------------
# extraction


def _check_images(model, images):
    cfg = model.config
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == (2 if cfg.channels == 1 else 3)
    if single:
        arr = arr[None]
    arr = _stack_images(arr, cfg.channels)
    if model.image_shape is not None and tuple(arr.shape[-2:]) != tuple(model.image_shape):
        raise InvalidInputError(
            f"image size {arr.shape[-2:]} differs from training size {model.image_shape}")
    cfg.block_origins(*arr.shape[-2:])
    return arr, single


def _codes_chunk(model, imgs):
    cfg = model.config
    r1 = correlate_stack(imgs, model.banks[0].filters)
    if len(model.banks) == 2:
        r2 = correlate_stack(r1, model.banks[1].filters)  # (b, L1, L2, m, n)
        return _pack_bits(r2, axis=2)
    b, n_f, m, n = r1.shape
    return _pack_bits(r1.reshape(b, cfg.n_code_maps, cfg.bits, m, n), axis=2)


def _chunk_size(model, shape):
    cfg = model.config
    per_image = cfg.stages[0].n_filters * cfg.bits * shape[-1] * shape[-2]
    return max(1, _RESPONSE_BUDGET // per_image)


def _map_chunks(fn, total, size, workers):
    bounds = [(lo, min(lo + size, total)) for lo in range(0, total, size)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, bounds))
    return [fn(b) for b in bounds]


def encode(model, images, workers=1):
    """Code maps for a batch of images: ``(N, M, m, n)`` unsigned integers."""
    imgs, _ = _check_images(model, images)
    size = _chunk_size(model, imgs.shape)
    parts = _map_chunks(lambda b: _codes_chunk(model, imgs[b[0]:b[1]]), imgs.shape[0], size, workers)
    return np.concatenate(parts)


def features_from_codes(codes, config):
    """Feature matrix ``(N, D)`` from precomputed code maps under ``config``'s geometry."""
    codes = np.asarray(codes)
    if codes.ndim != 4:
        raise InvalidInputError("codes must be (N, M, m, n)")
    hists = _histograms(codes, config)
    n_img, n_maps, n_blocks, bins = hists.shape
    if not config.spp_levels:
        return hists.reshape(n_img, -1)
    origins = config.block_origins(*codes.shape[-2:])
    return np.stack([
        spp_pool(h, origins, codes.shape[-2:], config.spp_levels).features.ravel()
        for h in hists
    ])


def extract_features(model, images, workers=1, as_sparse=False, config=None):
    """Feature matrix for a batch of images.

    ``config`` may override the output-layer geometry (blocks, overlap, SPP)
    of the model, e.g. for block-size sweeps.  With ``as_sparse`` a CSR matrix
    is returned, which keeps large histogram features affordable.
    """
    imgs, _ = _check_images(model, images)
    cfg = model.config if config is None else config
    size = _chunk_size(model, imgs.shape)

    def run(bounds):
        feats = features_from_codes(_codes_chunk(model, imgs[bounds[0]:bounds[1]]), cfg)
        return sparse.csr_matrix(feats) if as_sparse else feats

    parts = _map_chunks(run, imgs.shape[0], size, workers)
    return sparse.vstack(parts, format="csr") if as_sparse else np.concatenate(parts)


def extract_feature(model, img):
    """Feature vector of a single image."""
    arr, _ = _check_images(model, img)
    return extract_features(model, arr)[0]


# --------------------------------------------------------------------------
# persistence


def _header_lines(model):
    cfg = model.config
    lines = [f"stages={len(cfg.stages)}", f"channels={cfg.channels}",
             f"block_h={cfg.block_h}", f"block_w={cfg.block_w}",
             f"overlap_ratio={cfg.overlap_ratio!r}",
             "spp_levels=" + ("" if not cfg.spp_levels else ",".join(map(str, cfg.spp_levels))),
             "code_bits=" + ("" if cfg.code_bits is None else str(cfg.code_bits))]
    if model.image_shape is not None:
        lines.append(f"image_shape={model.image_shape[0]},{model.image_shape[1]}")
    for i, s in enumerate(cfg.stages, 1):
        lines += [f"stage{i}.k1={s.k1}", f"stage{i}.k2={s.k2}", f"stage{i}.L={s.n_filters}",
                  f"stage{i}.provenance={s.provenance}",
                  f"stage{i}.seed=" + ("" if s.seed is None else str(s.seed))]
    return lines


def model_bytes(model):
    """Serialized model file contents."""
    header = "".join(line + "\n" for line in _header_lines(model)).encode("utf-8")
    body = bytearray(MODEL_MAGIC)
    body += struct.pack("<BI", MODEL_VERSION, len(header))
    body += header
    for bank in model.banks:
        body += bank.filters.astype("<f8").tobytes(order="C")
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def save_model(model, path):
    data = model_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)


def _opt_int(value):
    return None if value == "" else int(value)


def parse_model(data):
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise BadMagicError("not a PCANet model file (bad magic)")
    if len(data) < 9:
        raise TruncatedFileError("model file truncated inside the preamble")
    version, hlen = struct.unpack("<BI", data[4:9])
    if version != MODEL_VERSION:
        raise UnsupportedVersionError(f"model format version {version}; this reader supports {MODEL_VERSION}")
    if len(data) < 9 + hlen:
        raise TruncatedFileError("model file truncated inside the header")
    try:
        text = data[9:9 + hlen].decode("utf-8")
        kv = dict(line.split("=", 1) for line in text.splitlines() if line)
        n_stages = int(kv["stages"])
        stages = tuple(
            StageSpec(int(kv[f"stage{i}.k1"]), int(kv[f"stage{i}.k2"]), int(kv[f"stage{i}.L"]),
                      kv[f"stage{i}.provenance"], _opt_int(kv[f"stage{i}.seed"]))
            for i in range(1, n_stages + 1))
        spp = kv.get("spp_levels", "")
        cfg = NetworkConfig(
            stages, int(kv["block_h"]), int(kv["block_w"]), float(kv["overlap_ratio"]),
            tuple(int(g) for g in spp.split(",")) if spp else None,
            int(kv["channels"]), _opt_int(kv.get("code_bits", "")))
        shape = kv.get("image_shape")
        image_shape = tuple(int(v) for v in shape.split(",")) if shape else None
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        if zlib.crc32(data[:-4]) & 0xFFFFFFFF != struct.unpack("<I", data[-4:])[0]:
            raise ChecksumError("model file checksum mismatch") from exc
        raise TruncatedFileError(f"malformed model header: {exc}") from exc
    shapes = []
    for i, s in enumerate(stages):
        ch = cfg.channels if i == 0 else 1
        shapes.append((s.n_filters, s.k1, s.k2) if ch == 1 else (s.n_filters, ch, s.k1, s.k2))
    expected = 9 + hlen + sum(8 * int(np.prod(sh)) for sh in shapes) + 4
    if len(data) < expected:
        raise TruncatedFileError(f"model file has {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise TruncatedFileError(f"model file has {len(data) - expected} trailing bytes")
    stored = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumError("model file checksum mismatch")
    banks, pos = [], 9 + hlen
    for s, sh in zip(stages, shapes):
        size = 8 * int(np.prod(sh))
        filt = np.frombuffer(data[pos:pos + size], dtype="<f8").reshape(sh).astype(np.float64)
        banks.append(FilterBank(filt, s.provenance, s.seed))
        pos += size
    return NetworkModel(cfg, banks, image_shape)


def load_model(path):
    with open(path, "rb") as fh:
        return parse_model(fh.read())

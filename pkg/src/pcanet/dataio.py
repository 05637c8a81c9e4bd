"""Dataset ingestion: IDX files, image-directory manifests, deformed test sets,
flat key=value experiment configs."""

from dataclasses import dataclass, fields
import os
import struct

import numpy as np

from .errors import (
    BadMagicError, CountMismatchError, DatasetError, InvalidConfigError,
    InvalidInputError, PCANetError, TruncatedFileError,
)
from .imaging import Occlude, Rotate, Scale, Translate, apply_deformation, read_pnm

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = ("train", "valid", "test", "gallery", "probe")
# MNIST basic train / valid / test sizes
MNIST_BASIC_SPLITS = (10000, 2000, 50000)


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, m, n) or (N, 3, m, n)
    labels: np.ndarray  # (N,) int
    splits: np.ndarray = None  # (N,) split tag per item
    class_count: int = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise InvalidInputError("one label per image required")
        if self.splits is None:
            self.splits = np.full(len(self.labels), "train", dtype=object)
        else:
            self.splits = np.asarray(self.splits, dtype=object)
        bad = set(self.splits) - set(SPLITS)
        if bad:
            raise InvalidInputError(f"unknown split tags {sorted(bad)}")
        if self.class_count is None:
            self.class_count = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InvalidInputError("labels must lie in [0, class_count)")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, split):
        """Items tagged ``split`` (order preserved)."""
        mask = self.splits == split
        return LabeledDataset(self.images[mask], self.labels[mask], self.splits[mask], self.class_count)

    def take(self, index):
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return LabeledDataset(self.images[index], self.labels[index], self.splits[index], self.class_count)

    def with_split(self, split):
        return LabeledDataset(self.images, self.labels, np.full(len(self), split, dtype=object),
                              self.class_count)


# --------------------------------------------------------------------------
# IDX


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def parse_idx_images(raw):
    if len(raw) < 16:
        raise TruncatedFileError("IDX image file shorter than its header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(f"bad IDX image magic 0x{magic:08x}")
    size = count * rows * cols
    if len(raw) < 16 + size:
        raise TruncatedFileError(f"IDX image payload has {len(raw) - 16} bytes, expected {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=16).reshape(count, rows, cols)


def parse_idx_labels(raw):
    if len(raw) < 8:
        raise TruncatedFileError("IDX label file shorter than its header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise BadMagicError(f"bad IDX label magic 0x{magic:08x}")
    if len(raw) < 8 + count:
        raise TruncatedFileError(f"IDX label payload has {len(raw) - 8} bytes, expected {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path, labels_path, split="train"):
    """Load an IDX image/label pair; pixels are mapped to [0, 1]."""
    pixels = parse_idx_images(_read(images_path))
    labels = parse_idx_labels(_read(labels_path))
    if len(pixels) != len(labels):
        raise CountMismatchError(f"{len(pixels)} images but {len(labels)} labels")
    return LabeledDataset(pixels.astype(np.float64) / 255.0, labels.astype(np.int64),
                          np.full(len(labels), split, dtype=object))


def idx_bytes(images=None, labels=None):
    """Encode uint8 ``(N, m, n)`` images or ``(N,)`` labels as IDX bytes."""
    if images is not None:
        images = np.asarray(images)
        if images.dtype != np.uint8:
            images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
        return struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes()
    labels = np.asarray(labels).astype(np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()


def emit_idx(dataset, images_path, labels_path):
    with open(images_path, "wb") as fh:
        fh.write(idx_bytes(images=dataset.images))
    with open(labels_path, "wb") as fh:
        fh.write(idx_bytes(labels=dataset.labels))


def amat_to_idx(amat_path, images_path, labels_path, side=28):
    """Convert an ``.amat`` text file (one row of ``side*side`` pixels in [0, 1]
    followed by the label per line) into an IDX pair.  Pixel order is taken
    as row-major; check a few digits visually after converting."""
    rows = np.loadtxt(amat_path)
    pixels = rows[:, :side * side].reshape(-1, side, side)
    labels = rows[:, side * side].astype(np.int64)
    emit_idx(LabeledDataset(pixels, labels), images_path, labels_path)


# --------------------------------------------------------------------------
# image directory + manifest

FEATURE_MAGIC = b"PCFV"


def feature_bytes(matrix):
    """``PCFV`` + u32 rows + u32 cols (little-endian) + row-major f64 values."""
    m = np.asarray(matrix.toarray() if hasattr(matrix, "toarray") else matrix, dtype="<f8")
    if m.ndim != 2:
        raise InvalidInputError("feature matrix must be 2-D")
    return FEATURE_MAGIC + struct.pack("<II", *m.shape) + np.ascontiguousarray(m).tobytes()


def parse_features(raw):
    if raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"bad feature-file magic {raw[:4]!r}")
    if len(raw) < 12:
        raise TruncatedFileError("feature-file header truncated")
    rows, cols = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 8 * rows * cols:
        raise TruncatedFileError(f"feature file holds {len(raw) - 12} payload bytes, "
                                 f"expected {8 * rows * cols}")
    return np.frombuffer(raw, dtype="<f8", offset=12).reshape(rows, cols).astype(np.float64)


def write_features(path, matrix):
    with open(path, "wb") as fh:
        fh.write(feature_bytes(matrix))


def write_feature_chunks(path, rows, cols, chunks):
    """Stream row blocks into a feature file without holding the whole matrix."""
    written = 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", rows, cols))
        for chunk in chunks:
            chunk = np.asarray(chunk.toarray() if hasattr(chunk, "toarray") else chunk, dtype="<f8")
            if chunk.ndim != 2 or chunk.shape[1] != cols:
                raise InvalidInputError(f"chunk shape {chunk.shape} does not have {cols} columns")
            fh.write(np.ascontiguousarray(chunk).tobytes())
            written += chunk.shape[0]
    if written != rows:
        raise InvalidInputError(f"wrote {written} rows, header declares {rows}")


def read_features(path):
    return parse_features(_read(path))


def load_image_dir(root, manifest):
    """Load images listed in a TSV manifest of ``relative_path<TAB>label<TAB>split``.

    All problems are collected line by line and reported together in one
    ``DatasetError``.
    """
    with open(manifest, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    entries, problems, seen = [], [], set()
    for no, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            problems.append(f"line {no}: expected 3 tab-separated fields")
            continue
        rel, label, split = parts
        if rel in seen:
            problems.append(f"line {no}: duplicate entry {rel!r}")
            continue
        seen.add(rel)
        if split not in SPLITS:
            problems.append(f"line {no}: unknown split tag {split!r}")
            continue
        try:
            label = int(label)
            if label < 0:
                raise ValueError
        except ValueError:
            problems.append(f"line {no}: label must be a non-negative integer")
            continue
        path = os.path.join(root, rel)
        if not os.path.isfile(path):
            problems.append(f"line {no}: missing file {rel!r}")
            continue
        try:
            img = read_pnm(path)
        except PCANetError as exc:
            problems.append(f"line {no}: {exc}")
            continue
        entries.append((no, img, label, split))
    if entries:
        shape = entries[0][1].shape
        for no, img, _, _ in entries:
            if img.shape != shape:
                problems.append(f"line {no}: geometry {img.shape} differs from {shape}")
    if problems:
        raise DatasetError(f"{len(problems)} bad manifest line(s):\n" + "\n".join(problems), problems)
    if not entries:
        raise DatasetError("manifest lists no images")
    return LabeledDataset(np.stack([e[1] for e in entries]), [e[2] for e in entries],
                          [e[3] for e in entries])


# --------------------------------------------------------------------------
# deformed test sets


def translation_sweep(max_px=4):
    """All integer shifts ``(dx, dy)`` with ``|dx|, |dy| <= max_px``."""
    r = range(-max_px, max_px + 1)
    return [Translate(dx, dy) for dy in r for dx in r]


def occlusion_sweep(levels=(0.0, 0.2, 0.4, 0.6, 0.8), occluder=None):
    return [Occlude(f, 0, occluder) for f in levels]


def make_deformed_testset(base, sweep, seed=0, split=None):
    """One deformed copy of the test/probe split per sweep point.

    Random choices (occlusion placement and noise) are seeded from
    ``(seed, sweep index, image index)``, so every item is reproducible on
    its own regardless of processing order.
    """
    if split is None:
        present = set(base.splits)
        split = "probe" if "probe" in present else "test" if "test" in present else None
        if split is None:
            raise InvalidInputError("dataset has no probe or test split")
    probe = base.subset(split)
    out = []
    for s_idx, d in enumerate(sweep):
        imgs = np.empty_like(probe.images)
        for i, img in enumerate(probe.images):
            rng = np.random.default_rng(np.random.SeedSequence([seed, s_idx, i]))
            imgs[i] = apply_deformation(img, d, rng)
        out.append((d, LabeledDataset(imgs, probe.labels, probe.splits, probe.class_count)))
    return out


def parse_sweep(text):
    """Parse a sweep spec such as ``translate:4``, ``translate_x:-3..3``,
    ``rotate:-8,0,8``, ``scale:0.9,1.1``, ``occlude:0,0.2,0.4``; several specs
    may be joined with ``;``."""
    sweep = []
    for item in filter(None, (p.strip() for p in text.split(";"))):
        kind, _, arg = item.partition(":")
        if kind == "identity":
            sweep.append(Translate(0, 0))
            continue
        if not arg:
            raise InvalidConfigError(f"sweep item {item!r} needs values")
        if ".." in arg:
            lo, hi = (int(v) for v in arg.split(".."))
            values = list(range(lo, hi + 1))
        else:
            values = [float(v) for v in arg.split(",")]
        if kind == "translate":
            if len(values) != 1:
                raise InvalidConfigError("translate takes a single maximum shift")
            sweep += translation_sweep(int(values[0]))
        elif kind == "translate_x":
            sweep += [Translate(int(v), 0) for v in values]
        elif kind == "translate_y":
            sweep += [Translate(0, int(v)) for v in values]
        elif kind == "rotate":
            sweep += [Rotate(float(v)) for v in values]
        elif kind == "scale":
            sweep += [Scale(float(v)) for v in values]
        elif kind == "occlude":
            sweep += [Occlude(float(v)) for v in values]
        else:
            raise InvalidConfigError(f"unknown sweep kind {kind!r}")
    return sweep


# --------------------------------------------------------------------------
# experiment configuration


@dataclass
class ExperimentConfig:
    """Flat experiment description; every field is a key in the config file."""

    # data: either IDX pairs or an image root + manifest
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    image_root: str = ""
    manifest: str = ""
    train_count: int = 0  # use only the first N training items (0 = all)
    # network
    stages: int = 2
    k1: int = 7
    k2: int = 7
    L1: int = 8
    L2: int = 8
    provenance: str = "pca"
    filter_seed: int = 0
    block_h: int = 7
    block_w: int = 7
    overlap_ratio: float = 0.5
    spp_levels: str = ""
    channels: int = 1
    code_bits: int = 0
    # classifier
    classifier: str = "svm"  # svm | nn-chi-square | nn-cosine
    svm_C: float = 1.0
    svm_epochs: int = 10
    sqrt: bool = False
    wpca_dim: int = 0
    # experiments
    sweep: str = ""  # e.g. "translate:3" or "occlude:0,0.2,0.4"
    compare_blocks: str = ""  # robustness curves for extra block sizes, e.g. "4x4,7x7"
    extract_split: str = "train"  # train | test
    bench_filters: str = "16x8,32x8,64x8,128x8,256x8"  # L1xL2 pairs
    bench_k: int = 7
    bench_ks: str = "9,13,17,21,25"  # patch-size sweep; empty skips it
    bench_size: int = 64
    bench_images: int = 16
    bench_repeats: int = 7
    # outputs
    model_path: str = "model.pcnt"
    report_path: str = ""
    features_path: str = "features.pcfv"
    csv_path: str = "robustness.csv"
    filters_dir: str = "filters"
    workers: int = 0  # 0 = all logical cores
    seed: int = 0

    def network_config(self):
        from .network import NetworkConfig, StageSpec

        seeds = [self.filter_seed + i for i in range(self.stages)]
        counts = [self.L1, self.L2][:self.stages]
        specs = tuple(StageSpec(self.k1, self.k2, n,
                                self.provenance, s if self.provenance == "random" else None)
                      for n, s in zip(counts, seeds))
        spp = tuple(int(v) for v in self.spp_levels.split(",")) if self.spp_levels else None
        return NetworkConfig(specs, self.block_h, self.block_w, self.overlap_ratio, spp,
                             self.channels, self.code_bits or None)

    def validate(self, need_train=True, need_test=False):
        """Check that every referenced input path exists."""
        missing = []
        groups = []
        if need_train:
            groups.append(("train_images", "train_labels"))
        if need_test:
            groups.append(("test_images", "test_labels"))
        for keys in groups:
            if self.manifest:
                keys = ("manifest",)
            for key in keys:
                value = getattr(self, key)
                if not value or not os.path.exists(value):
                    missing.append(f"{key}={value!r}")
        if missing:
            raise InvalidConfigError("missing input path(s): " + ", ".join(missing))
        self.network_config()


_BOOL = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


def coerce(name, value):
    """Convert a string to the type of ``ExperimentConfig.<name>``."""
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in kinds:
        raise InvalidConfigError(f"unknown config key {name!r}")
    kind = kinds[name]
    try:
        if kind in (bool, "bool"):
            return _BOOL[str(value).strip().lower()]
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
    except (KeyError, ValueError) as exc:
        raise InvalidConfigError(f"bad value {value!r} for {name}") from exc
    return str(value)


def parse_config_text(text):
    values = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidConfigError(f"config line {no}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def load_config(path=None, overrides=None):
    """Build an ``ExperimentConfig`` from a file and/or overrides (overrides win)."""
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    for key, value in (overrides or {}).items():
        values[key] = coerce(key, value) if isinstance(value, str) else value
    return ExperimentConfig(**values)


def dump_config(cfg):
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in fields(cfg))


def load_datasets(cfg):
    """Training and test datasets described by an ``ExperimentConfig``."""
    if cfg.manifest:
        full = load_image_dir(cfg.image_root or ".", cfg.manifest)
        present = set(full.splits)
        train = full.subset("gallery" if "gallery" in present and "train" not in present else "train")
        test_split = "probe" if "probe" in present else "test"
        test = full.subset(test_split) if test_split in present else None
    else:
        train = load_idx(cfg.train_images, cfg.train_labels, "train")
        test = None
        if cfg.test_images:
            test = load_idx(cfg.test_images, cfg.test_labels, "test")
    if cfg.train_count:
        train = train.take(np.arange(min(cfg.train_count, len(train))))
    return train, test

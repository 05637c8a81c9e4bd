import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcanet.dataio import (
    MNIST_BASIC_SPLITS, ExperimentConfig, LabeledDataset, amat_to_idx, dump_config, emit_idx,
    feature_bytes, idx_bytes, load_config, load_datasets, load_idx, load_image_dir,
    make_deformed_testset, occlusion_sweep, parse_config_text, parse_features, parse_sweep,
    read_features, translation_sweep, write_feature_chunks, write_features,
)
from pcanet.errors import (
    BadMagicError, CountMismatchError, DatasetError, InvalidConfigError, InvalidInputError,
    TruncatedFileError,
)
from pcanet.experiments import load_mnist_basic
from pcanet.imaging import Occlude, Rotate, Scale, Translate, write_pnm


def write_idx(tmp_path, pixels, labels, stem="d"):
    ip, lp = tmp_path / f"{stem}-img", tmp_path / f"{stem}-lbl"
    ip.write_bytes(idx_bytes(images=pixels))
    lp.write_bytes(idx_bytes(labels=labels))
    return ip, lp


# ---- IDX


def test_idx_roundtrip_byte_identical(tmp_path):
    pixels = np.random.default_rng(0).integers(0, 256, size=(2, 28, 28), dtype=np.uint8)
    ip, lp = write_idx(tmp_path, pixels, [3, 7])
    ds = load_idx(ip, lp)
    assert ds.images.shape == (2, 28, 28) and ds.labels.tolist() == [3, 7]
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    emit_idx(ds, tmp_path / "o-img", tmp_path / "o-lbl")
    assert (tmp_path / "o-img").read_bytes() == ip.read_bytes()
    assert (tmp_path / "o-lbl").read_bytes() == lp.read_bytes()


def test_idx_header_layout():
    raw = idx_bytes(images=np.zeros((3, 2, 5), dtype=np.uint8))
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 3, 2, 5)
    assert struct.unpack(">II", idx_bytes(labels=[1, 2])[:8]) == (0x801, 2)


def test_idx_count_mismatch(tmp_path):
    ip, lp = write_idx(tmp_path, np.zeros((3, 4, 4), dtype=np.uint8), [0, 1])
    with pytest.raises(CountMismatchError):
        load_idx(ip, lp)


def test_idx_bad_magic_and_truncation(tmp_path):
    ip, lp = write_idx(tmp_path, np.zeros((2, 4, 4), dtype=np.uint8), [0, 1])
    good = ip.read_bytes()
    ip.write_bytes(b"\x00\x00\x08\x01" + good[4:])
    with pytest.raises(BadMagicError):
        load_idx(ip, lp)
    ip.write_bytes(good[:-1])
    with pytest.raises(TruncatedFileError):
        load_idx(ip, lp)
    ip.write_bytes(good[:10])
    with pytest.raises(TruncatedFileError):
        load_idx(ip, lp)
    ip.write_bytes(good)
    lp.write_bytes(lp.read_bytes()[:-1])
    with pytest.raises(TruncatedFileError):
        load_idx(ip, lp)


def test_amat_conversion_row_major(tmp_path):
    pix = np.random.default_rng(1).integers(0, 256, size=(3, 4, 4)) / 255.0
    rows = np.hstack([pix.reshape(3, 16), np.array([[2], [0], [1]])])
    np.savetxt(tmp_path / "x.amat", rows)
    amat_to_idx(tmp_path / "x.amat", tmp_path / "i", tmp_path / "l", side=4)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.allclose(ds.images, pix) and ds.labels.tolist() == [2, 0, 1]


def test_mnist_basic_split_sizes():
    assert MNIST_BASIC_SPLITS == (10000, 2000, 50000)


def test_mnist_basic_loader_splits(tmp_path):
    pixels = np.zeros((12, 28, 28), dtype=np.uint8)
    write_idx(tmp_path, pixels, np.arange(12) % 10, "train")
    write_idx(tmp_path, pixels[:5], np.arange(5), "test")
    for src, dst in (("train-img", "train-images-idx3-ubyte"), ("train-lbl", "train-labels-idx1-ubyte"),
                     ("test-img", "test-images-idx3-ubyte"), ("test-lbl", "test-labels-idx1-ubyte")):
        (tmp_path / src).rename(tmp_path / dst)
    train, valid, test = load_mnist_basic(tmp_path, n_train=10)
    assert (len(train), len(valid), len(test)) == (10, 2, 5)
    assert set(valid.splits) == {"valid"} and set(test.splits) == {"test"}
    with pytest.raises(FileNotFoundError):
        load_mnist_basic(tmp_path / "nowhere")


def test_dataset_invariants():
    with pytest.raises(InvalidInputError):
        LabeledDataset(np.zeros((2, 3, 3)), [0])
    with pytest.raises(InvalidInputError):
        LabeledDataset(np.zeros((2, 3, 3)), [0, 1], ["train", "bogus"])
    with pytest.raises(InvalidInputError):
        LabeledDataset(np.zeros((2, 3, 3)), [0, 5], class_count=3)
    ds = LabeledDataset(np.zeros((4, 3, 3)), [0, 1, 2, 1], ["train", "test", "train", "test"])
    assert ds.class_count == 3
    assert ds.subset("test").labels.tolist() == [1, 1]


# ---- manifests


def make_tree(tmp_path, lines, n=4, shape=(4, 5)):
    for i in range(n):
        write_pnm(tmp_path / f"im{i}.pgm", np.full(shape, i / 10))
    man = tmp_path / "m.tsv"
    man.write_text("".join(line + "\n" for line in lines))
    return man


def test_manifest_gallery_probe(tmp_path):
    man = make_tree(tmp_path, ["im0.pgm\t0\tgallery", "im1.pgm\t1\tgallery",
                               "im2.pgm\t0\tprobe", "im3.pgm\t1\tprobe"])
    ds = load_image_dir(tmp_path, man)
    assert len(ds.subset("gallery")) == 2 and len(ds.subset("probe")) == 2
    assert np.allclose(ds.images[:, 0, 0], [0, 0.1, 0.2, 0.3], atol=1 / 255)
    cfg = ExperimentConfig(image_root=str(tmp_path), manifest=str(man))
    train, test = load_datasets(cfg)
    assert train.labels.tolist() == [0, 1] and test.labels.tolist() == [0, 1]


def test_manifest_empty(tmp_path):
    with pytest.raises(DatasetError):
        load_image_dir(tmp_path, make_tree(tmp_path, []))


def test_manifest_problems_listed_per_line(tmp_path):
    man = make_tree(tmp_path, ["im0.pgm\t0\ttrain", "im0.pgm\t1\ttrain", "im1.pgm\t0\tholdout",
                               "nope.pgm\t0\ttrain", "im2.pgm\tx\ttrain", "broken line"])
    with pytest.raises(DatasetError) as info:
        load_image_dir(tmp_path, man)
    problems = info.value.problems
    assert len(problems) == 5
    assert "duplicate" in problems[0] and "split" in problems[1] and "missing" in problems[2]


def test_manifest_geometry_mismatch(tmp_path):
    man = make_tree(tmp_path, ["im0.pgm\t0\ttrain", "odd.pgm\t0\ttrain"])
    write_pnm(tmp_path / "odd.pgm", np.zeros((3, 3)))
    with pytest.raises(DatasetError) as info:
        load_image_dir(tmp_path, man)
    assert "geometry" in info.value.problems[0]


# ---- deformed sets


def base_set(n=5):
    g = np.random.default_rng(0)
    return LabeledDataset(g.uniform(size=(n, 12, 12)), np.arange(n) % 2, ["test"] * n)


def test_empty_sweep():
    assert make_deformed_testset(base_set(), []) == []


def test_translation_grid():
    sweep = translation_sweep(4)
    assert len(sweep) == 81
    assert {(t.dx, t.dy) for t in sweep} == {(x, y) for x in range(-4, 5) for y in range(-4, 5)}


def test_occlusion_levels():
    assert [o.fraction for o in occlusion_sweep()] == [0.0, 0.2, 0.4, 0.6, 0.8]


def test_deformed_sets_reproducible_and_aligned():
    sweep = occlusion_sweep() + [Translate(1, 0)]
    a = make_deformed_testset(base_set(), sweep, seed=4)
    b = make_deformed_testset(base_set(), sweep, seed=4)
    for (da, sa), (db, sb) in zip(a, b):
        assert da == db and np.array_equal(sa.images, sb.images)
        assert sa.labels.tolist() == base_set().labels.tolist()
    assert np.array_equal(a[0][1].images, base_set().images)
    c = make_deformed_testset(base_set(), sweep, seed=5)
    assert not np.array_equal(a[2][1].images, c[2][1].images)


def test_deformed_item_independent_of_batch():
    full = make_deformed_testset(base_set(5), [Occlude(0.3)], seed=1)[0][1]
    part = make_deformed_testset(base_set(5).take([0, 1, 2]), [Occlude(0.3)], seed=1)[0][1]
    assert np.array_equal(full.images[:3], part.images)


def test_deformed_needs_probe_or_test():
    with pytest.raises(InvalidInputError):
        make_deformed_testset(LabeledDataset(np.zeros((1, 4, 4)), [0]), [Translate(0, 0)])
    probe = LabeledDataset(np.zeros((2, 4, 4)), [0, 1], ["gallery", "probe"])
    assert len(make_deformed_testset(probe, [Translate(0, 0)])[0][1]) == 1


def test_parse_sweep():
    assert len(parse_sweep("translate:4")) == 81
    assert parse_sweep("translate_x:-2..2") == [Translate(v, 0) for v in range(-2, 3)]
    mixed = parse_sweep("identity; rotate:-8,8; scale:0.9; occlude:0,0.2")
    assert mixed == [Translate(0, 0), Rotate(-8.0), Rotate(8.0), Scale(0.9), Occlude(0.0), Occlude(0.2)]
    for bad in ("warp:1", "rotate", "translate:1,2"):
        with pytest.raises(InvalidConfigError):
            parse_sweep(bad)


# ---- feature files


def test_feature_file_roundtrip(tmp_path):
    m = np.random.default_rng(0).uniform(size=(3, 5))
    write_features(tmp_path / "f", m)
    raw = (tmp_path / "f").read_bytes()
    assert raw[:4] == b"PCFV" and struct.unpack("<II", raw[4:12]) == (3, 5)
    assert np.array_equal(read_features(tmp_path / "f"), m)
    write_feature_chunks(tmp_path / "g", 3, 5, [m[:2], m[2:]])
    assert (tmp_path / "g").read_bytes() == raw


def test_feature_file_errors(tmp_path):
    raw = feature_bytes(np.ones((2, 2)))
    with pytest.raises(BadMagicError):
        parse_features(b"XXXX" + raw[4:])
    with pytest.raises(TruncatedFileError):
        parse_features(raw[:-3])
    with pytest.raises(TruncatedFileError):
        parse_features(raw[:8])
    with pytest.raises(InvalidInputError):
        write_feature_chunks(tmp_path / "h", 3, 2, [np.ones((2, 2))])


# ---- configuration


def test_config_text_and_overrides(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("# comment\nk1 = 5\nsqrt=true\noverlap_ratio=0.25\nclassifier=nn-cosine\n")
    cfg = load_config(path, {"k1": "9", "L1": 4})
    assert (cfg.k1, cfg.L1, cfg.sqrt, cfg.overlap_ratio, cfg.classifier) == (9, 4, True, 0.25, "nn-cosine")
    assert load_config().k1 == 7


def test_config_errors():
    with pytest.raises(InvalidConfigError):
        parse_config_text("nokey")
    with pytest.raises(InvalidConfigError):
        parse_config_text("unknown_key=1")
    with pytest.raises(InvalidConfigError):
        parse_config_text("k1=seven")
    with pytest.raises(InvalidConfigError):
        parse_config_text("sqrt=maybe")


def test_config_validate_paths(tmp_path):
    with pytest.raises(InvalidConfigError):
        ExperimentConfig(train_images=str(tmp_path / "none")).validate()
    ip, lp = write_idx(tmp_path, np.zeros((1, 8, 8), dtype=np.uint8), [0])
    ExperimentConfig(train_images=str(ip), train_labels=str(lp)).validate()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 15), st.floats(0, 0.9), st.booleans(), st.sampled_from(["pca", "random", "lda"]))
def test_config_dump_roundtrip(k, ratio, use_sqrt, prov):
    cfg = ExperimentConfig(k1=k, overlap_ratio=ratio, sqrt=use_sqrt, provenance=prov)
    assert ExperimentConfig(**parse_config_text(dump_config(cfg))) == cfg


def test_network_config_from_experiment():
    net = ExperimentConfig(provenance="random", filter_seed=3, L1=4, L2=2).network_config()
    assert [s.seed for s in net.stages] == [3, 4]
    assert [s.n_filters for s in net.stages] == [4, 2]
    one = ExperimentConfig(stages=1, L1=6, code_bits=3).network_config()
    assert len(one.stages) == 1 and one.bits == 3

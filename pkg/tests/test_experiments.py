import numpy as np
import pytest

from pcanet.dataio import LabeledDataset
from pcanet.errors import InvalidInputError, TruncatedFileError
from pcanet.experiments import (
    CIFAR_RECORD, complexity_benchmark, fit_pool_pca, loglog_slope, nn_accuracy, nn_predictor,
    parse_cifar_batch, patch_size_benchmark, robustness_curve, score_entry, select_block_size,
    svm_error,
)
from pcanet.imaging import Translate
from pcanet.network import NetworkConfig, train


def bars(n, seed, split="train"):
    g = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    imgs = g.uniform(0, 0.2, size=(n, 12, 12))
    for img, lab in zip(imgs, labels):
        pos = g.integers(3, 9)
        if lab:
            img[pos, 2:10] = 1.0
        else:
            img[2:10, pos] = 1.0
    return LabeledDataset(imgs, labels, [split] * n)


@pytest.fixture(scope="module")
def toy():
    tr, te = bars(40, 0), bars(20, 1, "test")
    cfg = NetworkConfig.create(k=3, filters=(4, 4), block=(4, 4))
    return train(tr, cfg), tr, te


def test_score_entry_two_decimals():
    assert score_entry(0.98937) == {"accuracy": 98.94, "error": 1.06}
    assert score_entry(1.0) == {"accuracy": 100.0, "error": 0.0}


def test_loglog_slope_exact():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    assert loglog_slope(x, 3 * x ** 1.5) == pytest.approx(1.5)


def test_svm_and_nn_protocols(toy):
    model, tr, te = toy
    assert svm_error(model, tr, te, epochs=20) <= 10
    predict = nn_predictor(model, tr)
    assert nn_accuracy(predict, tr) == 1.0
    wpca = nn_predictor(model, tr, metric="cosine", wpca_dim=10)
    assert nn_accuracy(wpca, te) >= 0.8


def test_robustness_identity_and_order(toy):
    model, tr, te = toy
    rows = robustness_curve(model, tr, te, [Translate(0, 0), Translate(2, 0)], epochs=20)
    assert [r["deformation"] for r in rows] == ["translate(0,0)", "translate(2,0)"]
    assert rows[0]["error"] == svm_error(model, tr, te, epochs=20)
    with pytest.raises(InvalidInputError):
        robustness_curve(model, tr, te.take([]), [Translate(0, 0)])


def test_select_block_size(toy):
    model, tr, te = toy
    best, errors = select_block_size(model, tr, te.with_split("valid"), epochs=20)
    # 14x14 and 28x28 do not fit a 12x12 image
    assert list(errors) == ["4x4", "7x7"]
    assert errors[f"{best[0]}x{best[1]}"] == min(errors.values())
    with pytest.raises(InvalidInputError):
        select_block_size(model, tr, te.take([]))


def test_bench_doubling_filters_doubles_time():
    # ratio for doubling L1+L2, read off the log-log fit over the grid; single
    # two-point ratios jump with BLAS blocking at particular filter counts
    rep = complexity_benchmark(repeats=5, full_budget=0)
    ratio = 2 ** rep["per_map_slope"]
    assert 1.6 <= ratio <= 2.4, ratio
    times = [r["per_map_s"] for r in rep["rows"]]
    assert times == sorted(times)


def test_patch_size_scaling_bounds():
    # the flop model gives (49/25)^2 = 3.84 for the scatter; BLAS efficiency rises
    # with k, so the measured ratio sits between linear and quadratic growth
    rep = patch_size_benchmark((5, 7), size=64, n_images=16, repeats=5)
    t5, t7 = (r["scatter_s"] for r in rep["rows"])
    assert 1.2 <= t7 / t5 <= 3.84 * 1.25
    full = patch_size_benchmark((9, 17, 25), size=48, n_images=8, repeats=3)
    times = [r["scatter_s"] for r in full["rows"]]
    assert times == sorted(times)
    assert full["scatter_slope"] > 1.0


def test_cifar_batch_parser():
    g = np.random.default_rng(0)
    pixels = g.integers(0, 256, size=(2, 3072), dtype=np.uint8)
    raw = b"".join(bytes([lab]) + row.tobytes() for lab, row in zip((3, 9), pixels))
    ds = parse_cifar_batch(raw, "train")
    assert ds.images.shape == (2, 3, 32, 32) and ds.labels.tolist() == [3, 9]
    assert np.allclose(ds.images[1, 2].ravel(), pixels[1, 2048:] / 255.0)
    assert CIFAR_RECORD == 3073
    with pytest.raises(TruncatedFileError):
        parse_cifar_batch(raw[:-1], "train")


def test_pool_pca_shapes():
    f = np.random.default_rng(1).uniform(size=(30, 3 * 20))
    reducer = fit_pool_pca(f, 3, 8)
    assert reducer.transform(f).shape == (30, 24)
    capped = fit_pool_pca(f[:5], 3, 8)
    assert capped.transform(f[:5]).shape == (5, 12)


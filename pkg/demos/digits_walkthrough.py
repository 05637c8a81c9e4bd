"""Walk through the whole pipeline on a small image corpus.

    python3 demos/digits_walkthrough.py                 # synthetic shapes
    python3 demos/digits_walkthrough.py /path/to/mnist  # MNIST basic (IDX or .amat)

Steps: learn two PCA stages from training images, look at what one image
turns into after each stage, then classify with a linear SVM and with
chi-square nearest neighbour.  RandNet and LDANet use the same topology
with random or discriminant filters, and are trained alongside for comparison.
"""

import os
import sys
import time

import numpy as np

from pcanet import (
    GalleryIndex, NetworkConfig, correlate_stack, encode, extract_features, nn_classify,
    svm_predict, svm_train, train,
)
from shapes import make_shapes

WORKERS = os.cpu_count() or 1


def load(argv):
    if len(argv) > 1:
        from pcanet.experiments import load_mnist_basic

        tr, _, te = load_mnist_basic(argv[1])
        return tr.take(np.arange(2000)), te.take(np.arange(2000)), "MNIST basic (2000/2000 subset)"
    return make_shapes(500, seed=0), make_shapes(500, seed=1, split="test"), "synthetic shapes"


def main(argv):
    train_ds, test, name = load(argv)
    print(f"data: {name}, {len(train_ds)} train / {len(test)} test, images {train_ds.image_shape}")

    cfg = NetworkConfig.create(k=7, filters=(8, 8), block=(7, 7), overlap_ratio=0.5)
    t0 = time.perf_counter()
    model = train(train_ds, cfg, workers=WORKERS)
    print(f"\ntrained PCANet-2 in {time.perf_counter() - t0:.1f} s")
    for i, bank in enumerate(model.banks, 1):
        print(f"  stage {i}: {bank.count} filters of {bank.k1}x{bank.k2}")

    # one image through the cascade
    img = test.images[:1]
    r1 = correlate_stack(img, model.banks[0].filters)[0]
    print(f"\nstage-1 maps: {r1.shape}, response range [{r1.min():.2f}, {r1.max():.2f}]")
    codes = encode(model, img)[0]
    print(f"hashed codes: {codes.shape}, {len(np.unique(codes))} distinct values in [0, 256)")
    f = extract_features(model, img)[0]
    print(f"feature: {f.size} dims, {np.count_nonzero(f)} nonzero "
          f"(= L1 x 2^L2 x blocks = 8 x 256 x {cfg.n_blocks(*train_ds.image_shape)})")

    print("\nclassification error (%):")
    for label, net_cfg in (
        ("PCANet-2", cfg),
        ("RandNet-2", NetworkConfig.create(k=7, filters=(8, 8), block=(7, 7), provenance="random", seed=0)),
        ("LDANet-2", NetworkConfig.create(k=7, filters=(8, 8), block=(7, 7), provenance="lda")),
    ):
        net = model if net_cfg is cfg else train(train_ds, net_cfg, workers=WORKERS)
        ftr = extract_features(net, train_ds.images, workers=WORKERS, as_sparse=True)
        fte = extract_features(net, test.images, workers=WORKERS, as_sparse=True)
        svm = svm_train(ftr, train_ds.labels, C=1.0, epochs=10, seed=0)
        svm_err = 100 * np.mean(svm_predict(svm, fte) != test.labels)
        index = GalleryIndex(ftr.toarray(), train_ds.labels)
        nn = np.array([nn_classify(index, row) for row in fte.toarray()])
        nn_err = 100 * np.mean(nn != test.labels)
        print(f"  {label:10s} linear SVM {svm_err:5.2f}   chi-square NN {nn_err:5.2f}")


if __name__ == "__main__":
    main(sys.argv)

"""How block size trades accuracy for tolerance to shifts and occlusion.

    python3 demos/robustness.py

The filters stay fixed; only the histogram block size changes.  Bigger
blocks pool codes over a wider area, so a small translation moves fewer
codes across block borders.  The curves below show test accuracy as the
probe images are shifted horizontally, and then occluded.
"""

import os

from pcanet import NetworkConfig, train
from pcanet.dataio import parse_sweep
from pcanet.experiments import robustness_curve, select_block_size
from shapes import make_shapes

WORKERS = os.cpu_count() or 1


def show(title, curves):
    print(title)
    labels = [r["deformation"] for r in next(iter(curves.values()))]
    print("  " + "block".ljust(7) + "".join(f"{lab:>16s}" for lab in labels))
    for block, rows in curves.items():
        print("  " + block.ljust(7) + "".join(f"{r['accuracy']:16.1f}" for r in rows))
    print()


def main():
    train_ds = make_shapes(400, seed=0)
    valid = make_shapes(200, seed=2, split="valid")
    test = make_shapes(200, seed=1, split="test")
    base = NetworkConfig.create(k=7, filters=(8, 8), block=(7, 7), overlap_ratio=0.5)
    model = train(train_ds, base, workers=WORKERS)

    blocks = {"4x4": (4, 4), "7x7": (7, 7), "14x14": (14, 14)}
    for title, sweep in (("accuracy (%) under horizontal shift", "translate_x:-4..4"),
                         ("accuracy (%) under occlusion", "occlude:0,0.2,0.4,0.6")):
        curves = {}
        for name, (bh, bw) in blocks.items():
            geom = NetworkConfig.create(k=7, filters=(8, 8), block=(bh, bw), overlap_ratio=0.5)
            curves[name] = robustness_curve(model, train_ds, test, parse_sweep(sweep),
                                            workers=WORKERS, config=geom)
        show(title, curves)

    best, errors = select_block_size(model, train_ds, valid, workers=WORKERS)
    print("validation error (%) by block size:", errors)
    print(f"selected block {best[0]}x{best[1]}")


if __name__ == "__main__":
    main()

"""Learn filters and write them out as images.

    python3 demos/filter_export.py [out_dir]

PCA filters learned on strokes look like smooth oriented gradients and
blob detectors, ordered by the energy they capture.  Patches are mean-removed
before learning, so no filter is a plain average.  Random filters look like
noise.  Both grids are written as PGM so any image
viewer can open them; the same grids can be produced from a model file with
``pcanet filters``.
"""

import os
import sys

import numpy as np

from pcanet import NetworkConfig, filter_grid, train, write_pnm
from shapes import make_shapes


def ascii_tile(tile):
    shades = " .:-=+*#%@"
    t = (tile - tile.min()) / max(np.ptp(tile), 1e-12)
    return ["".join(shades[int(v * (len(shades) - 1))] for v in row) for row in t]


def main(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    data = make_shapes(300, seed=0)
    for prov in ("pca", "random"):
        cfg = NetworkConfig.create(k=7, filters=(8, 8), block=(7, 7), provenance=prov,
                                   seed=0 if prov == "random" else None)
        model = train(data, cfg)
        for i, bank in enumerate(model.banks, 1):
            path = os.path.join(out_dir, f"{prov}_stage{i}.pgm")
            write_pnm(path, filter_grid(bank, gap=1))
            print(f"wrote {path}")
        first = model.banks[0].filters
        print(f"\n{prov} stage-1 filters 1-3:")
        tiles = [ascii_tile(f) for f in first[:3]]
        for rows in zip(*tiles):
            print("   ".join(rows))
        print()


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "filter_images")

import csv
import io
import json

import numpy as np
import pytest

from pcanet.cli import build_parser, main
from pcanet.dataio import idx_bytes, read_features
from pcanet.imaging import read_pnm, write_pnm
from pcanet.network import load_model


def digits(n, seed):
    """Two classes of 12x12 images: a bright vertical or horizontal bar plus noise."""
    g = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    imgs = g.uniform(0, 0.2, size=(n, 12, 12))
    for img, lab in zip(imgs, labels):
        pos = g.integers(3, 9)
        if lab:
            img[pos, 2:10] = 1.0
        else:
            img[2:10, pos] = 1.0
    return (imgs * 255).astype(np.uint8), labels


@pytest.fixture()
def data(tmp_path):
    for stem, n, seed in (("tr", 40, 0), ("te", 20, 1)):
        imgs, labels = digits(n, seed)
        (tmp_path / f"{stem}-img").write_bytes(idx_bytes(images=imgs))
        (tmp_path / f"{stem}-lbl").write_bytes(idx_bytes(labels=labels))
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("\n".join([
        f"train_images={tmp_path / 'tr-img'}", f"train_labels={tmp_path / 'tr-lbl'}",
        f"test_images={tmp_path / 'te-img'}", f"test_labels={tmp_path / 'te-lbl'}",
        "k1=3", "k2=3", "L1=4", "L2=4", "block_h=4", "block_w=4", "workers=1",
        f"model_path={tmp_path / 'model.pcnt'}",
    ]) + "\n")
    return tmp_path, str(cfg)


def run(args):
    out = io.StringIO()
    code = main(args, out)
    return code, (json.loads(out.getvalue()) if code == 0 else None)


# ---- train


def test_train_writes_model_and_report(data):
    tmp, cfg = data
    code, rep = run(["train", "--config", cfg])
    assert code == 0
    assert rep["feature_dim"] == 16 * 4 * 25 and rep["train_count"] == 40
    assert rep["timings"]["filter_learning"] > 0
    assert rep["config"]["k1"] == 3 and rep["seeds"] == {"filter_seed": 0, "seed": 0}
    assert load_model(tmp / "model.pcnt").config.feature_dim(12, 12) == rep["feature_dim"]


def test_randnet_zero_filter_learning_time(data):
    _, cfg = data
    code, rep = run(["train", "--config", cfg, "--provenance", "random", "--filter-seed", "5"])
    assert code == 0 and rep["timings"]["filter_learning"] == 0.0


def test_missing_dataset_fails_before_compute(data, tmp_path):
    _, cfg = data
    model = tmp_path / "never.pcnt"
    assert main(["train", "--config", cfg, "--train_images", str(tmp_path / "gone"),
                 "--model_path", str(model)]) == 1
    assert not model.exists()


def test_flag_overrides_config_file(data):
    _, cfg = data
    code, rep = run(["train", "--config", cfg, "--k1", "5", "--k2", "5"])
    assert code == 0 and rep["config"]["k1"] == 5


def test_help_documents_precedence():
    text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    assert "--config file < command-line flag" in " ".join(text.split())


def test_usage_errors_exit_1(data):
    _, cfg = data
    assert main(["nonsense"]) == 1
    assert main(["train", "--config", cfg, "--k1", "x"]) == 1
    assert main(["train", "--config", cfg, "--L1", "0"]) == 1


# ---- eval


def test_eval_svm_and_reproducible(data):
    _, cfg = data
    run(["train", "--config", cfg])
    code, rep = run(["eval", "--config", cfg, "--svm_epochs", "20"])
    assert code == 0
    test = rep["splits"]["test"]
    assert test["accuracy"] >= 90
    assert test["error"] == round(100 - test["accuracy"], 2)
    _, again = run(["eval", "--config", cfg, "--svm_epochs", "20"])
    assert again["splits"] == rep["splits"]


def test_eval_gallery_equals_probe(data):
    tmp, cfg = data
    run(["train", "--config", cfg])
    for metric in ("nn-chi-square", "nn-cosine"):
        code, rep = run(["eval", "--config", cfg, "--classifier", metric,
                         "--test_images", str(tmp / "tr-img"), "--test_labels", str(tmp / "tr-lbl")])
        assert code == 0 and rep["splits"]["test"]["accuracy"] == 100.0


def test_eval_empty_probe(data):
    tmp, cfg = data
    run(["train", "--config", cfg])
    (tmp / "e-img").write_bytes(idx_bytes(images=np.zeros((0, 12, 12), dtype=np.uint8)))
    (tmp / "e-lbl").write_bytes(idx_bytes(labels=np.zeros(0)))
    assert main(["eval", "--config", cfg, "--test_images", str(tmp / "e-img"),
                 "--test_labels", str(tmp / "e-lbl")]) == 1


def test_eval_missing_model(data, tmp_path):
    _, cfg = data
    assert main(["eval", "--config", cfg, "--model_path", str(tmp_path / "none.pcnt")]) == 1


def test_corrupt_model_exit_3(data):
    tmp, cfg = data
    run(["train", "--config", cfg])
    raw = bytearray((tmp / "model.pcnt").read_bytes())
    raw[-12] ^= 1
    (tmp / "model.pcnt").write_bytes(bytes(raw))
    assert main(["eval", "--config", cfg]) == 3
    (tmp / "model.pcnt").write_bytes(b"JUNK")
    assert main(["filters", "--config", cfg]) == 3


def test_report_path_written(data):
    tmp, cfg = data
    code, rep = run(["train", "--config", cfg, "--report_path", str(tmp / "r.json")])
    assert json.loads((tmp / "r.json").read_text()) == rep


# ---- extract


def test_extract_pcfv(data):
    tmp, cfg = data
    run(["train", "--config", cfg])
    code, rep = run(["extract", "--config", cfg, "--features_path", str(tmp / "f.pcfv"),
                     "--extract_split", "test"])
    assert code == 0 and (rep["rows"], rep["cols"]) == (20, 1600)
    f = read_features(tmp / "f.pcfv")
    assert f.shape == (20, 1600) and np.all(f.reshape(20, -1, 16).sum(axis=2) == 16)
    assert main(["extract", "--config", cfg, "--extract_split", "valid"]) == 1


# ---- robustness


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_identity_sweep_matches_eval(data):
    tmp, cfg = data
    run(["train", "--config", cfg])
    _, ev = run(["eval", "--config", cfg])
    code, rob = run(["robustness", "--config", cfg, "--sweep", "identity",
                     "--csv_path", str(tmp / "r.csv")])
    assert code == 0
    assert rob["sweep"][0]["accuracy"] == ev["splits"]["test"]["accuracy"]
    assert len(read_csv(tmp / "r.csv")) == 1


def test_occlusion_csv_one_row_per_level(data):
    tmp, cfg = data
    run(["train", "--config", cfg])
    code, _ = run(["robustness", "--config", cfg, "--sweep", "occlude:0,0.2,0.4,0.6,0.8",
                   "--classifier", "nn-chi-square", "--csv_path", str(tmp / "o.csv")])
    rows = read_csv(tmp / "o.csv")
    assert code == 0
    assert [r["deformation"] for r in rows] == ["occlude(0)"] + [f"occlude({v})" for v in (0.2, 0.4, 0.6, 0.8)]
    assert list(rows[0]) == ["block", "deformation", "accuracy", "error"]


def test_two_block_sizes_two_curves(data):
    tmp, cfg = data
    run(["train", "--config", cfg])
    code, rep = run(["robustness", "--config", cfg, "--sweep", "translate_x:-1..1",
                     "--compare_blocks", "4x4,6x6", "--csv_path", str(tmp / "b.csv")])
    rows = read_csv(tmp / "b.csv")
    assert code == 0 and len(rows) == 6
    assert [r["block"] for r in rows] == ["4x4"] * 3 + ["6x6"] * 3
    assert rows[0]["deformation"] == "translate(-1,0)"


# ---- filters


def test_filters_two_rows_roundtrip(data):
    tmp, cfg = data
    run(["train", "--config", cfg])
    code, rep = run(["filters", "--config", cfg, "--filters_dir", str(tmp / "fig")])
    assert code == 0
    names = [f["path"].rsplit("/", 1)[1] for f in rep["files"]]
    assert names == ["stage1.pgm", "stage2.pgm", "filters.pgm"]
    for f in rep["files"]:
        assert list(read_pnm(f["path"]).shape) == f["shape"]
    fig = read_pnm(tmp / "fig" / "filters.pgm")
    # two filter rows of height 3 separated by a one-pixel gap
    assert fig.shape[0] == 3 + 1 + 3


def test_filters_multichannel_ppm(tmp_path):
    g = np.random.default_rng(0)
    lines = []
    for i in range(4):
        write_pnm(tmp_path / f"c{i}.ppm", g.uniform(size=(3, 8, 8)))
        lines.append(f"c{i}.ppm\t{i % 2}\ttrain")
    (tmp_path / "m.tsv").write_text("\n".join(lines) + "\n")
    args = ["--image_root", str(tmp_path), "--manifest", str(tmp_path / "m.tsv"), "--channels", "3",
            "--k1", "3", "--k2", "3", "--L1", "3", "--L2", "2", "--block_h", "4", "--block_w", "4",
            "--model_path", str(tmp_path / "rgb.pcnt")]
    assert main(["train"] + args) == 0
    code, rep = run(["filters"] + args + ["--filters_dir", str(tmp_path / "out")])
    assert code == 0
    paths = [f["path"] for f in rep["files"]]
    assert paths[0].endswith("stage1.ppm") and paths[-1].endswith("filters.ppm")
    assert read_pnm(paths[0]).shape[0] == 3


# ---- bench


def test_bench_single_image_well_formed(data):
    _, cfg = data
    code, rep = run(["bench", "--config", cfg, "--bench_filters", "2x2,4x2", "--bench_images", "1",
                     "--bench_size", "16", "--bench_repeats", "1", "--bench_ks", "3,5"])
    assert code == 0
    rows = rep["filters"]["rows"]
    assert [(r["L1"], r["L2"]) for r in rows] == [(2, 2), (4, 2)]
    assert all(r["per_map_s"] > 0 for r in rows)
    assert np.isfinite(rep["filters"]["per_map_slope"])
    assert len(rep["patch_size"]["rows"]) == 2


def test_bench_bad_grid(data):
    _, cfg = data
    assert main(["bench", "--config", cfg, "--bench_filters", "axb"]) == 1
    assert main(["bench", "--config", cfg, "--bench_filters", ""]) == 1

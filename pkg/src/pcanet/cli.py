"""``pcanet`` command line: train, eval, extract, robustness, filters, bench."""

import argparse
import csv
import dataclasses
import json
import os
import sys
import time

import numpy as np

from .classify import sqrt_transform, svm_predict, svm_train
from .dataio import (
    ExperimentConfig, load_config, load_datasets, parse_sweep, translation_sweep,
    write_feature_chunks,
)
from .errors import DataIntegrityError, DatasetError, InvalidConfigError, InvalidInputError, PCANetError
from .experiments import (
    EVAL_CHUNK, complexity_benchmark, nn_accuracy, nn_predictor, patch_size_benchmark,
    robustness_curve, score_entry, svm_accuracy,
)
from .filters import filter_grid
from .imaging import write_pnm
from .network import extract_features, load_model, save_model, train

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_INTEGRITY = 0, 1, 2, 3

PRECEDENCE = ("Every config key is also a flag (--key value, or --key-with-dashes). "
              "Precedence: built-in default < --config file < command-line flag.")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse would exit with status 2, which is reserved for runtime errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _workers(cfg):
    return cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)


def _seeds(cfg):
    return {"filter_seed": cfg.filter_seed, "seed": cfg.seed}


def _pairs(text, sep="x"):
    out = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        parts = item.split(sep)
        try:
            nums = tuple(int(p) for p in parts)
        except ValueError as exc:
            raise InvalidConfigError(f"bad pair {item!r}") from exc
        out.append(nums * 2 if len(nums) == 1 else nums)
    return out


def _report(cfg, command, **body):
    return {"command": command, "config": dataclasses.asdict(cfg), "seeds": _seeds(cfg), **body}


def _require_model(cfg):
    if not cfg.model_path or not os.path.exists(cfg.model_path):
        raise InvalidConfigError(f"model file {cfg.model_path!r} not found")
    return load_model(cfg.model_path)


def _test_set(test):
    if test is None or len(test) == 0:
        raise InvalidInputError("empty probe/test set")
    return test


# --------------------------------------------------------------------------
# commands


def cmd_train(cfg):
    cfg.validate(need_train=True)
    t0 = time.perf_counter()
    train_ds, _ = load_datasets(cfg)
    t_load = time.perf_counter() - t0
    model = train(train_ds, cfg.network_config(), workers=_workers(cfg))
    save_model(model, cfg.model_path)
    m, n = model.image_shape
    timings = {"load": t_load, **model.timings, "total": time.perf_counter() - t0}
    return _report(cfg, "train", model_path=cfg.model_path, train_count=len(train_ds),
                   feature_dim=model.config.feature_dim(m, n), timings=timings)


def cmd_eval(cfg):
    cfg.validate(need_train=True)
    model = _require_model(cfg)
    t0 = time.perf_counter()
    train_ds, test = load_datasets(cfg)
    test = _test_set(test)
    workers = _workers(cfg)
    timings = {"load": time.perf_counter() - t0}
    t1 = time.perf_counter()
    if cfg.classifier == "svm":
        feats = extract_features(model, train_ds.images, workers, as_sparse=True)
        if cfg.sqrt:
            feats = sqrt_transform(feats)
        svm = svm_train(feats, train_ds.labels, C=cfg.svm_C, epochs=cfg.svm_epochs, seed=cfg.seed)
        train_acc = float(np.mean(svm_predict(svm, feats) == train_ds.labels))
        timings["fit"] = time.perf_counter() - t1
        t2 = time.perf_counter()
        test_acc = svm_accuracy(model, svm, test, workers, use_sqrt=cfg.sqrt)
        splits = {"train": score_entry(train_acc), "test": score_entry(test_acc)}
    elif cfg.classifier in ("nn-chi-square", "nn-cosine"):
        predict = nn_predictor(model, train_ds, cfg.classifier[3:], cfg.wpca_dim, cfg.sqrt, workers)
        timings["fit"] = time.perf_counter() - t1
        t2 = time.perf_counter()
        splits = {"test": score_entry(nn_accuracy(predict, test))}
    else:
        raise InvalidConfigError(f"unknown classifier {cfg.classifier!r}")
    timings["predict"] = time.perf_counter() - t2
    timings["total"] = time.perf_counter() - t0
    return _report(cfg, "eval", splits=splits, timings=timings)


def cmd_extract(cfg):
    cfg.validate(need_train=cfg.extract_split == "train", need_test=cfg.extract_split == "test")
    if cfg.extract_split not in ("train", "test"):
        raise InvalidConfigError("extract_split must be train or test")
    model = _require_model(cfg)
    t0 = time.perf_counter()
    train_ds, test = load_datasets(cfg)
    ds = train_ds if cfg.extract_split == "train" else _test_set(test)
    m, n = ds.image_shape
    cols = model.config.feature_dim(m, n)
    workers = _workers(cfg)

    def chunks():
        for lo in range(0, len(ds), EVAL_CHUNK):
            f = extract_features(model, ds.images[lo:lo + EVAL_CHUNK], workers)
            yield np.sqrt(f) if cfg.sqrt else f

    write_feature_chunks(cfg.features_path, len(ds), cols, chunks())
    return _report(cfg, "extract", features_path=cfg.features_path, rows=len(ds), cols=cols,
                   timings={"total": time.perf_counter() - t0})


def cmd_robustness(cfg):
    cfg.validate(need_train=True)
    model = _require_model(cfg)
    t0 = time.perf_counter()
    train_ds, test = load_datasets(cfg)
    test = _test_set(test)
    sweep = parse_sweep(cfg.sweep) if cfg.sweep else translation_sweep(4)
    blocks = _pairs(cfg.compare_blocks) or [(model.config.block_h, model.config.block_w)]
    metric = cfg.classifier[3:] if cfg.classifier.startswith("nn-") else "chi-square"
    rows = []
    for bh, bw in blocks:
        geom = dataclasses.replace(model.config, block_h=bh, block_w=bw)
        curve = robustness_curve(model, train_ds, test, sweep, classifier=cfg.classifier,
                                 C=cfg.svm_C, epochs=cfg.svm_epochs, seed=cfg.seed,
                                 workers=_workers(cfg), metric=metric, wpca_dim=cfg.wpca_dim,
                                 use_sqrt=cfg.sqrt, config=geom)
        rows.extend({"block": f"{bh}x{bw}", **r} for r in curve)
    with open(cfg.csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["block", "deformation", "accuracy", "error"])
        writer.writeheader()
        writer.writerows(rows)
    return _report(cfg, "robustness", csv_path=cfg.csv_path, sweep=rows,
                   timings={"total": time.perf_counter() - t0})


def filters_figure(model, gap=1):
    """One row per stage, each row the stage's filters side by side."""
    grids = [filter_grid(b, gap) for b in model.banks]
    rgb = any(g.ndim == 3 for g in grids)
    if rgb:
        grids = [g if g.ndim == 3 else np.repeat(g[None], 3, axis=0) for g in grids]
    height = sum(g.shape[-2] for g in grids) + gap * (len(grids) - 1)
    width = max(g.shape[-1] for g in grids)
    out = np.zeros(((3,) if rgb else ()) + (height, width))
    r0 = 0
    for g in grids:
        out[..., r0:r0 + g.shape[-2], :g.shape[-1]] = g
        r0 += g.shape[-2] + gap
    return out


def cmd_filters(cfg):
    model = _require_model(cfg)
    os.makedirs(cfg.filters_dir, exist_ok=True)
    files = []
    for i, bank in enumerate(model.banks, 1):
        grid = filter_grid(bank)
        path = os.path.join(cfg.filters_dir, f"stage{i}." + ("ppm" if grid.ndim == 3 else "pgm"))
        write_pnm(path, grid)
        files.append({"path": path, "shape": list(grid.shape)})
    fig = filters_figure(model)
    path = os.path.join(cfg.filters_dir, "filters." + ("ppm" if fig.ndim == 3 else "pgm"))
    write_pnm(path, fig)
    files.append({"path": path, "shape": list(fig.shape)})
    return _report(cfg, "filters", files=files)


def cmd_bench(cfg):
    t0 = time.perf_counter()
    pairs = _pairs(cfg.bench_filters)
    if not pairs:
        raise InvalidConfigError("bench_filters is empty")
    report = {"filters": complexity_benchmark(pairs, k=cfg.bench_k, size=cfg.bench_size,
                                              n_images=cfg.bench_images, repeats=cfg.bench_repeats,
                                              seed=cfg.seed)}
    ks = [int(v) for v in cfg.bench_ks.split(",") if v.strip()]
    if ks:
        report["patch_size"] = patch_size_benchmark(ks, size=cfg.bench_size,
                                                    n_images=max(1, cfg.bench_images // 2),
                                                    repeats=max(1, cfg.bench_repeats // 2),
                                                    seed=cfg.seed)
    report["timings"] = {"total": time.perf_counter() - t0}
    return _report(cfg, "bench", **report)


COMMANDS = {
    "train": (cmd_train, "learn filter banks and write a model file"),
    "eval": (cmd_eval, "classify the test/probe split with a trained model"),
    "extract": (cmd_extract, "write features to a PCFV matrix file"),
    "robustness": (cmd_robustness, "accuracy under a sweep of deformations, as CSV"),
    "filters": (cmd_filters, "export filter banks as PGM/PPM images"),
    "bench": (cmd_bench, "extraction-time scaling benchmark"),
}


def build_parser():
    parser = _Parser(prog="pcanet", description=__doc__, epilog=PRECEDENCE)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=PRECEDENCE)
        p.add_argument("--config", help="key=value config file")
        for f in dataclasses.fields(ExperimentConfig):
            flags = [f"--{f.name}"]
            if "_" in f.name:
                flags.append(f"--{f.name.replace('_', '-')}")
            p.add_argument(*flags, dest=f.name, default=None, metavar=f.name.upper(),
                           help=f"(default: {f.default!r})")
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    keys = {f.name for f in dataclasses.fields(ExperimentConfig)}
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: v for k, v in vars(args).items() if k in keys and v is not None}
        cfg = load_config(args.config, overrides)
        report = COMMANDS[args.command][0](cfg)
        text = json.dumps(report, indent=2, default=str)
        if cfg.report_path:
            with open(cfg.report_path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        out.write(text + "\n")
        return EXIT_OK
    except DataIntegrityError as exc:
        print(f"data integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (UsageError, InvalidConfigError, InvalidInputError, DatasetError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        for problem in getattr(exc, "problems", ()):
            print(f"  {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except (PCANetError, OSError, RuntimeError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

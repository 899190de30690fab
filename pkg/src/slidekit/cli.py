"""Command-line surface tying the pipeline together.

Every command prints a single-line JSON summary to stdout and writes its
artifacts under --out. Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import embed_diag, io_formats, linear_probe, mini_dino, slide_pipeline
from .config import DEFAULTS, RunConfig, default_target
from .errors import DataError, SlidekitError
from .stain_norm import fit_target, normalize_patch
from .synth_slides import CohortSpec, generate_cohort


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(parser, prefixes):
    parser.add_argument("--config", help="key=value run config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1,
                        help="accepted for interface compatibility; "
                             "execution is single-threaded")
    for key, default in DEFAULTS.items():
        if any(key.startswith(p + ".") for p in prefixes):
            parser.add_argument(f"--{key}", dest=key, default=None, metavar="V",
                                help=f"override config key (default {default!r})")


def _load_config(args, prefixes) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for key in DEFAULTS:
        if any(key.startswith(p + ".") for p in prefixes):
            value = getattr(args, key, None)
            if value is not None:
                cfg.set(key, value)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _resolve_target(cfg: RunConfig):
    path = cfg.get("dino.macenko_target")
    return io_formats.load_target_json(path) if path else default_target()


def cmd_tile(args) -> None:
    cfg = _load_config(args, ["tile", "stain"])
    out = _out_dir(args)
    slide = io_formats.load_slide(args.slide)
    mask = slide_pipeline.compute_tissue_mask(
        slide,
        median_radius=cfg.get("tile.median_radius"),
        min_region_area=cfg.get("tile.min_region_area"),
        downsample=cfg.get("tile.mask_downsample"),
    )
    grid = slide_pipeline.plan_patch_grid(
        slide, cfg.get("tile.target_mpp"), cfg.get("tile.target_size"), mask,
        cfg.get("tile.min_tissue_fraction"),
    )
    patches = slide_pipeline.extract_patches(slide, grid)
    patch_dir = out / "patches"
    patch_dir.mkdir(exist_ok=True)
    for (x, y), patch in zip(grid.coords, patches):
        io_formats.save_patch_png(patch_dir / f"patch_x{x:06d}_y{y:06d}.png", patch)
    io_formats.write_grid_csv(out / "grid.csv", grid)
    from PIL import Image

    Image.fromarray((mask.bits * np.uint8(255))).save(out / "mask.png")
    _emit({"command": "tile", "slide": slide.name, "patches": len(patches),
           "extraction_size": grid.extraction_size, "out": str(out)})


def cmd_fit_target(args) -> None:
    cfg = _load_config(args, ["stain"])
    out = _out_dir(args)
    reference = io_formats.load_patch_png(args.reference)
    target = fit_target(reference, alpha=cfg.get("stain.alpha"),
                        beta=cfg.get("stain.beta"), io=cfg.get("stain.io"))
    path = out / "target.json"
    io_formats.save_target_json(target, path)
    _emit({"command": "fit-target", "target": str(path),
           "h": [float(v) for v in target.basis.h_vector],
           "e": [float(v) for v in target.basis.e_vector]})


def cmd_normalize(args) -> None:
    cfg = _load_config(args, ["stain"])
    out = _out_dir(args)
    target = io_formats.load_target_json(args.target)
    files = sorted(Path(args.patch_dir).glob("*.png"))
    if not files:
        raise DataError(f"{args.patch_dir}: no .png patches found")
    skipped = []
    for f in files:
        patch = io_formats.load_patch_png(f)
        try:
            normed = normalize_patch(patch, target, alpha=cfg.get("stain.alpha"),
                                     beta=cfg.get("stain.beta"))
        except SlidekitError as exc:
            skipped.append((f.name, str(exc)))
            continue
        io_formats.save_patch_png(out / f.name, normed)
    with open(out / "skipped.log", "w") as fh:
        for name, reason in skipped:
            fh.write(f"{name}\t{reason}\n")
    _emit({"command": "normalize", "normalized": len(files) - len(skipped),
           "skipped": len(skipped), "out": str(out)})


def cmd_stats_mpp(args) -> None:
    cfg = _load_config(args, ["tile"])
    out = _out_dir(args)
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{args.manifest}: invalid manifest: {exc}") from exc
    if "slides" in manifest:
        stats = [(float(s["mpp"]), int(s["patch_count"])) for s in manifest["slides"]]
    elif "patch_files" in manifest:
        stats = [(float(manifest.get("mpp", 0.5)), len(manifest["patch_files"]))]
    else:
        raise DataError(f"{args.manifest}: expected 'slides' or 'patch_files' key")
    bins = slide_pipeline.mpp_histogram(stats, bin_width=cfg.get("tile.bin_width"))
    io_formats.write_mpp_histogram_csv(out / "mpp_histogram.csv", bins)
    _emit({"command": "stats-mpp", "bins": len(bins),
           "total_patches": sum(n for _, _, n in bins), "out": str(out)})


def cmd_synth(args) -> None:
    cfg = _load_config(args, ["synth"])
    out = _out_dir(args)
    spec = CohortSpec(
        n_wsis=cfg.get("synth.n_wsis"),
        patches_per_wsi=cfg.get("synth.patches_per_wsi"),
        patch_size=cfg.get("synth.patch_size"),
        n_content_classes=cfg.get("synth.n_content_classes"),
        stain_perturbation_deg=cfg.get("synth.stain_perturbation_deg"),
        intensity_jitter=(cfg.get("synth.jitter_lo"), cfg.get("synth.jitter_hi")),
        noise_sigma=cfg.get("synth.noise_sigma"),
        seed=args.seed,
    )
    cohort = generate_cohort(spec)
    io_formats.save_cohort(out, cohort)
    _emit({"command": "synth", "patches": len(cohort.patches),
           "n_wsis": spec.n_wsis, "out": str(out)})


def cmd_train(args) -> None:
    cfg = _load_config(args, ["dino", "stain"])
    out = _out_dir(args)
    patches, _, _, _ = io_formats.load_cohort(args.cohort)
    target = _resolve_target(cfg) if cfg.get("dino.macenko_enabled") else None
    dino_cfg = cfg.dino_config(macenko_target=target)
    state, history = mini_dino.train_run(patches, dino_cfg, seed=args.seed)
    io_formats.write_checkpoint(out / "checkpoint.mdck", state.teacher,
                                state.center, state.step)
    io_formats.write_loss_csv(out / "loss.csv", history)
    _emit({"command": "train", "iterations": len(history),
           "final_loss": history[-1][2] if history else None,
           "checkpoint": str(out / "checkpoint.mdck")})


def cmd_embed(args) -> None:
    cfg = _load_config(args, ["dino", "stain"])
    out = _out_dir(args)
    params, center, step = io_formats.read_checkpoint(args.checkpoint)
    patches, wsi_ids, _, names = io_formats.load_cohort(args.cohort)
    target = _resolve_target(cfg) if cfg.get("dino.macenko_enabled") else None
    dino_cfg = cfg.dino_config(macenko_target=target)
    state = mini_dino.TeacherStudentState(student=params, teacher=params,
                                          center=center, step=step)
    fs, skipped = mini_dino.embed_patches(state, patches, wsi_ids, dino_cfg,
                                          manifest=names or None)
    path = out / "features.fvec"
    io_formats.write_feature_file(path, fs)
    _emit({"command": "embed", "n": fs.n, "d": fs.d, "skipped": len(skipped),
           "features": str(path)})


def cmd_diagnose(args) -> None:
    cfg = _load_config(args, ["diag"])
    out = _out_dir(args)
    fs = io_formats.read_feature_file(args.features)
    k = args.k if args.k is not None else cfg.get("diag.k")
    metrics = {
        "knn_purity": embed_diag.knn_wsi_purity(fs, k=k),
        "silhouette": embed_diag.silhouette_wsi(fs),
        "n": fs.n,
        "d": fs.d,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True) + "\n")
    _emit({"command": "diagnose", **metrics})


def cmd_tsne(args) -> None:
    cfg = _load_config(args, ["tsne"])
    out = _out_dir(args)
    fs = io_formats.read_feature_file(args.features)
    perplexity = args.perplexity if args.perplexity is not None \
        else cfg.get("tsne.perplexity")
    iterations = args.iters if args.iters is not None else cfg.get("tsne.iterations")
    emb = embed_diag.tsne_embed(fs, perplexity=perplexity, iterations=iterations,
                                learning_rate=cfg.get("tsne.learning_rate"),
                                seed=args.seed)
    io_formats.write_embedding_csv(out / "embedding.csv", emb, fs)
    io_formats.write_kl_csv(out / "kl.csv", emb.kl_history)
    _emit({"command": "tsne", "n": fs.n, "final_kl": float(emb.kl_history[-1]),
           "out": str(out)})


def _labeled_split(features_path, labels_by_row, n_classes):
    fs = io_formats.read_feature_file(features_path)
    labels = np.asarray(labels_by_row, dtype=np.int64)
    if labels.shape[0] != fs.n:
        raise DataError(f"{features_path}: {fs.n} rows but {labels.shape[0]} labels")
    return linear_probe.LabeledFeatureSet(features=fs, labels=labels,
                                          n_classes=n_classes)


def cmd_probe(args) -> None:
    cfg = _load_config(args, ["probe"])
    out = _out_dir(args)
    import csv as _csv

    rows = {"train": [], "val": [], "test": []}
    try:
        with open(args.labels, newline="") as fh:
            for row in _csv.DictReader(fh):
                rows[row["split"]].append((int(row["row"]), int(row["label"])))
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{args.labels}: invalid labels CSV "
                        f"(need split,row,label): {exc}") from exc
    for split in rows:
        rows[split].sort()
    all_labels = [l for split in rows.values() for _, l in split]
    if not all_labels:
        raise DataError(f"{args.labels}: no label rows")
    n_classes = max(all_labels) + 1
    train = _labeled_split(args.train_features, [l for _, l in rows["train"]], n_classes)
    val = _labeled_split(args.val_features, [l for _, l in rows["val"]], n_classes)
    test = _labeled_split(args.test_features, [l for _, l in rows["test"]], n_classes)
    probe_cfg = cfg.probe_config(seed=args.seed)
    weights = linear_probe.train_probe(train, val, probe_cfg)
    val_acc = linear_probe.evaluate_accuracy(weights, val)
    test_acc = linear_probe.evaluate_accuracy(weights, test)
    name = args.dataset_name
    io_formats.write_results_csv(out / "results.csv", [
        (name, "val", f"{val_acc:.6f}", probe_cfg.iterations, args.seed),
        (name, "test", f"{test_acc:.6f}", probe_cfg.iterations, args.seed),
    ])
    io_formats.write_checkpoint(
        out / "probe.mdck",
        mini_dino.EncoderParams(weights=[weights.w], biases=[weights.b]),
        np.zeros(n_classes), probe_cfg.iterations)
    _emit({"command": "probe", "val_accuracy": val_acc, "test_accuracy": test_acc,
           "out": str(out)})


def build_parser() -> _Parser:
    parser = _Parser(prog="slidekit",
                     description="Histopathology preprocessing and "
                                 "collapse diagnostics toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="tissue-mask and tile a slide")
    p.add_argument("slide")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["tile", "stain"])
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("fit-target", help="fit a Macenko target from a reference")
    p.add_argument("reference")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["stain"])
    p.set_defaults(func=cmd_fit_target)

    p = sub.add_parser("normalize", help="Macenko-normalize a patch directory")
    p.add_argument("patch_dir")
    p.add_argument("target")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["stain"])
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("stats-mpp", help="MPP histogram from a cohort manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["tile"])
    p.set_defaults(func=cmd_stats_mpp)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["synth"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="mini-DINO self-distillation on a cohort")
    p.add_argument("cohort")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["dino", "stain"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="extract features with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("cohort")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["dino", "stain"])
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("diagnose", help="collapse metrics for a feature file")
    p.add_argument("features")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["diag"])
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("tsne", help="t-SNE embedding of a feature file")
    p.add_argument("features")
    p.add_argument("--perplexity", type=float, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["tsne"])
    p.set_defaults(func=cmd_tsne)

    p = sub.add_parser("probe", help="linear probe on frozen features")
    p.add_argument("train_features")
    p.add_argument("val_features")
    p.add_argument("test_features")
    p.add_argument("labels", help="CSV with header split,row,label")
    p.add_argument("--dataset-name", default="dataset")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["probe"])
    p.set_defaults(func=cmd_probe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except (SlidekitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""File formats: feature container, model checkpoint, target JSON, run
config, slide sidecars, cohort directories, and the CSV emitters.

Binary layouts (all little-endian):
  FeatureFile: magic "FVEC", u16 version=1, u32 n, u32 d, then n records
    of (u32 wsi_id, d x f32); sidecar JSON manifest maps wsi_id -> name.
  Checkpoint: magic "MDCK", u16 version=1, u32 layer count, per layer
    u32 rows, u32 cols, rows*cols f32 weights (row-major), cols f32
    biases; then K f32 center, u64 step.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .mini_dino import EncoderParams
from .slide_pipeline import SlideRaster
from .stain_norm import NormalizationTarget, RgbPatch, StainBasis

FEATURE_MAGIC = b"FVEC"
CHECKPOINT_MAGIC = b"MDCK"
FORMAT_VERSION = 1


def _fmt17(x: float) -> str:
    return format(float(x), ".17g")


def save_target_json(target: NormalizationTarget, path) -> None:
    """Serialize a normalization target with 17-significant-digit numbers."""
    b = target.basis
    text = (
        '{"io": %s, "h": [%s], "e": [%s], "max_c": [%s], "version": 1}\n'
        % (
            _fmt17(target.io),
            ", ".join(_fmt17(v) for v in b.h_vector),
            ", ".join(_fmt17(v) for v in b.e_vector),
            ", ".join(_fmt17(v) for v in b.max_concentrations),
        )
    )
    Path(path).write_text(text)


def load_target_json(path) -> NormalizationTarget:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot parse target JSON: {exc}") from exc
    try:
        if obj["version"] != 1:
            raise DataError(f"{path}: unsupported target version {obj['version']}")
        basis = StainBasis(
            h_vector=np.asarray(obj["h"], dtype=np.float64),
            e_vector=np.asarray(obj["e"], dtype=np.float64),
            max_concentrations=np.asarray(obj["max_c"], dtype=np.float64),
        )
        return NormalizationTarget(basis=basis, io=float(obj["io"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: invalid target JSON: {exc}") from exc


def write_feature_file(path, fs) -> None:
    """Write a FeatureSet to the FVEC container plus its sidecar manifest."""
    n, d = fs.n, fs.d
    rec = np.empty(n, dtype=np.dtype([("wsi", "<u4"), ("vec", "<f4", (d,))]))
    rec["wsi"] = fs.wsi_ids.astype(np.uint32)
    rec["vec"] = fs.vectors.astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<HII", FORMAT_VERSION, n, d))
        fh.write(rec.tobytes())
    manifest = {str(k): str(v) for k, v in fs.manifest.items()}
    Path(str(path) + ".manifest.json").write_text(
        json.dumps(manifest, sort_keys=True) + "\n")


def read_feature_file(path):
    """Read an FVEC container back into a FeatureSet (f32 storage)."""
    from .embed_diag import FeatureSet

    raw = Path(path).read_bytes()
    if len(raw) < 14:
        raise DataError(f"{path}: truncated header at byte {len(raw)}")
    if raw[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic at byte 0: {raw[:4]!r}")
    version, n, d = struct.unpack_from("<HII", raw, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version} at byte 4")
    rec_dtype = np.dtype([("wsi", "<u4"), ("vec", "<f4", (d,))])
    expected = 14 + n * rec_dtype.itemsize
    if len(raw) != expected:
        raise DataError(
            f"{path}: expected {expected} bytes, got {len(raw)} (records at byte 14)"
        )
    rec = np.frombuffer(raw, dtype=rec_dtype, count=n, offset=14)
    manifest_path = Path(str(path) + ".manifest.json")
    if manifest_path.exists():
        manifest = {int(k): v for k, v in json.loads(manifest_path.read_text()).items()}
    else:
        manifest = {int(w): str(w) for w in np.unique(rec["wsi"])}
    return FeatureSet(vectors=rec["vec"].astype(np.float64),
                      wsi_ids=rec["wsi"].astype(np.int64),
                      manifest=manifest)


def write_checkpoint(path, params: EncoderParams, center: np.ndarray,
                     step: int) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(params.weights)))
        for w, b in zip(params.weights, params.biases):
            rows, cols = w.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(w.astype("<f4").tobytes(order="C"))
            fh.write(b.astype("<f4").tobytes())
        fh.write(np.asarray(center, dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", step))


def read_checkpoint(path) -> tuple[EncoderParams, np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic at byte 0")
    version, n_layers = struct.unpack_from("<HI", raw, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    weights, biases = [], []
    try:
        for _ in range(n_layers):
            rows, cols = struct.unpack_from("<II", raw, off)
            off += 8
            w = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=off)
            off += 4 * rows * cols
            b = np.frombuffer(raw, dtype="<f4", count=cols, offset=off)
            off += 4 * cols
            weights.append(w.reshape(rows, cols).astype(np.float64))
            biases.append(b.astype(np.float64))
        k = weights[-1].shape[1]
        center = np.frombuffer(raw, dtype="<f4", count=k, offset=off).astype(np.float64)
        off += 4 * k
        (step,) = struct.unpack_from("<Q", raw, off)
        off += 8
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated checkpoint at byte {off}") from exc
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes at byte {off}")
    return EncoderParams(weights=weights, biases=biases), center, step


# --- slides and patches ---------------------------------------------------


def save_slide(path, slide: SlideRaster) -> None:
    """PNG raster plus a JSON sidecar carrying the MPP metadata."""
    Image.fromarray(slide.pixels).save(path)
    sidecar = {"mpp": slide.mpp, "width": slide.width, "height": slide.height,
               "name": slide.name or Path(path).stem}
    Path(str(path) + ".json").write_text(json.dumps(sidecar) + "\n")


def load_slide(path) -> SlideRaster:
    try:
        pixels = np.asarray(Image.open(path).convert("RGB"))
    except OSError as exc:
        raise DataError(f"{path}: cannot read raster: {exc}") from exc
    sidecar_path = Path(str(path) + ".json")
    try:
        meta = json.loads(sidecar_path.read_text())
        mpp = float(meta["mpp"])
        name = str(meta.get("name", Path(path).stem))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"{sidecar_path}: invalid slide sidecar: {exc}") from exc
    if "width" in meta and (meta["width"], meta["height"]) != (pixels.shape[1], pixels.shape[0]):
        raise DataError(f"{sidecar_path}: sidecar dimensions disagree with raster")
    return SlideRaster(pixels=pixels, mpp=mpp, name=name)


def save_patch_png(path, patch: RgbPatch) -> None:
    Image.fromarray(patch.pixels).save(path)


def load_patch_png(path, mpp: float | None = None) -> RgbPatch:
    try:
        pixels = np.asarray(Image.open(path).convert("RGB"))
    except OSError as exc:
        raise DataError(f"{path}: cannot read patch: {exc}") from exc
    return RgbPatch(pixels=pixels, mpp=mpp)


# --- cohort directories ---------------------------------------------------


def save_cohort(out_dir, cohort) -> None:
    """Cohort layout: manifest JSON, ground-truth CSV, patches/*.png."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    files = []
    for i, patch in enumerate(cohort.patches):
        rel = f"patches/patch_{i:06d}.png"
        save_patch_png(out / rel, patch)
        files.append(rel)
    spec = cohort.spec
    manifest = {
        "mpp": 0.5,
        "wsi_names": {str(k): v for k, v in cohort.manifest.items()},
        "patch_files": files,
        "spec": {
            "n_wsis": spec.n_wsis,
            "patches_per_wsi": spec.patches_per_wsi,
            "patch_size": spec.patch_size,
            "n_content_classes": spec.n_content_classes,
            "stain_perturbation_deg": spec.stain_perturbation_deg,
            "intensity_jitter": list(spec.intensity_jitter),
            "noise_sigma": spec.noise_sigma,
            "seed": spec.seed,
        },
    }
    (out / "cohort.json").write_text(json.dumps(manifest, indent=1) + "\n")
    with open(out / "ground_truth.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_idx", "wsi_id", "content_class"])
        for i, (w, c) in enumerate(zip(cohort.wsi_ids, cohort.content_classes)):
            writer.writerow([i, int(w), int(c)])


def load_cohort(cohort_dir):
    """Load patches + ground truth back from a cohort directory."""
    root = Path(cohort_dir)
    try:
        manifest = json.loads((root / "cohort.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{root / 'cohort.json'}: invalid cohort manifest: {exc}") from exc
    mpp = float(manifest.get("mpp", 0.5))
    patches = [load_patch_png(root / rel, mpp=mpp)
               for rel in manifest["patch_files"]]
    wsi_ids, classes = [], []
    with open(root / "ground_truth.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            wsi_ids.append(int(row["wsi_id"]))
            classes.append(int(row["content_class"]))
    if len(wsi_ids) != len(patches):
        raise DataError(f"{root}: ground truth rows do not match patch count")
    names = {int(k): v for k, v in manifest.get("wsi_names", {}).items()}
    return patches, np.asarray(wsi_ids, dtype=np.int64), \
        np.asarray(classes, dtype=np.int64), names


# --- CSV emitters ---------------------------------------------------------


def write_csv(path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_grid_csv(path, grid) -> None:
    write_csv(path, ["x", "y", "size"],
              ((x, y, grid.extraction_size) for x, y in grid.coords))


def write_mpp_histogram_csv(path, bins) -> None:
    write_csv(path, ["bin_low", "bin_high", "patch_count"],
              ((f"{lo:.6g}", f"{hi:.6g}", n) for lo, hi, n in bins))


def write_loss_csv(path, history) -> None:
    write_csv(path, ["step", "lr", "loss"],
              ((s, f"{lr:.10g}", f"{loss:.10g}") for s, lr, loss in history))


def write_embedding_csv(path, embedding, fs) -> None:
    rows = ((f"{x:.10g}", f"{y:.10g}", int(w), fs.manifest.get(int(w), str(w)))
            for (x, y), w in zip(embedding.points, fs.wsi_ids))
    write_csv(path, ["x", "y", "wsi_id", "wsi_name"], rows)


def write_kl_csv(path, kl_history) -> None:
    write_csv(path, ["iter", "kl"],
              ((i, f"{kl:.10g}") for i, kl in enumerate(kl_history)))


def write_results_csv(path, rows) -> None:
    write_csv(path, ["dataset", "split", "accuracy", "iterations", "seed"], rows)

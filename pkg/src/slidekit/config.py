"""Flat key=value run configuration covering every module default.

A config file holds one ``key = value`` per line ('#' comments allowed);
CLI flags override file values. Unknown keys are rejected by name. Types
are inferred from the defaults table below.
"""

from __future__ import annotations

from pathlib import Path

from .errors import DataError
from .mini_dino import DinoConfig
from .linear_probe import ProbeConfig

DEFAULTS = {
    "stain.alpha": 1.0,
    "stain.beta": 0.15,
    "stain.io": 255.0,
    "tile.target_mpp": 0.5,
    "tile.target_size": 256,
    "tile.min_tissue_fraction": 0.5,
    "tile.mask_downsample": 16,
    "tile.median_radius": 2,
    "tile.min_region_area": 16,
    "tile.bin_width": 0.05,
    "dino.n_local_crops": 8,
    "dino.global_view_size": 32,
    "dino.local_view_size": 12,
    "dino.encoder_input_size": 16,
    "dino.hidden_sizes": "64,32",
    "dino.n_prototypes": 32,
    "dino.student_temp": 0.1,
    "dino.teacher_temp": 0.04,
    "dino.ema_momentum": 0.996,
    "dino.center_momentum": 0.9,
    "dino.batch_size": 32,
    "dino.total_iterations": 300,
    "dino.warmup_iterations": 30,
    "dino.base_lr": 0.02,
    "dino.macenko_enabled": False,
    "dino.macenko_target": "",
    "diag.k": 10,
    "tsne.perplexity": 30.0,
    "tsne.iterations": 1000,
    "tsne.learning_rate": 200.0,
    "probe.lr": 0.1,
    "probe.momentum": 0.9,
    "probe.batch_size": 128,
    "probe.iterations": 12500,
    "synth.n_wsis": 10,
    "synth.patches_per_wsi": 1000,
    "synth.patch_size": 32,
    "synth.n_content_classes": 4,
    "synth.stain_perturbation_deg": 15.0,
    "synth.jitter_lo": 0.7,
    "synth.jitter_hi": 1.3,
    "synth.noise_sigma": 0.005,
}


def _cast(key: str, raw, default):
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        lowered = str(raw).strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise DataError(f"config key '{key}': expected boolean, got {raw!r}")
    try:
        return type(default)(raw)
    except (TypeError, ValueError) as exc:
        raise DataError(
            f"config key '{key}': expected {type(default).__name__}, got {raw!r}"
        ) from exc


class RunConfig:
    """Defaults overlaid with file values overlaid with flag values."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, raw in (values or {}).items():
            self.set(key, raw)

    def set(self, key: str, raw) -> None:
        if key not in DEFAULTS:
            raise DataError(f"unknown config key '{key}'")
        self.values[key] = _cast(key, raw, DEFAULTS[key])

    def get(self, key: str):
        return self.values[key]

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DataError(f"{path}: cannot read config: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = stripped.partition("=")
            cfg.set(key.strip(), value.strip())
        return cfg

    def dino_config(self, macenko_target=None) -> DinoConfig:
        g = self.get
        hidden = tuple(int(s) for s in str(g("dino.hidden_sizes")).split(",") if s)
        return DinoConfig(
            n_local_crops=g("dino.n_local_crops"),
            global_view_size=g("dino.global_view_size"),
            local_view_size=g("dino.local_view_size"),
            encoder_input_size=g("dino.encoder_input_size"),
            hidden_sizes=hidden,
            n_prototypes=g("dino.n_prototypes"),
            student_temp=g("dino.student_temp"),
            teacher_temp=g("dino.teacher_temp"),
            ema_momentum=g("dino.ema_momentum"),
            center_momentum=g("dino.center_momentum"),
            batch_size=g("dino.batch_size"),
            total_iterations=g("dino.total_iterations"),
            warmup_iterations=g("dino.warmup_iterations"),
            base_lr=g("dino.base_lr"),
            macenko_enabled=g("dino.macenko_enabled"),
            macenko_target=macenko_target,
        )

    def probe_config(self, seed: int = 0) -> ProbeConfig:
        return ProbeConfig(
            lr=self.get("probe.lr"),
            momentum=self.get("probe.momentum"),
            batch_size=self.get("probe.batch_size"),
            iterations=self.get("probe.iterations"),
            seed=seed,
        )


def default_target():
    """The shipped synthetic normalization target."""
    from importlib.resources import files

    from .io_formats import load_target_json

    return load_target_json(files("slidekit") / "data" / "default_target.json")

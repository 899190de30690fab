import json

import numpy as np
import pytest

from slidekit.cli import main
from slidekit.config import DEFAULTS, RunConfig
from slidekit.embed_diag import FeatureSet
from slidekit.errors import DataError
from slidekit.io_formats import (
    load_cohort,
    load_slide,
    load_target_json,
    read_checkpoint,
    read_feature_file,
    save_cohort,
    save_slide,
    save_target_json,
    write_checkpoint,
    write_feature_file,
)
from slidekit.mini_dino import DinoConfig, init_state
from slidekit.slide_pipeline import SlideRaster
from slidekit.synth_slides import CohortSpec, generate_cohort, reference_patch


def make_feature_set(n=20, d=6, seed=0):
    rng = np.random.default_rng(seed)
    ids = np.repeat(np.arange(4), n // 4)
    return FeatureSet(vectors=rng.normal(size=(n, d)).astype(np.float32)
                      .astype(np.float64),
                      wsi_ids=ids,
                      manifest={int(w): f"wsi_{w}" for w in range(4)})


class TestFeatureFile:
    def test_round_trip_bit_identical(self, tmp_path):
        fs = make_feature_set()
        p1 = tmp_path / "a.fvec"
        p2 = tmp_path / "b.fvec"
        write_feature_file(p1, fs)
        back = read_feature_file(p1)
        assert np.array_equal(back.vectors, fs.vectors)
        assert np.array_equal(back.wsi_ids, fs.wsi_ids)
        assert back.manifest == fs.manifest
        write_feature_file(p2, back)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_names_offset(self, tmp_path):
        p = tmp_path / "bad.fvec"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(DataError, match="byte 0"):
            read_feature_file(p)

    def test_truncated_records_reported(self, tmp_path):
        fs = make_feature_set()
        p = tmp_path / "t.fvec"
        write_feature_file(p, fs)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(DataError, match="bytes"):
            read_feature_file(p)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        cfg = DinoConfig(encoder_input_size=4, hidden_sizes=(5,), n_prototypes=3)
        state = init_state(cfg, seed=0)
        p1 = tmp_path / "a.mdck"
        p2 = tmp_path / "b.mdck"
        write_checkpoint(p1, state.teacher, state.center, 42)
        params, center, step = read_checkpoint(p1)
        assert step == 42
        assert len(params.weights) == 2
        write_checkpoint(p2, params, center, step)
        assert p1.read_bytes() == p2.read_bytes()

    def test_trailing_bytes_rejected(self, tmp_path):
        cfg = DinoConfig(encoder_input_size=4, hidden_sizes=(5,), n_prototypes=3)
        state = init_state(cfg, seed=0)
        p = tmp_path / "a.mdck"
        write_checkpoint(p, state.teacher, state.center, 1)
        p.write_bytes(p.read_bytes() + b"x")
        with pytest.raises(DataError):
            read_checkpoint(p)


class TestTargetJson:
    def test_round_trip_byte_identical(self, tmp_path, canonical_target):
        p1 = tmp_path / "a.json"
        p2 = tmp_path / "b.json"
        save_target_json(canonical_target, p1)
        back = load_target_json(p1)
        save_target_json(back, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert np.array_equal(back.basis.h_vector,
                              canonical_target.basis.h_vector)

    def test_invalid_json_is_data_error(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(DataError):
            load_target_json(p)


class TestSlideAndCohortIo:
    def test_slide_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        slide = SlideRaster(pixels=rng.integers(0, 256, (32, 48, 3),
                                                dtype=np.uint8),
                            mpp=0.25, name="s1")
        p = tmp_path / "s.png"
        save_slide(p, slide)
        back = load_slide(p)
        assert np.array_equal(back.pixels, slide.pixels)
        assert back.mpp == 0.25
        assert back.name == "s1"

    def test_missing_sidecar_is_data_error(self, tmp_path):
        from slidekit.io_formats import save_patch_png
        p = tmp_path / "s.png"
        save_patch_png(p, reference_patch())
        with pytest.raises(DataError):
            load_slide(p)

    def test_cohort_round_trip(self, tmp_path):
        cohort = generate_cohort(CohortSpec(n_wsis=2, patches_per_wsi=4,
                                            patch_size=16, seed=2))
        save_cohort(tmp_path / "c", cohort)
        patches, wsi_ids, classes, names = load_cohort(tmp_path / "c")
        assert len(patches) == 8
        assert np.array_equal(wsi_ids, cohort.wsi_ids)
        assert np.array_equal(classes, cohort.content_classes)
        for a, b in zip(patches, cohort.patches):
            assert np.array_equal(a.pixels, b.pixels)


class TestRunConfig:
    def test_unknown_key_named_in_error(self):
        with pytest.raises(DataError, match="tile.bogus"):
            RunConfig({"tile.bogus": 1})

    def test_file_parsing_with_comments(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\n tile.target_size = 128 \n\n"
                     "dino.macenko_enabled = true\n")
        cfg = RunConfig.from_file(p)
        assert cfg.get("tile.target_size") == 128
        assert cfg.get("dino.macenko_enabled") is True

    def test_bad_value_type_rejected(self):
        with pytest.raises(DataError, match="tile.target_size"):
            RunConfig({"tile.target_size": "many"})

    def test_defaults_cover_probe_protocol(self):
        assert DEFAULTS["probe.lr"] == 0.1
        assert DEFAULTS["probe.momentum"] == 0.9
        assert DEFAULTS["probe.batch_size"] == 128
        assert DEFAULTS["probe.iterations"] == 12500


class TestCli:
    def test_usage_error_exit_code_1(self, capsys):
        assert main(["tile"]) == 1  # missing required args
        assert main(["no-such-command"]) == 1

    def test_data_error_exit_code_2(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.png")
        assert main(["tile", missing, "--out", str(tmp_path / "o")]) == 2

    def test_tile_16_cells_on_1024_slide(self, tmp_path, capsys):
        px = np.full((1024, 1024, 3), 255, dtype=np.uint8)
        px[:, :, 1] = 120  # uniformly "tissue-like" saturation... needs split
        # half tissue, half white so Otsu has two classes; tissue rows only
        px[512:, :, :] = 255
        slide = SlideRaster(pixels=px, mpp=0.5, name="big")
        save_slide(tmp_path / "s.png", slide)
        rc = main(["tile", str(tmp_path / "s.png"),
                   "--out", str(tmp_path / "out")])
        assert rc == 0
        summary = json.loads(capsys.readouterr().out.strip())
        assert summary["extraction_size"] == 256
        # 1024/256 = 4 cells per axis; tissue occupies the top two rows
        assert summary["patches"] == 8
        grid = (tmp_path / "out" / "grid.csv").read_text().splitlines()
        assert grid[0] == "x,y,size"
        assert len(grid) == 9

    def test_diagnose_perfect_clusters(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        vecs = np.vstack([rng.normal(size=(10, 3)) + 100 * w for w in range(3)])
        fs = FeatureSet(vectors=vecs, wsi_ids=np.repeat(np.arange(3), 10),
                        manifest={w: f"w{w}" for w in range(3)})
        fpath = tmp_path / "f.fvec"
        write_feature_file(fpath, fs)
        rc = main(["diagnose", str(fpath), "--k", "5",
                   "--out", str(tmp_path / "d")])
        assert rc == 0
        summary = json.loads(capsys.readouterr().out.strip())
        assert summary["knn_purity"] == 1.0
        metrics = json.loads((tmp_path / "d" / "metrics.json").read_text())
        assert metrics["n"] == 30 and metrics["d"] == 3

    def test_synth_train_embed_pipeline_deterministic(self, tmp_path, capsys):
        args_common = ["--synth.n_wsis", "2", "--synth.patches_per_wsi", "6",
                       "--synth.patch_size", "16", "--seed", "3"]
        assert main(["synth", "--out", str(tmp_path / "cohort")]
                    + args_common) == 0
        train_flags = ["--dino.total_iterations", "3",
                       "--dino.warmup_iterations", "1",
                       "--dino.batch_size", "4",
                       "--dino.n_local_crops", "2",
                       "--dino.global_view_size", "12",
                       "--dino.local_view_size", "6",
                       "--dino.encoder_input_size", "6",
                       "--dino.hidden_sizes", "8,4",
                       "--dino.n_prototypes", "4",
                       "--seed", "3"]
        for run in ("r1", "r2"):
            assert main(["train", str(tmp_path / "cohort"),
                         "--out", str(tmp_path / run)] + train_flags) == 0
            assert main(["embed", str(tmp_path / run / "checkpoint.mdck"),
                         str(tmp_path / "cohort"),
                         "--out", str(tmp_path / run)] + train_flags) == 0
        capsys.readouterr()
        ck1 = (tmp_path / "r1" / "checkpoint.mdck").read_bytes()
        ck2 = (tmp_path / "r2" / "checkpoint.mdck").read_bytes()
        assert ck1 == ck2
        fv1 = (tmp_path / "r1" / "features.fvec").read_bytes()
        fv2 = (tmp_path / "r2" / "features.fvec").read_bytes()
        assert fv1 == fv2

    def test_rerun_idempotent_over_out_dir(self, tmp_path, capsys):
        flags = ["--synth.n_wsis", "2", "--synth.patches_per_wsi", "3",
                 "--synth.patch_size", "16", "--seed", "1"]
        out = str(tmp_path / "c")
        assert main(["synth", "--out", out] + flags) == 0
        first = (tmp_path / "c" / "cohort.json").read_bytes()
        assert main(["synth", "--out", out] + flags) == 0
        capsys.readouterr()
        assert (tmp_path / "c" / "cohort.json").read_bytes() == first

    def test_stats_mpp_from_slides_manifest(self, tmp_path, capsys):
        manifest = {"slides": [{"mpp": 0.25, "patch_count": 10},
                               {"mpp": 0.5, "patch_count": 4}]}
        mp = tmp_path / "m.json"
        mp.write_text(json.dumps(manifest))
        rc = main(["stats-mpp", str(mp), "--out", str(tmp_path / "o")])
        assert rc == 0
        summary = json.loads(capsys.readouterr().out.strip())
        assert summary["bins"] == 2
        assert summary["total_patches"] == 14

    def test_probe_command_end_to_end(self, tmp_path, capsys):
        rng = np.random.default_rng(0)

        def split_features(n):
            half = n // 2
            vecs = np.vstack([rng.normal(size=(half, 4)) - 5,
                              rng.normal(size=(half, 4)) + 5])
            labels = np.array([0] * half + [1] * half)
            return FeatureSet(vectors=vecs, wsi_ids=np.zeros(n, dtype=int),
                              manifest={0: "w"}), labels

        rows = ["split,row,label"]
        for split, n in (("train", 40), ("val", 20), ("test", 20)):
            fs, labels = split_features(n)
            write_feature_file(tmp_path / f"{split}.fvec", fs)
            rows += [f"{split},{i},{l}" for i, l in enumerate(labels)]
        (tmp_path / "labels.csv").write_text("\n".join(rows) + "\n")
        rc = main(["probe", str(tmp_path / "train.fvec"),
                   str(tmp_path / "val.fvec"), str(tmp_path / "test.fvec"),
                   str(tmp_path / "labels.csv"),
                   "--probe.iterations", "200", "--probe.batch_size", "8",
                   "--out", str(tmp_path / "p")])
        assert rc == 0
        summary = json.loads(capsys.readouterr().out.strip())
        assert summary["test_accuracy"] >= 0.95
        results = (tmp_path / "p" / "results.csv").read_text().splitlines()
        assert results[0] == "dataset,split,accuracy,iterations,seed"

    def test_fit_target_and_normalize(self, tmp_path, capsys):
        from slidekit.io_formats import save_patch_png
        ref = tmp_path / "ref.png"
        save_patch_png(ref, reference_patch())
        assert main(["fit-target", str(ref), "--out", str(tmp_path / "t")]) == 0
        pd = tmp_path / "patches"
        pd.mkdir()
        save_patch_png(pd / "p0.png", reference_patch(size=48, seed=1))
        assert main(["normalize", str(pd), str(tmp_path / "t" / "target.json"),
                     "--out", str(tmp_path / "n")]) == 0
        capsys.readouterr()
        assert (tmp_path / "n" / "p0.png").exists()
        assert (tmp_path / "n" / "skipped.log").read_text() == ""

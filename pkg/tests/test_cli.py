import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from cglo import cli
from cglo import io as ctio
from cglo.config import ExperimentConfig, stage_seed
from cglo.errors import ConfigError, NumericError
from cglo.tomo import Geometry, fbp, radon_forward, uniform_angles

MICRO = {
    "master_seed": 3,
    "geometry": {"size": 16},
    "decoder": {"latent_dim": 8, "base_channels": 16},
    "dataset": {"kind": "phantoms", "n_scans": 4, "n_slices": 3, "n_ellipses": 3},
    "angle_counts": [4, 8],
    "pretrain": {"epochs": 3, "batch_start": 4},
    "recon": {"cglo": {"steps": 3, "augment_factor": 2}, "dip": {"steps": 5, "base_channels": 8},
              "tv": {"steps": 5}, "csgm-toy": {"n_steps": 3, "full_angles": 16}},
}


def write_cfg(tmp_path, **over):
    doc = json.loads(json.dumps(MICRO))
    doc.update(over)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture
def env(tmp_path, monkeypatch):
    out = tmp_path / "out"
    monkeypatch.setenv("CT_OUT_DIR", str(out))
    return write_cfg(tmp_path), out


def run(*args):
    return cli.main([str(a) for a in args])


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- config ---------------------------------------------------------------------------


def test_stage_seed_stable_and_distinct():
    assert stage_seed(0, "pretrain") == stage_seed(0, "pretrain")
    assert len({stage_seed(0, s) for s in ["a", "b", "c"]} | {stage_seed(1, "a")}) == 4
    assert 0 <= stage_seed(99, "x") < 2**32


def test_config_defaults_and_validation(tmp_path):
    cfg = ExperimentConfig.from_dict({})
    assert cfg.angle_counts == [9, 23, 50, 100]
    assert cfg.recon_config("cglo", 0).lr_weights == 1e-4
    for bad in [{"bogus": 1}, {"angle_counts": []}, {"split_fraction": 1.5},
                {"dataset": {"kind": "images"}}, {"geometry": {"size": 17}},
                {"recon": {"cglo": {"loss_kind": "l3"}}},
                {"recon": {"csgm-toy": {"score": "unet"}}}]:
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)
    with pytest.raises(ConfigError, match="not a directory"):
        ExperimentConfig.from_dict({"dataset": {"kind": "images", "path": str(tmp_path / "nope")}})


def test_missing_or_broken_config_file(tmp_path):
    assert run("phantom-gen", "--config", tmp_path / "none.json") == 2
    (tmp_path / "bad.json").write_text("{")
    assert run("phantom-gen", "--config", tmp_path / "bad.json") == 2


# --- phantom-gen --------------------------------------------------------------------------


def test_phantom_gen_counts_and_determinism(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, dataset={"kind": "phantoms", "n_scans": 10, "n_slices": 8})
    out = tmp_path / "a" / "b"           # does not exist yet
    monkeypatch.setenv("CT_OUT_DIR", str(out))
    assert run("phantom-gen", "--config", cfg) == 0
    files = list((out / "data").rglob("*.cti"))
    man = json.loads((out / "data" / "manifest.json").read_text())
    assert len(files) == 80 and sum(len(s["paths"]) for s in man["scans"]) == 80
    first = sha(out / "data" / "manifest.json")
    assert run("phantom-gen", "--config", cfg) == 2     # refuses a non-empty directory
    assert run("phantom-gen", "--config", cfg, "--force") == 0
    assert sha(out / "data" / "manifest.json") == first
    assert run("phantom-gen", "--config", cfg, "--force", "--seed", 4) == 0
    assert sha(out / "data" / "manifest.json") != first


def test_ingest_image_directories(tmp_path, monkeypatch):
    src = tmp_path / "scans"
    for s in range(3):
        for k in range(2):
            ctio.write_png(src / f"p{s}" / f"{k}.png", np.random.default_rng(s * 10 + k).random((16, 16)))
    cfg = write_cfg(tmp_path, dataset={"kind": "images", "path": str(src)})
    monkeypatch.setenv("CT_OUT_DIR", str(tmp_path / "o"))
    assert run("phantom-gen", "--config", cfg) == 0
    man = json.loads((tmp_path / "o" / "data" / "manifest.json").read_text())
    assert sorted(s["scan_id"] for s in man["scans"]) == ["p0", "p1", "p2"]


# --- simulate ---------------------------------------------------------------------------------


def test_simulate_noiseless_equals_forward(env):
    cfg, out = env
    assert run("phantom-gen", "--config", cfg) == 0
    assert run("simulate", "--config", cfg) == 0
    assert sorted(p.name for p in (out / "sino").iterdir() if p.is_dir()) == ["a004", "a008"]
    data = json.loads((out / "data" / "manifest.json").read_text())
    sino = json.loads((out / "sino" / "manifest.json").read_text())
    test_ids = {s["scan_id"]: s for s in data["scans"] if s["split"] == "test"}
    g = Geometry.for_size(16)
    for e in sino["sinograms"]:
        for pi, ps in zip(test_ids[e["scan_id"]]["paths"], e["paths"]):
            x = ctio.read_image(out / pi)
            y = radon_forward(x, g, uniform_angles(e["n_angles"])).astype(np.float32)
            np.testing.assert_array_equal(ctio.read_sinogram(out / ps), y)


def test_simulate_noisy_checksums_stable(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, noise_i0=1e5)
    sums = []
    for trial in range(2):
        monkeypatch.setenv("CT_OUT_DIR", str(tmp_path / f"o{trial}"))
        assert run("phantom-gen", "--config", cfg) == 0
        assert run("simulate", "--config", cfg) == 0
        root = tmp_path / f"o{trial}" / "sino"
        sums.append([sha(p) for p in sorted(root.rglob("*.cts"))])
    assert sums[0] == sums[1] and len(sums[0]) == 2 * 2 * 3


def test_stage_order_errors_are_io(env):
    cfg, _ = env
    assert run("simulate", "--config", cfg) == 4


# --- pretrain / reconstruct / evaluate ---------------------------------------------------------


@pytest.fixture
def pipeline(env):
    cfg, out = env
    for stage in ["phantom-gen", "simulate", "pretrain"]:
        assert run(stage, "--config", cfg) == 0
    return cfg, out


def test_pretrain_outputs(pipeline):
    cfg, out = pipeline
    man = json.loads((out / "pretrain" / "manifest.json").read_text())
    assert (out / man["checkpoint"]).is_file()
    with open(out / man["loss_history"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and set(rows[0]) == {"epoch", "mean_loss", "batch_size"}


def test_fbp_path_bit_equals_direct_call(pipeline):
    cfg, out = pipeline
    assert run("reconstruct", "--config", cfg, "--method", "fbp") == 0
    man = json.loads((out / "recon" / "fbp" / "manifest.json").read_text())
    sino = json.loads((out / "sino" / "manifest.json").read_text())
    src = {(e["scan_id"], e["n_angles"]): e["paths"] for e in sino["sinograms"]}
    g = Geometry.for_size(16)
    for job in man["jobs"]:
        for ps, pr in zip(src[(job["scan_id"], job["n_angles"])], job["paths"]):
            direct = fbp(ctio.read_sinogram(out / ps), g, uniform_angles(job["n_angles"]), 16)
            np.testing.assert_array_equal(ctio.read_image(out / pr), direct.astype(np.float32))


def test_cglo_checkpoint_contract(pipeline):
    cfg, out = pipeline
    (out / "pretrain" / "decoder.gloc").rename(out / "elsewhere.gloc")
    assert run("reconstruct", "--config", cfg, "--method", "cglo") == 2
    assert run("reconstruct", "--config", cfg, "--method", "cglo", "--fresh-init") == 0
    assert run("reconstruct", "--config", cfg, "--method", "cglo",
               "--checkpoint", out / "elsewhere.gloc") == 0
    assert (out / "recon" / "cglo-fresh" / "manifest.json").is_file()


def test_unknown_method_is_usage_error(pipeline):
    cfg, _ = pipeline
    with pytest.raises(SystemExit) as exc:
        run("reconstruct", "--config", cfg, "--method", "sart")
    assert exc.value.code != 0


def test_numeric_abort_exit_code(pipeline, monkeypatch):
    cfg, _ = pipeline

    def boom(*a, **k):
        raise NumericError("non-finite GLO loss at epoch 0, batch 0")

    monkeypatch.setattr(cli, "glo_pretrain", boom)
    assert run("pretrain", "--config", cfg, "--force") == 3


def test_jobs_do_not_change_results(pipeline, tmp_path):
    cfg, out = pipeline
    assert run("reconstruct", "--config", cfg, "--method", "tv") == 0
    one = [sha(p) for p in sorted((out / "recon" / "tv").rglob("*.cti"))]
    assert run("reconstruct", "--config", cfg, "--method", "tv", "--jobs", 2, "--force") == 0
    two = [sha(p) for p in sorted((out / "recon" / "tv").rglob("*.cti"))]
    assert one == two


def test_full_evaluate_layout_and_manifests(pipeline):
    cfg, out = pipeline
    for m in ["fbp", "tv", "dip", "cglo", "csgm-toy"]:
        assert run("reconstruct", "--config", cfg, "--method", m) == 0
    assert run("evaluate", "--config", cfg) == 0
    summary = json.loads((out / "eval" / "metrics.json").read_text())
    keys = [(s["method"], s["n_angles"], s["data_fraction"]) for s in summary]
    assert len(keys) == len(set(keys)) == 5 * 2
    assert all(s["n"] == 6 for s in summary)      # 2 test scans x 3 slices
    # no orphans: every file is listed by exactly one manifest
    listed = []
    for man in out.rglob("manifest.json"):
        listed += _paths_in(json.loads(man.read_text()))
    files = {p.relative_to(out).as_posix() for p in out.rglob("*")
             if p.is_file() and p.name != "manifest.json"}
    assert sorted(listed) == sorted(files)


def _paths_in(obj):
    found = []
    if isinstance(obj, dict):
        for v in obj.values():
            found += _paths_in(v)
    elif isinstance(obj, list):
        for v in obj:
            found += _paths_in(v)
    elif isinstance(obj, str) and "/" in obj and not obj.startswith("/"):
        found.append(obj)
    return found


def test_ground_truth_copy_scores_perfect_ssim(pipeline):
    cfg, out = pipeline
    assert run("reconstruct", "--config", cfg, "--method", "fbp") == 0
    data = json.loads((out / "data" / "manifest.json").read_text())
    truth = {s["scan_id"]: s["paths"] for s in data["scans"]}
    man = json.loads((out / "recon" / "fbp" / "manifest.json").read_text())
    for job in man["jobs"]:
        for pr, pt in zip(job["paths"], truth[job["scan_id"]]):
            (out / pr).write_bytes((out / pt).read_bytes())
    assert run("evaluate", "--config", cfg) == 0
    summary = json.loads((out / "eval" / "metrics.json").read_text())
    assert all(s["ssim"]["median"] == pytest.approx(1.0) for s in summary)


def test_missing_slice_named_and_partial_results_kept(pipeline, caplog):
    cfg, out = pipeline
    assert run("reconstruct", "--config", cfg, "--method", "fbp") == 0
    man = json.loads((out / "recon" / "fbp" / "manifest.json").read_text())
    victim = next(j for j in man["jobs"] if j["n_angles"] == 4)["paths"][1]
    (out / victim).unlink()
    assert run("evaluate", "--config", cfg) == 4
    assert victim.split("/")[-1] in caplog.text
    assert (out / "eval" / "metrics_fbp_a008.csv").is_file()
    assert not (out / "eval" / "metrics_fbp_a004.csv").exists()
    summary = json.loads((out / "eval" / "metrics.json").read_text())
    assert [s["n_angles"] for s in summary] == [8]

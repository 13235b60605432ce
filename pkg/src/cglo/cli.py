"""Command-line driver: phantom-gen -> simulate -> pretrain -> reconstruct -> evaluate.

Every stage writes into its own directory below the output root and leaves a
``manifest.json`` listing each file it produced.  Seeds for every stage are
derived from the master seed by :func:`cglo.config.stage_seed`.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io as ctio
from .config import METHODS, ExperimentConfig, stage_seed
from .data import SliceStack, generate_scan, load_image_stack, split_by_scan
from .decoder import load_checkpoint, save_checkpoint
from .errors import ConfigError, IngestionError, InvalidArgument, NumericError
from .glo import glo_pretrain
from .metrics import psnr, ssim, summarize
from .recon import (ReconJob, cglo_reconstruct, csgm_sample, dip_reconstruct, gaussian_score,
                    map_tv_reconstruct)
from .tomo import AngleSet, apply_poisson_noise, fbp, radon_forward, uniform_angles

log = logging.getLogger("cglo")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

DATA_DIR, SINO_DIR, PRETRAIN_DIR, RECON_DIR, EVAL_DIR = "data", "sino", "pretrain", "recon", "eval"
MANIFEST = "manifest.json"


# --- helpers -----------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path} is not empty; pass --force to overwrite")
        for p in sorted(path.rglob("*"), reverse=True):
            p.unlink() if p.is_file() or p.is_symlink() else p.rmdir()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _rel(root: Path, p: Path) -> str:
    return p.relative_to(root).as_posix()


def _read_manifest(root: Path, stage_dir: str, hint: str) -> dict:
    path = root / stage_dir / MANIFEST
    if not path.is_file():
        raise IngestionError(f"{path} not found; run `{hint}` first")
    return json.loads(path.read_text())


def _write_manifest(root: Path, stage_dir: str, body: dict) -> Path:
    path = root / stage_dir / MANIFEST
    path.write_text(_dump(body))
    return path


def _angle_tag(n: int) -> str:
    return f"a{n:03d}"


def _test_scans(manifest: dict) -> list[dict]:
    return [s for s in manifest["scans"] if s["split"] == "test"]


def _load_scan(root: Path, entry: dict) -> SliceStack:
    return SliceStack([ctio.read_image(root / p) for p in entry["paths"]], entry["scan_id"])


# --- phantom-gen ---------------------------------------------------------------


def cmd_phantom_gen(cfg: ExperimentConfig, force: bool = False) -> Path:
    root = cfg.output_root()
    out = _prepare_dir(root / DATA_DIR, force)
    ds = cfg.doc["dataset"]
    seed = stage_seed(cfg.master_seed, "phantom-gen")
    if ds["kind"] == "phantoms":
        scan_seeds = np.random.default_rng(seed).integers(0, 2**31, size=ds["n_scans"])
        stacks = [generate_scan(int(s), cfg.size, ds["n_slices"], ds["n_ellipses"],
                                scan_id=f"scan{i:03d}") for i, s in enumerate(scan_seeds)]
    else:
        src = cfg.resolve(ds["path"])
        dirs = sorted(p for p in src.iterdir() if p.is_dir())
        if len(dirs) < 2:
            raise ConfigError(f"{src} needs at least two scan subdirectories")
        stacks = [load_image_stack(d) for d in dirs]
        for st in stacks:
            if st.size != cfg.size:
                raise ConfigError(f"scan {st.scan_id} is {st.size}px, config says {cfg.size}")
    split = split_by_scan(stacks, cfg.split_fraction, stage_seed(cfg.master_seed, "split"))
    train_ids = {s.scan_id for s in split.train}
    scans = []
    for st in stacks:
        paths = []
        for k, img in enumerate(st.slices):
            p = ctio.write_image(out / st.scan_id / f"slice_{k:03d}.cti", img)
            paths.append(_rel(root, p))
        scans.append({"scan_id": st.scan_id, "paths": paths,
                      "split": "train" if st.scan_id in train_ids else "test"})
    return _write_manifest(root, DATA_DIR, {
        "stage": "phantom-gen", "seed": seed, "size": cfg.size,
        "split_fraction": cfg.split_fraction, "scans": scans})


# --- simulate ------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, force: bool = False) -> Path:
    root = cfg.output_root()
    data = _read_manifest(root, DATA_DIR, "phantom-gen")
    out = _prepare_dir(root / SINO_DIR, force)
    g = cfg.geometry()
    i0 = cfg.noise_i0
    entries = []
    for n in cfg.angle_counts:
        angles = uniform_angles(n)
        for scan in _test_scans(data):
            stack = _load_scan(root, scan)
            paths = []
            for k, img in enumerate(stack.slices):
                y = radon_forward(img, g, angles)
                if i0 is not None:
                    y = apply_poisson_noise(
                        y, i0, stage_seed(cfg.master_seed, f"simulate/{scan['scan_id']}/{n}/{k}"))
                p = ctio.write_sinogram(out / _angle_tag(n) / scan["scan_id"] / f"slice_{k:03d}.cts", y)
                paths.append(_rel(root, p))
            entries.append({"scan_id": scan["scan_id"], "n_angles": n, "paths": paths})
    return _write_manifest(root, SINO_DIR, {
        "stage": "simulate", "noise_i0": i0, "n_detectors": g.n_detectors,
        "angle_counts": cfg.angle_counts, "sinograms": entries})


# --- pretrain ------------------------------------------------------------------


def cmd_pretrain(cfg: ExperimentConfig, force: bool = False) -> Path:
    root = cfg.output_root()
    data = _read_manifest(root, DATA_DIR, "phantom-gen")
    out = _prepare_dir(root / PRETRAIN_DIR, force)
    train = [_load_scan(root, s) for s in data["scans"] if s["split"] == "train"]
    spec = cfg.decoder_spec()
    pcfg = cfg.pretrain_config()
    checkpoints = []

    def on_epoch(epoch, params, loss, bs, bank):
        every = pcfg.checkpoint_every
        if every and (epoch + 1) % every == 0 and epoch + 1 < pcfg.epochs:
            p = save_checkpoint(out / f"decoder_e{epoch + 1:04d}.gloc", params, step=epoch + 1)
            checkpoints.append(_rel(root, p))

    res = glo_pretrain(train, spec, pcfg, on_epoch=on_epoch)
    order = [f"{s.scan_id}/{k}" for s in train for k in range(len(s))]
    final = save_checkpoint(out / "decoder.gloc", res.params, step=pcfg.epochs,
                            extra={"latent_order": order})
    hist = out / "loss_history.csv"
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "batch_size"])
        for e, (l, b) in enumerate(zip(res.loss_history, res.batch_sizes)):
            w.writerow([e, repr(float(l)), b])
    return _write_manifest(root, PRETRAIN_DIR, {
        "stage": "pretrain", "seed": pcfg.seed, "spec": spec.to_dict(),
        "checkpoint": _rel(root, final), "intermediate_checkpoints": checkpoints,
        "loss_history": _rel(root, hist), "final_mean_loss": float(np.mean(res.final_losses))})


# --- reconstruct ---------------------------------------------------------------


def _merged_angles(measured: AngleSet, n_full: int) -> AngleSet:
    """Uniform ``n_full`` grid plus any measured angle it does not already hold."""
    full = uniform_angles(n_full).array
    extra = [a for a in measured.array if np.min(np.abs(full - a)) > 1e-9]
    return AngleSet(tuple(sorted([float(a) for a in full] + extra)))


def _run_job(job: dict) -> dict:
    """Reconstruct one scan at one angle count; pure function of ``job``."""
    method, cfg = job["method"], ExperimentConfig(job["doc"], None)
    g = cfg.geometry()
    angles = uniform_angles(job["n_angles"])
    sinos = [ctio.read_sinogram(p) for p in job["sino_paths"]]
    seed = job["seed"]
    history: list[float] = []
    if method == "fbp":
        flt = cfg.method_options("fbp")["filter"]
        slices = [fbp(y, g, angles, cfg.size, flt) for y in sinos]
    elif method == "tv":
        o = cfg.method_options("tv")
        slices = []
        for y in sinos:
            h: list[float] = []
            slices.append(map_tv_reconstruct(y, angles, g, cfg.size, o["alpha"], o["steps"],
                                              seed, o["lr"], o["tv_epsilon"], h))
            history = h if not history else [a + b for a, b in zip(history, h)]
    elif method == "dip":
        spec = cfg.decoder_spec(cfg.dip_base_channels)
        res = dip_reconstruct(sinos, angles, g, spec, cfg.recon_config("dip", seed))
        slices, history = res.slices, res.loss_history
    elif method == "cglo":
        if job["checkpoint"] is None:
            dec = cfg.decoder_spec()
        else:
            dec, _ = load_checkpoint(job["checkpoint"])
            if dec.spec.out_size != cfg.size:
                raise ConfigError(f"checkpoint decodes {dec.spec.out_size}px, config says {cfg.size}")
        res = cglo_reconstruct(ReconJob(sinos, angles, g, dec, cfg.recon_config("cglo", seed)))
        slices, history = res.slices, res.loss_history
    elif method == "csgm-toy":
        o = cfg.method_options("csgm-toy")
        full = _merged_angles(angles, o["full_angles"])
        mean = np.load(job["prior_mean"]) if job.get("prior_mean") else np.full(
            (cfg.size, cfg.size), 0.5)
        score = gaussian_score(mean, o["std"])
        schedule = np.linspace(1.0, 0.0, o["n_steps"] + 1)[:-1]
        slices = [csgm_sample(score, y, angles, full, o["lam"], g, cfg.size, schedule,
                              seed + k) for k, y in enumerate(sinos)]
    else:  # guarded by argparse; kept for direct callers
        raise ConfigError(f"unknown method {method!r}")
    return {"slices": [np.asarray(s) for s in slices], "history": [float(v) for v in history]}


def _recon_dir_name(method: str, fresh: bool) -> str:
    return "cglo-fresh" if method == "cglo" and fresh else method


def cmd_reconstruct(cfg: ExperimentConfig, method: str, checkpoint: Path | None = None,
                    fresh_init: bool = False, jobs: int = 1, force: bool = False) -> Path:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    root = cfg.output_root()
    sino = _read_manifest(root, SINO_DIR, "simulate")
    ckpt = None
    if method == "cglo" and not fresh_init:
        ckpt = Path(checkpoint) if checkpoint else root / PRETRAIN_DIR / "decoder.gloc"
        if not ckpt.is_file():
            raise ConfigError(
                f"cglo needs a pretrained checkpoint ({ckpt} not found); run `pretrain`, "
                "pass --checkpoint, or use --fresh-init for the random-init ablation")
    name = _recon_dir_name(method, fresh_init)
    out = _prepare_dir(root / RECON_DIR / name, force)
    prior_mean = None
    if method == "csgm-toy":
        data = _read_manifest(root, DATA_DIR, "phantom-gen")
        train = [_load_scan(root, s).as_array() for s in data["scans"] if s["split"] == "train"]
        prior_mean = out / "prior_mean.npy"
        np.save(prior_mean, np.concatenate(train).mean(axis=0))
    job_list = []
    for entry in sino["sinograms"]:
        if entry["n_angles"] not in cfg.angle_counts:
            continue
        job_list.append({
            "method": method, "doc": cfg.doc, "n_angles": entry["n_angles"],
            "scan_id": entry["scan_id"], "sino_paths": [str(root / p) for p in entry["paths"]],
            "checkpoint": str(ckpt) if ckpt else None,
            "prior_mean": str(prior_mean) if prior_mean else None,
            "seed": stage_seed(cfg.master_seed, f"reconstruct/{method}/{entry['scan_id']}/"
                                                f"{entry['n_angles']}")})
    if jobs > 1 and len(job_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, job_list))
    else:
        results = []
        for j in job_list:
            t0 = time.perf_counter()
            results.append(_run_job(j))
            results[-1]["wall_time"] = time.perf_counter() - t0
    records = []
    for job, res in zip(job_list, results):
        d = out / _angle_tag(job["n_angles"]) / job["scan_id"]
        images, previews = [], []
        for k, img in enumerate(res["slices"]):
            images.append(_rel(root, ctio.write_image(d / f"slice_{k:03d}.cti", img)))
            png, side = ctio.write_png(d / f"slice_{k:03d}.png", img)
            previews += [_rel(root, png), _rel(root, side)]
        hist = d / "loss_history.csv"
        hist.write_text("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(res["history"])))
        records.append({"scan_id": job["scan_id"], "n_angles": job["n_angles"],
                        "seed": job["seed"], "paths": images, "previews": previews,
                        "loss_history": _rel(root, hist), "wall_time": res.get("wall_time")})
    extra = [_rel(root, prior_mean)] if prior_mean else []
    return _write_manifest(root, f"{RECON_DIR}/{name}", {
        "stage": "reconstruct", "method": method, "fresh_init": bool(fresh_init),
        "checkpoint": str(ckpt) if ckpt else None, "config": cfg.doc["recon"].get(method, {}),
        "jobs": records, "aux_files": extra})


# --- evaluate ------------------------------------------------------------------


def _summary(values) -> dict:
    # every slice exact under PSNR: report inf instead of aborting
    if all(math.isinf(v) and v > 0 for v in values):
        return {"median": math.inf, "half_iqr": 0.0, "n": 0}
    return summarize(values).to_dict()


def cmd_evaluate(cfg: ExperimentConfig, methods: list[str] | None = None,
                 force: bool = False) -> Path:
    """Score every reconstruction against ground truth.

    Groups with a missing or unreadable slice are skipped; every finished
    group is still written, then the first failure is raised.
    """
    root = cfg.output_root()
    data = _read_manifest(root, DATA_DIR, "phantom-gen")
    truth = {s["scan_id"]: s for s in _test_scans(data)}
    recon_root = root / RECON_DIR
    if not recon_root.is_dir():
        raise IngestionError(f"{recon_root} not found; run `reconstruct` first")
    names = sorted(p.name for p in recon_root.iterdir() if (p / MANIFEST).is_file())
    if methods:
        names = [n for n in names if n in methods]
    out = _prepare_dir(root / EVAL_DIR, force)
    fraction = float(data["split_fraction"])
    summary, tables, failure = [], [], None
    for name in names:
        man = json.loads((recon_root / name / MANIFEST).read_text())
        groups: dict[int, list[dict]] = {}
        for rec in man["jobs"]:
            groups.setdefault(rec["n_angles"], []).append(rec)
        for n in sorted(groups):
            try:
                rows = []
                for rec in groups[n]:
                    gt = truth[rec["scan_id"]]["paths"]
                    for k, (pr, pt) in enumerate(zip(rec["paths"], gt)):
                        f = root / pr
                        if not f.is_file():
                            raise IngestionError(f"missing reconstruction slice {f}")
                        x, ref = ctio.read_image(f), ctio.read_image(root / pt)
                        rows.append((rec["scan_id"], k, psnr(x, ref), ssim(x, ref)))
            except IngestionError as exc:
                log.error("%s at %d angles: %s", name, n, exc)
                failure = failure or exc
                continue
            path = out / f"metrics_{name}_{_angle_tag(n)}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["scan_id", "slice_idx", "psnr", "ssim"])
                w.writerows([s, k, repr(p), repr(q)] for s, k, p, q in rows)
            summary.append({"method": name, "n_angles": n, "data_fraction": fraction,
                            "n": len(rows), "psnr": _summary([r[2] for r in rows]),
                            "ssim": _summary([r[3] for r in rows])})
            tables.append(_rel(root, path))
    metrics = out / "metrics.json"
    metrics.write_text(_dump(summary))
    trend = out / "trend.csv"
    with open(trend, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "n_angles", "data_fraction", "psnr", "ssim"])
        for s in summary:
            w.writerow([s["method"], s["n_angles"], s["data_fraction"],
                        f"{s['psnr']['median']:.2f} ± {s['psnr']['half_iqr']:.2f}",
                        f"{s['ssim']['median']:.3f} ± {s['ssim']['half_iqr']:.3f}"])
    _write_manifest(root, EVAL_DIR, {
        "stage": "evaluate", "metrics": _rel(root, metrics), "trend": _rel(root, trend),
        "tables": tables})
    if failure is not None:
        raise failure
    return metrics


# --- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cglo", description="Sparse-view CT experiments with cGLO.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="experiment JSON")
    common.add_argument("--seed", type=int, default=None, help="override the master seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty stage dir")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom-gen", parents=[common], help="generate or ingest scans")
    sub.add_parser("simulate", parents=[common], help="project test scans")
    sub.add_parser("pretrain", parents=[common], help="GLO pretraining of the decoder")
    rp = sub.add_parser("reconstruct", parents=[common], help="run one reconstruction method")
    rp.add_argument("--method", required=True, choices=METHODS)
    rp.add_argument("--checkpoint", type=Path, default=None)
    rp.add_argument("--fresh-init", action="store_true", help="cglo from a random decoder")
    ep = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM tables")
    ep.add_argument("--method", action="append", default=None,
                    help="restrict to these result directories (repeatable)")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = ExperimentConfig.load(args.config).with_seed(args.seed)
        if args.command == "phantom-gen":
            out = cmd_phantom_gen(cfg, args.force)
        elif args.command == "simulate":
            out = cmd_simulate(cfg, args.force)
        elif args.command == "pretrain":
            out = cmd_pretrain(cfg, args.force)
        elif args.command == "reconstruct":
            out = cmd_reconstruct(cfg, args.method, args.checkpoint, args.fresh_init,
                                  args.jobs, args.force)
        else:
            out = cmd_evaluate(cfg, args.method, args.force)
            print((out.parent / "trend.csv").read_text(), end="")
    except (ConfigError, InvalidArgument) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    log.info("wrote %s", out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

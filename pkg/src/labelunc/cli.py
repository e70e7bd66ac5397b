"""Command-line front end: ``labelunc <command> [--config run.yaml] [overrides]``.

Exit codes: 0 ok, 1 internal error, 2 input error.  Logs go to stderr; all
data files are written atomically below the configured output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio
from .config import ConfigError, RunConfig, angular_res, config_from_dict, load_config
from .evalkit import GroundTruthRecord, evaluate
from .jiou import jiou_gt
from .labelvb import LabelPosterior, PriorSpec, VbConfig, infer_posterior
from .losses import loss_table_csv, loss_table_rows
from .spatialdist import GaussianSampler, default_grid, spatial_pdq, spatial_pg, write_grid, write_pgm
from .synthscene import NoiseSpec, PlacementSpec, SceneConfig, generate_scene, noise_study, write_scene

log = logging.getLogger("labelunc")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (ConfigError, dataio.ParseError, FileNotFoundError)


# -- shared steps ----------------------------------------------------------------

def _frames(labels_dir) -> list:
    return sorted(p.stem for p in Path(labels_dir).glob("*.txt"))


def _points_path(points_dir, frame: str) -> Path:
    for ext in (".bin", ".csv"):
        p = Path(points_dir) / f"{frame}{ext}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no point cloud for frame {frame} in {points_dir}")


def _infer_frame(args):
    frame, labels_dir, points_dir, prior, vb, margin = args
    entries = dataio.parse_labels(Path(labels_dir) / f"{frame}.txt")
    cloud = dataio.read_points(_points_path(points_dir, frame))
    out = []
    for e in entries:
        pts = dataio.crop_object_points(cloud, e.box, margin)
        out.append((e, pts, infer_posterior(pts, e.box, prior, vb)))
    return frame, out


def _map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def _infer_all(cfg: RunConfig) -> list:
    cfg.require("labels", "points")
    jobs = [
        (f, cfg.paths.labels, cfg.paths.points, cfg.prior, cfg.vb, cfg.grid.crop_margin)
        for f in _frames(cfg.paths.labels)
    ]
    return _map(_infer_frame, jobs, cfg.workers)


def _load_posteriors(cfg: RunConfig) -> dict:
    d = cfg.output / "posteriors"
    if not d.is_dir():
        raise ConfigError(f"no posterior documents in {d}; run 'infer' first")
    return {p.stem: dataio.read_posteriors(p) for p in sorted(d.glob("*.json"))}


# -- commands --------------------------------------------------------------------

def cmd_infer(cfg: RunConfig) -> int:
    flagged = 0
    for frame, objs in _infer_all(cfg):
        posts = [p for _, _, p in objs]
        flagged += sum(p.num_points == 0 for p in posts)
        dataio.write_posteriors(frame, posts, cfg.output / "posteriors" / f"{frame}.json")
        log.info("frame=%s objects=%d", frame, len(posts))
    if flagged:
        log.warning("objects_without_points=%d (posterior equals the prior)", flagged)
    return EXIT_OK


def cmd_spatial(cfg: RunConfig, frame=None, index=None, pdq=False, sweep=False) -> int:
    res = cfg.grid.resolution
    out = cfg.output / "spatial"
    posts = _load_posteriors(cfg)
    if frame is not None:
        if frame not in posts:
            raise ConfigError(f"unknown frame {frame}")
        posts = {frame: posts[frame]}
    for f, objs in posts.items():
        for i, post in enumerate(objs):
            if index is not None and i != index:
                continue
            grid = default_grid(post.label, post, res)
            pg = spatial_pg(post, grid, cfg.vb.surface_samples)
            write_grid(pg, out / f"{f}_{i}_pg.csv")
            write_pgm(pg, out / f"{f}_{i}_pg.pgm")
            if pdq:
                m = spatial_pdq(GaussianSampler.from_posterior(post), grid, seed=cfg.seed)
                write_grid(m, out / f"{f}_{i}_pdq.csv")
                write_pgm(m, out / f"{f}_{i}_pdq.pgm")
    if sweep:
        _sigma_weight_sweep(cfg, frame, index)
    return EXIT_OK


def _sigma_weight_sweep(cfg: RunConfig, frame, index) -> None:
    """JIoU-GT and entropy of the spatial distribution over fixed sigma x prior weight."""
    cfg.require("labels", "points")
    frames = [frame] if frame is not None else _frames(cfg.paths.labels)
    lines = ["frame,index,sigma,weight,jiou_gt,entropy"]
    for f in frames:
        _, objs = _infer_frame((f, cfg.paths.labels, cfg.paths.points, cfg.prior, cfg.vb, cfg.grid.crop_margin))
        for i, (e, pts, _) in enumerate(objs):
            if index is not None and i != index:
                continue
            for s in cfg.sweep.sigmas:
                for w in cfg.sweep.weights:
                    prior = PriorSpec(cfg.prior.sigma0_diag, w)
                    vb = dataclasses.replace(cfg.vb, sigma_mode="fixed", sigma=s)
                    try:
                        post = infer_posterior(pts, e.box, prior, vb)
                    except np.linalg.LinAlgError as err:
                        log.warning("sweep frame=%s index=%d sigma=%g weight=%g skipped: %s", f, i, s, w, err)
                        continue
                    grid = default_grid(e.box, post, cfg.grid.resolution)
                    pg = spatial_pg(post, grid)
                    j = jiou_gt(e.box, post, grid).value
                    lines.append(f"{f},{i},{s!r},{w!r},{j!r},{pg.entropy()!r}")
                    write_pgm(pg, cfg.output / "spatial" / "sweep" / f"{f}_{i}_s{s:g}_w{w:g}.pgm")
    dataio.atomic_write_text(cfg.output / "spatial" / "sweep.csv", "\n".join(lines) + "\n")


def cmd_jiou(cfg: RunConfig) -> int:
    lines = ["frame,index,jiou_gt,num_points,distance"]
    for f, objs in _load_posteriors(cfg).items():
        for i, post in enumerate(objs):
            v = jiou_gt(post.label, post, resolution=cfg.grid.resolution).value
            d = float(np.hypot(post.label.c1, post.label.c2))
            lines.append(f"{f},{i},{v!r},{post.num_points},{d!r}")
    dataio.atomic_write_text(cfg.output / "jiou_gt.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def _ground_truths(cfg: RunConfig) -> list:
    cfg.require("labels")
    post_dir = cfg.output / "posteriors"
    gts = []
    for f in _frames(cfg.paths.labels):
        entries = dataio.parse_labels(Path(cfg.paths.labels) / f"{f}.txt")
        doc = post_dir / f"{f}.json"
        if doc.exists():
            posts = dataio.read_posteriors(doc)
            if len(posts) != len(entries):
                raise ConfigError(f"{doc} holds {len(posts)} objects but the label file has {len(entries)}")
        else:
            log.warning("frame=%s has no posterior document; using deterministic labels", f)
            posts = [LabelPosterior.delta(e.box) for e in entries]
        for e, p in zip(entries, posts):
            gts.append(GroundTruthRecord(f, e.box, p, e.difficulty, e.distance))
    return gts


def cmd_eval(cfg: RunConfig) -> int:
    cfg.require("labels", "detections")
    gts = _ground_truths(cfg)
    dets = []
    for p in sorted(Path(cfg.paths.detections).glob("*.txt")):
        dets += dataio.parse_detections(p)
    rep = evaluate(dets, gts, cfg.eval.thresholds, cfg.grid.resolution, cfg.eval.pair_threshold)
    dataio.write_json(rep.to_dict(), cfg.output / "eval_report.json")
    dataio.atomic_write_text(cfg.output / "pr_curves.csv", rep.pr_csv())
    for k, m in rep.maps.items():
        log.info("metric=%s mAP=%.4f", k, m.mean)
    return EXIT_OK


def _scene_config(cfg: RunConfig, seed: int) -> SceneConfig:
    s = cfg.synth
    return SceneConfig(
        angular_res=angular_res(cfg),
        range_noise=s.range_noise,
        placement=PlacementSpec(count=s.objects_per_scene, distance=tuple(s.distance)),
        seed=seed,
    )


def cmd_synth(cfg: RunConfig) -> int:
    for i in range(cfg.synth.scenes):
        scene = generate_scene(_scene_config(cfg, cfg.seed + i))
        write_scene(scene, cfg.output / "synth", f"{i:06d}")
        log.info("scene=%06d objects=%d points=%d", i, len(scene.boxes), int(scene.num_points.sum()))
    return EXIT_OK


def cmd_noise_study(cfg: RunConfig) -> int:
    spec = NoiseSpec(cfg.synth.noise_levels, cfg.synth.noise_weights, cfg.seed)
    res = noise_study(
        _scene_config(cfg, cfg.seed), spec, cfg.prior, cfg.vb, cfg.synth.scenes, cfg.grid.resolution, cfg.workers
    )
    dataio.atomic_write_text(cfg.output / "noise_study.csv", res.to_csv())
    log.info("objects=%d excluded=%d", res.num_objects, res.excluded)
    return EXIT_OK


def cmd_loss(cfg: RunConfig) -> int:
    objects = []
    for frame, objs in _infer_all(cfg):
        for i, (_, pts, post) in enumerate(objs):
            objects.append((f"{frame}:{i}", post, pts))
    rows = loss_table_rows(objects, cfg.fixed_label_variances, cfg.prior)
    dataio.atomic_write_text(cfg.output / "loss_table.csv", loss_table_csv(rows))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--resolution", type=float, help="grid cell size (m)")
    common.add_argument("--labels", help="directory of KITTI label files")
    common.add_argument("--points", help="directory of point clouds (.bin or .csv)")
    common.add_argument("--detections", help="directory of detection files")
    common.add_argument("--output", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="labelunc", description="LiDAR label uncertainty toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("infer", parents=[common], help="infer label posteriors per frame")
    sp = sub.add_parser("spatial", parents=[common], help="render spatial distributions")
    sp.add_argument("--frame")
    sp.add_argument("--index", type=int)
    sp.add_argument("--pdq", action="store_true", help="also write the membership field")
    sp.add_argument("--sweep", action="store_true", help="also run the sigma x prior-weight sweep")
    sub.add_parser("jiou", parents=[common], help="JIoU-GT table for inferred posteriors")
    sub.add_parser("eval", parents=[common], help="evaluate detections")
    sub.add_parser("synth", parents=[common], help="write a synthetic KITTI-layout dataset")
    sub.add_parser("noise-study", parents=[common], help="label-noise study on synthetic scenes")
    sub.add_parser("loss", parents=[common], help="per-object label variance table")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    for name in ("labels", "points", "detections", "output"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg.paths, name, v)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg.workers = args.workers
    if args.resolution is not None:
        if args.resolution <= 0:
            raise ConfigError("--resolution must be positive")
        cfg.grid.resolution = args.resolution
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="ts=%(asctime)s level=%(levelname)s cmd=" + args.command + " %(message)s",
        force=True,
    )
    try:
        cfg = resolve_config(args)
        if args.command == "infer":
            return cmd_infer(cfg)
        if args.command == "spatial":
            return cmd_spatial(cfg, args.frame, args.index, args.pdq, args.sweep)
        if args.command == "jiou":
            return cmd_jiou(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "noise-study":
            return cmd_noise_study(cfg)
        if args.command == "loss":
            return cmd_loss(cfg)
    except INPUT_ERRORS as e:
        log.error("input error: %s", e)
        return EXIT_INPUT
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL
    return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

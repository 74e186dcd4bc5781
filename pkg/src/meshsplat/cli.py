"""Workbench CLI.

Every subcommand reads one JSON run config (--config), writes its
artifacts atomically under an output directory, and exits 0 on success.
Failures print a machine-readable envelope to stderr:
  {"error": {"code": ..., "exit": N, "message": ...}}
A lock file enforces a single writer per output directory. The
--deterministic flag pins the renderer to one thread regardless of
SURFEL_THREADS.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import replace

import click
import numpy as np

from .adaptation import (AdaptationConfig, IdentityEnhancer, OracleEnhancer,
                         RemoteEnhancer, adapt_stage1, adapt_stage2,
                         generate_supervision, sample_novel_conditions)
from .bench import (BenchmarkConfig, canonical_conditioning,
                    load_bench_manifest, make_synthetic_benchmark)
from .config import EnhancerSpec, RunConfig, load_run_config
from .dataset import (AvatarDataset, FrameRecord, load_dataset,
                      load_train_samples, save_dataset)
from .errors import DatasetError, LockError, MeshsplatError
from .gaussian_map import decode_surfels
from .imageio import load_png, save_f32, save_png
from .metrics import eval_metrics, write_csv
from .ply_export import export_ply
from .prior import (PriorConfig, TrainConfig, load_weights,
                    init_weights, render_prediction, save_weights,
                    train_prior)
from .rig import DrivingSignal, load_rig, rig_frames
from .warmstart import subject_warm_start

LOCK_NAME = ".meshsplat.lock"


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def output_lock(out_dir: str):
    """One writer per output dir; stale locks from dead pids are removed."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, LOCK_NAME)
    acquired = False
    for attempt in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.write(fd, str(os.getpid()).encode("ascii"))
            os.close(fd)
            acquired = True
            break
        except FileExistsError:
            try:
                with open(path, "r", encoding="ascii") as fh:
                    pid = int(fh.read().strip())
            except (OSError, ValueError):
                pid = None
            if attempt == 0 and (pid is None or not _pid_alive(pid)):
                try:
                    os.unlink(path)
                except OSError:
                    pass
                continue
            raise LockError(
                f"output dir {out_dir} is locked by pid {pid}")
    try:
        yield
    finally:
        if acquired:
            try:
                os.unlink(path)
            except OSError:
                pass


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MeshsplatError as exc:
            envelope = {"error": {"code": exc.code, "exit": exc.exit_code,
                                  "message": str(exc)}}
            print(json.dumps(envelope), file=sys.stderr)
            sys.exit(exc.exit_code)
    return wrapper


def _config_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(), help="Run config JSON.")(fn)
    fn = click.option("--deterministic", is_flag=True, default=False,
                      help="Force single-threaded rendering.")(fn)
    return fn


def _load_cfg(config_path: str, deterministic: bool) -> RunConfig:
    cfg = load_run_config(config_path)
    if deterministic:
        cfg.renderer = replace(cfg.renderer, threads=1)
    return cfg


def _out_dir(cfg: RunConfig, out: str | None) -> str:
    from .errors import ConfigError
    target = out or cfg.output_dir
    if not target:
        raise ConfigError("no output dir: pass --out or set output_dir")
    return target


def _load_texture(path: str, uv_size: int) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (uv_size, uv_size):
            img = img.resize((uv_size, uv_size), Image.BILINEAR)
        return np.asarray(img, dtype=np.float64) / 255.0


def _world(cfg: RunConfig, dataset_dir: str):
    """Dataset + rig + conditioning maps shared by the model flows."""
    ds = load_dataset(dataset_dir)
    rig = load_rig(ds.rig_path)
    if ds.uv_texture is None:
        raise DatasetError(
            DatasetError.VALIDATION_ERROR,
            f"{dataset_dir}: this flow needs a uv_texture entry")
    texture = _load_texture(ds.uv_texture_path, cfg.uv_size)
    anchors, inputs, _ = canonical_conditioning(rig, cfg.uv_size, texture)
    return ds, rig, anchors, inputs


def _dataset_expressions(ds: AvatarDataset) -> int:
    if not ds.frames:
        raise DatasetError(DatasetError.VALIDATION_ERROR,
                           "dataset has no frames")
    return ds.frames[0].driving.n_expressions


def _check_expressions(pcfg: PriorConfig, ds: AvatarDataset) -> None:
    e = _dataset_expressions(ds)
    if pcfg.n_expressions != e:
        raise DatasetError(
            DatasetError.VALIDATION_ERROR,
            f"weights expect {pcfg.n_expressions} expression coefficients, "
            f"dataset has {e}")


def _train_config(cfg: RunConfig, ds: AvatarDataset) -> TrainConfig:
    return TrainConfig(
        steps=cfg.prior.steps, lr=cfg.prior.lr, seed=cfg.seed,
        background=tuple(float(x) for x in ds.background),
        renderer_mode=cfg.renderer.mode, threads=cfg.renderer.threads,
        loss_weights=cfg.loss)


def _real_indices(cfg: RunConfig, ds: AvatarDataset) -> list:
    """Deterministic few-shot frame selection shared by adapt1/adapt2."""
    n = min(cfg.adaptation.n_real, len(ds))
    rng = np.random.default_rng(cfg.seed)
    return sorted(int(i) for i in
                  rng.choice(len(ds), size=n, replace=False))


def _build_enhancer(spec: EnhancerSpec):
    if spec.kind == "identity":
        return IdentityEnhancer()
    if spec.kind == "remote":
        return RemoteEnhancer(spec.url, timeout=spec.timeout)
    root = spec.oracle_bench
    manifest = load_bench_manifest(root)
    bcfg = manifest["config"]
    rig = load_rig(os.path.join(root, manifest["rig"]))
    texture = _load_texture(os.path.join(root, manifest["uv_texture"]),
                            int(bcfg["uv_size"]))
    pcfg_o, w_o = load_weights(os.path.join(root,
                                            manifest["oracle_weights"]))
    anchors, inputs, _ = canonical_conditioning(rig, int(bcfg["uv_size"]),
                                                texture)
    background = tuple(float(x) for x in bcfg["background"])

    def truth(condition):
        driving, camera = condition
        frames = rig_frames(rig, driving, anchors)
        return render_prediction(pcfg_o, w_o, inputs, driving, frames,
                                 camera, background=background).rgb

    return OracleEnhancer(truth)


@click.group()
def main():
    """Mesh-anchored Gaussian surfel avatar workbench."""


@main.command("make-bench")
@_config_options
@click.option("--out", type=click.Path(), default=None)
@_guard
def cmd_make_bench(config_path, deterministic, out):
    """Generate the synthetic ground-truth benchmark."""
    cfg = _load_cfg(config_path, deterministic)
    out_dir = _out_dir(cfg, out)
    bench_cfg = cfg.bench if cfg.bench is not None else BenchmarkConfig()
    bench_cfg = replace(bench_cfg, seed=cfg.seed)
    with output_lock(out_dir):
        manifest = make_synthetic_benchmark(out_dir, bench_cfg)
    click.echo(f"benchmark at {out_dir}: "
               f"{manifest['n_train_frames']} train + "
               f"{manifest['n_holdout_frames']} holdout frames")


@main.command("train-prior")
@_config_options
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--out", type=click.Path(), default=None)
@_guard
def cmd_train_prior(config_path, deterministic, dataset_dir, out):
    """Train the identity prior on a dataset."""
    cfg = _load_cfg(config_path, deterministic)
    out_dir = _out_dir(cfg, out)
    ds, rig, anchors, inputs = _world(cfg, dataset_dir)
    pcfg = PriorConfig(
        n_expressions=_dataset_expressions(ds),
        embed_dim=cfg.prior.embed_dim, group_latent=cfg.prior.group_latent,
        hidden_layers=cfg.prior.hidden_layers,
        hidden_width=cfg.prior.hidden_width,
        max_offset=cfg.prior.max_offset)
    samples = load_train_samples(ds, rig, anchors, inputs)
    with output_lock(out_dir):
        weights, trace = train_prior(pcfg, samples, _train_config(cfg, ds))
        save_weights(os.path.join(out_dir, "prior.mgpw"), pcfg, weights)
        from .imageio import atomic_write_bytes
        atomic_write_bytes(os.path.join(out_dir, "train_trace.json"),
                           json.dumps({"loss": trace}).encode("utf-8"))
    click.echo(f"prior trained: {len(trace)} steps, "
               f"final loss {trace[-1]:.5f}")


@main.command("init")
@_config_options
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--out", type=click.Path(), default=None)
@_guard
def cmd_init(config_path, deterministic, dataset_dir, out):
    """Initialize prior weights for the dataset's subject.

    The default "subject" mode bakes the real frames onto the UV grid
    and distills the prior onto the result, so the written weights
    already render the subject coarsely; "cold" mode writes plain
    seeded random weights.
    """
    cfg = _load_cfg(config_path, deterministic)
    out_dir = _out_dir(cfg, out)
    ds = load_dataset(dataset_dir)
    pcfg = PriorConfig(
        n_expressions=_dataset_expressions(ds),
        embed_dim=cfg.prior.embed_dim, group_latent=cfg.prior.group_latent,
        hidden_layers=cfg.prior.hidden_layers,
        hidden_width=cfg.prior.hidden_width,
        max_offset=cfg.prior.max_offset)
    if cfg.init.mode == "cold":
        with output_lock(out_dir):
            save_weights(os.path.join(out_dir, "init.mgpw"), pcfg,
                         init_weights(pcfg, seed=cfg.seed))
        click.echo(f"initialized weights at {out_dir}/init.mgpw")
        return
    ds, rig, anchors, inputs = _world(cfg, dataset_dir)
    indices = _real_indices(cfg, ds)
    samples = load_train_samples(ds, rig, anchors, inputs, indices)
    with output_lock(out_dir):
        weights, info = subject_warm_start(
            pcfg, samples, inputs, seed=cfg.seed,
            distill_steps=cfg.init.distill_steps,
            distill_lr=cfg.init.distill_lr,
            facing_min=cfg.init.facing_min,
            outlier_tol=cfg.init.outlier_tol)
        save_weights(os.path.join(out_dir, "init.mgpw"), pcfg, weights)
        from .imageio import atomic_write_bytes
        atomic_write_bytes(
            os.path.join(out_dir, "init.json"),
            json.dumps({"frames": indices, **info}).encode("utf-8"))
    click.echo(f"subject-initialized weights at {out_dir}/init.mgpw "
               f"(bake coverage {info['coverage']:.2f})")


@main.command("adapt1")
@_config_options
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--weights", "weights_path", required=True,
              type=click.Path())
@click.option("--out", type=click.Path(), default=None)
@_guard
def cmd_adapt1(config_path, deterministic, dataset_dir, weights_path, out):
    """Stage 1: fine-tune on a few real frames."""
    cfg = _load_cfg(config_path, deterministic)
    out_dir = _out_dir(cfg, out)
    ds, rig, anchors, inputs = _world(cfg, dataset_dir)
    pcfg, weights = load_weights(weights_path)
    _check_expressions(pcfg, ds)
    indices = _real_indices(cfg, ds)
    real = load_train_samples(ds, rig, anchors, inputs, indices)
    with output_lock(out_dir):
        adapted, trace = adapt_stage1(
            pcfg, weights, real, cfg.adaptation, base_lr=cfg.prior.lr,
            loss_weights=cfg.loss,
            background=tuple(float(x) for x in ds.background),
            renderer_mode=cfg.renderer.mode, threads=cfg.renderer.threads)
        save_weights(os.path.join(out_dir, "adapted1.mgpw"), pcfg, adapted)
        from .imageio import atomic_write_bytes
        atomic_write_bytes(
            os.path.join(out_dir, "adapt1.json"),
            json.dumps({"frames": indices,
                        "loss": trace}).encode("utf-8"))
    click.echo(f"stage 1 done on frames {indices}: "
               f"final loss {trace[-1]:.5f}")


@main.command("gen-supervision")
@_config_options
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--weights", "weights_path", required=True,
              type=click.Path())
@click.option("--out", type=click.Path(), default=None)
@_guard
def cmd_gen_supervision(config_path, deterministic, dataset_dir,
                        weights_path, out):
    """Render novel conditions and enhance them into a generated dataset."""
    cfg = _load_cfg(config_path, deterministic)
    out_dir = _out_dir(cfg, out)
    ds, rig, anchors, inputs = _world(cfg, dataset_dir)
    pcfg, weights = load_weights(weights_path)
    _check_expressions(pcfg, ds)
    indices = _real_indices(cfg, ds)
    reference = ds.load_image(indices[0])
    rng = np.random.default_rng(cfg.seed + 3)
    conditions = sample_novel_conditions(
        cfg.adaptation.n_gen, pcfg.n_expressions, ds.frames[0].camera,
        cfg.adaptation, rng)
    enhancer = _build_enhancer(cfg.enhancer)
    background = tuple(float(x) for x in ds.background)
    with output_lock(out_dir):
        samples = generate_supervision(
            pcfg, weights, inputs, rig, anchors, conditions, enhancer,
            reference, background=background,
            renderer_mode=cfg.renderer.mode, threads=cfg.renderer.threads,
            concurrency=cfg.adaptation.enhancer_concurrency)
        img_dir = os.path.join(out_dir, "images")
        os.makedirs(img_dir, exist_ok=True)
        records = []
        for i, sample in enumerate(samples):
            rel = os.path.join("images", f"gen_{i:03d}.png")
            save_png(os.path.join(out_dir, rel), sample.target)
            records.append(FrameRecord(
                image=rel, camera=sample.camera, driving=sample.driving,
                provenance="generated"))
        gen_ds = AvatarDataset(
            root=out_dir, frames=records,
            rig=os.path.relpath(ds.rig_path, out_dir),
            background=ds.background,
            uv_texture=(None if ds.uv_texture is None else
                        os.path.relpath(ds.uv_texture_path, out_dir)))
        save_dataset(gen_ds)
    click.echo(f"generated {len(records)} supervision frames at {out_dir}")


@main.command("adapt2")
@_config_options
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--gen", "gen_dir", type=click.Path(), default=None,
              help="Generated dataset from gen-supervision.")
@click.option("--weights", "weights_path", required=True,
              type=click.Path())
@click.option("--out", type=click.Path(), default=None)
@_guard
def cmd_adapt2(config_path, deterministic, dataset_dir, gen_dir,
               weights_path, out):
    """Stage 2: fine-tune on real + generated frames."""
    cfg = _load_cfg(config_path, deterministic)
    out_dir = _out_dir(cfg, out)
    ds, rig, anchors, inputs = _world(cfg, dataset_dir)
    pcfg, weights = load_weights(weights_path)
    _check_expressions(pcfg, ds)
    indices = _real_indices(cfg, ds)
    real = load_train_samples(ds, rig, anchors, inputs, indices)
    gen = []
    if gen_dir is not None:
        gen_ds = load_dataset(gen_dir)
        gen = load_train_samples(gen_ds, rig, anchors, inputs)
    with output_lock(out_dir):
        adapted, trace = adapt_stage2(
            pcfg, weights, real, gen, cfg.adaptation,
            base_lr=cfg.prior.lr, loss_weights=cfg.loss,
            background=tuple(float(x) for x in ds.background),
            renderer_mode=cfg.renderer.mode, threads=cfg.renderer.threads)
        save_weights(os.path.join(out_dir, "adapted2.mgpw"), pcfg, adapted)
        from .imageio import atomic_write_bytes
        atomic_write_bytes(
            os.path.join(out_dir, "adapt2.json"),
            json.dumps({"frames": indices, "n_generated": len(gen),
                        "loss": trace}).encode("utf-8"))
    click.echo(f"stage 2 done ({len(real)} real + {len(gen)} generated): "
               f"final loss {trace[-1]:.5f}")


def _parse_frame_list(spec: str | None, n: int) -> list:
    if spec is None:
        return list(range(n))
    try:
        indices = [int(tok) for tok in spec.split(",") if tok.strip()]
    except ValueError as exc:
        raise DatasetError(DatasetError.VALIDATION_ERROR,
                           f"bad --frames list: {spec!r}") from exc
    for i in indices:
        if not 0 <= i < n:
            raise DatasetError(DatasetError.VALIDATION_ERROR,
                               f"frame index {i} out of range 0..{n - 1}")
    return indices


@main.command("render")
@_config_options
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--weights", "weights_path", required=True,
              type=click.Path())
@click.option("--out", type=click.Path(), default=None)
@click.option("--frames", "frames_spec", default=None,
              help="Comma-separated frame indices (default: all).")
@click.option("--raw", is_flag=True, default=False,
              help="Also write float32 .f32 images.")
@_guard
def cmd_render(config_path, deterministic, dataset_dir, weights_path, out,
               frames_spec, raw):
    """Render dataset frames feed-forward with given weights."""
    cfg = _load_cfg(config_path, deterministic)
    out_dir = _out_dir(cfg, out)
    ds, rig, anchors, inputs = _world(cfg, dataset_dir)
    pcfg, weights = load_weights(weights_path)
    _check_expressions(pcfg, ds)
    indices = _parse_frame_list(frames_spec, len(ds))
    background = tuple(float(x) for x in ds.background)
    with output_lock(out_dir):
        for i in indices:
            rec = ds.frames[i]
            frames = rig_frames(rig, rec.driving, anchors)
            result = render_prediction(
                pcfg, weights, inputs, rec.driving, frames, rec.camera,
                background=background, renderer_mode=cfg.renderer.mode,
                threads=cfg.renderer.threads)
            save_png(os.path.join(out_dir, f"render_{i:03d}.png"),
                     result.rgb)
            if raw:
                save_f32(os.path.join(out_dir, f"render_{i:03d}.f32"),
                         result.rgb.astype(np.float32))
    click.echo(f"rendered {len(indices)} frames to {out_dir}")


@main.command("animate")
@_config_options
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--weights", "weights_path", required=True,
              type=click.Path())
@click.option("--out", type=click.Path(), default=None)
@click.option("--drivings", "drivings_path", type=click.Path(),
              default=None,
              help="JSON list of driving signals (default: the dataset's).")
@click.option("--camera-index", type=int, default=0)
@_guard
def cmd_animate(config_path, deterministic, dataset_dir, weights_path, out,
                drivings_path, camera_index):
    """Render a driving sequence from one fixed camera."""
    cfg = _load_cfg(config_path, deterministic)
    out_dir = _out_dir(cfg, out)
    ds, rig, anchors, inputs = _world(cfg, dataset_dir)
    pcfg, weights = load_weights(weights_path)
    _check_expressions(pcfg, ds)
    if not 0 <= camera_index < len(ds):
        raise DatasetError(DatasetError.VALIDATION_ERROR,
                           f"camera index {camera_index} out of range")
    camera = ds.frames[camera_index].camera
    if drivings_path is None:
        drivings = [rec.driving for rec in ds.frames]
    else:
        try:
            with open(drivings_path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
            drivings = [DrivingSignal.from_json(obj) for obj in doc]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DatasetError(DatasetError.PARSE_ERROR,
                               f"bad drivings file: {exc}") from exc
    background = tuple(float(x) for x in ds.background)
    with output_lock(out_dir):
        for i, driving in enumerate(drivings):
            frames = rig_frames(rig, driving, anchors)
            result = render_prediction(
                pcfg, weights, inputs, driving, frames, camera,
                background=background, renderer_mode=cfg.renderer.mode,
                threads=cfg.renderer.threads)
            save_png(os.path.join(out_dir, f"anim_{i:03d}.png"), result.rgb)
    click.echo(f"animated {len(drivings)} frames to {out_dir}")


@main.command("eval")
@_config_options
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--weights", "weights_path", required=True,
              type=click.Path())
@click.option("--out", type=click.Path(), default=None)
@_guard
def cmd_eval(config_path, deterministic, dataset_dir, weights_path, out):
    """Render every frame and write photometric metrics to eval.csv."""
    cfg = _load_cfg(config_path, deterministic)
    out_dir = _out_dir(cfg, out)
    ds, rig, anchors, inputs = _world(cfg, dataset_dir)
    pcfg, weights = load_weights(weights_path)
    _check_expressions(pcfg, ds)
    background = tuple(float(x) for x in ds.background)
    renders, targets, names = [], [], []
    for i, rec in enumerate(ds.frames):
        frames = rig_frames(rig, rec.driving, anchors)
        result = render_prediction(
            pcfg, weights, inputs, rec.driving, frames, rec.camera,
            background=background, renderer_mode=cfg.renderer.mode,
            threads=cfg.renderer.threads)
        renders.append(result.rgb)
        targets.append(ds.load_image(i))
        names.append(os.path.basename(rec.image))
    rows, csv_text = eval_metrics(renders, targets, names)
    with output_lock(out_dir):
        write_csv(os.path.join(out_dir, "eval.csv"), csv_text)
    click.echo(f"mean psnr {rows[-1]['psnr']:.3f} dB over "
               f"{len(ds)} frames -> {out_dir}/eval.csv")


@main.command("export-ply")
@_config_options
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--weights", "weights_path", required=True,
              type=click.Path())
@click.option("--out", "out_file", required=True, type=click.Path())
@click.option("--frame", type=int, default=0,
              help="Dataset frame whose driving poses the surfels.")
@_guard
def cmd_export_ply(config_path, deterministic, dataset_dir, weights_path,
                   out_file, frame):
    """Export the decoded surfels of one frame as a viewer PLY."""
    cfg = _load_cfg(config_path, deterministic)
    ds, rig, anchors, inputs = _world(cfg, dataset_dir)
    pcfg, weights = load_weights(weights_path)
    _check_expressions(pcfg, ds)
    if not 0 <= frame < len(ds):
        raise DatasetError(DatasetError.VALIDATION_ERROR,
                           f"frame index {frame} out of range")
    from .prior import predict_gaussian_map
    driving = ds.frames[frame].driving
    frames = rig_frames(rig, driving, anchors)
    gmap = predict_gaussian_map(pcfg, weights, inputs, driving)
    surfels = decode_surfels(gmap, frames, max_offset=pcfg.max_offset)
    parent = os.path.dirname(os.path.abspath(out_file)) or "."
    os.makedirs(parent, exist_ok=True)
    export_ply(surfels, out_file)
    click.echo(f"exported {len(surfels)} surfels to {out_file}")


if __name__ == "__main__":
    main()

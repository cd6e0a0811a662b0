"""
skinssl command line.

    python -m skinssl gen-data      synthetic play / force / pose / joystick datasets
    python -m skinssl pretrain      self-distillation (or MAE) pretraining, resumable
    python -m skinssl probe         linear object probe, raw-feature certificate, embedding export
    python -m skinssl train-task    one downstream decoder (task x mode x budget x seed)
    python -m skinssl eval          re-evaluate a saved decoder, or the pad-sum force baseline
    python -m skinssl sweep         sample-efficiency sweep over modes x budgets x seeds
    python -m skinssl export-plots  SVG budget curves from metrics CSVs

Shared flags: --config PATH --seed N --out DIR --threads N --deterministic.
Exit codes: 0 ok, 1 runtime error, 2 usage error.
"""

import argparse
import hashlib
import json
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from skinssl.config import (
    ARTIFACTS_FILE_NAME,
    FORCE_DIR_NAME,
    JOYSTICK_DIR_NAME,
    PLAY_DIR_NAME,
    POSE_DIR_NAME,
    PROJECT_VERSION,
    ensure_directories,
    setup_logging,
)
from skinssl.errors import ConfigError, InvalidInputError, SkinSSLError

DATASET_DIRS = {
    "play": PLAY_DIR_NAME,
    "force": FORCE_DIR_NAME,
    "pose": POSE_DIR_NAME,
    "joystick": JOYSTICK_DIR_NAME,
}
MODES = ("frozen", "finetuned", "end_to_end", "frozen_mae")

logger = None


# =============================================================================
# HELPER FUNCTIONS
# =============================================================================

def banner(title):
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)


def file_hash(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_artifacts(out_dir, run_config, command, files):
    """artifacts.json: config hash, version and a content hash of every output file."""
    out_dir = Path(out_dir)
    record = {
        "command": command,
        "version": PROJECT_VERSION,
        "seed": run_config.seed,
        "config_hash": run_config.config_hash(),
        "artifacts": {str(Path(f).relative_to(out_dir)): file_hash(f) for f in sorted(files)},
    }
    path = out_dir / ARTIFACTS_FILE_NAME
    with open(path, "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
    return path


def run_meta(run_config):
    return {"config_hash": run_config.config_hash(), "root_seed": run_config.seed}


def configure_torch(args):
    if args.threads:
        torch.set_num_threads(args.threads)
    if args.deterministic:
        if not args.threads:
            torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def load_config(args):
    from skinssl.run_config import load_run_config
    return load_run_config(args.config, args.seed)


def dataset_dir(run_config, kind, data=None):
    return Path(data or run_config.paths.data) / DATASET_DIRS[kind]


def load_dataset(run_config, kind, data=None):
    from skinssl.synth_data import read_dataset
    return read_dataset(dataset_dir(run_config, kind, data), verify=False)


def play_windows(run_config, layout, data=None):
    from skinssl.windows import WindowDataset
    dataset = load_dataset(run_config, "play", data)
    return WindowDataset.from_dataset(dataset, layout, run_config.pipeline.flux_scale,
                                      run_config.ssl.window_stride, label="object_class")


def task_data(run_config, task, layout, data=None):
    from skinssl.downstream import task_windows
    pipe = run_config.pipeline
    return task_windows(task, load_dataset(run_config, task, data), layout, pipe.flux_scale,
                        pipe.force_window_stride, pipe.sequence_windows, pipe.sequence_step)


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_gen_data(args, run_config):
    from skinssl.synth_data import (
        generate_force_dataset,
        generate_joystick_dataset,
        generate_play_dataset,
        generate_pose_dataset,
    )

    out = Path(args.out or run_config.paths.data)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise ConfigError(f"Output directory {out} is not empty\n"
                          "Pass --overwrite to replace it or choose another --out.")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.tmp")
    if tmp.exists():
        shutil.rmtree(tmp)

    layout = run_config.layout.build()
    sim = run_config.simulator
    seed = run_config.sub_seed("data")
    banner("GENERATING SYNTHETIC DATASETS")
    logger.info(f"Output: {out}")
    logger.info(f"Seed: {run_config.seed} (data stream {seed})")
    try:
        generators = {
            "play": lambda d: generate_play_dataset(layout, seed, sim, d),
            "force": lambda d: generate_force_dataset(layout, sim.force_presses, seed, sim, d),
            "pose": lambda d: generate_pose_dataset(layout, sim.pose_trajectories, seed, sim, d),
            "joystick": lambda d: generate_joystick_dataset(layout, sim.joystick_trajectories,
                                                            seed, sim, d),
        }
        summary = []
        for kind in args.kinds:
            dataset = generators[kind](tmp / DATASET_DIRS[kind])
            manifest = dataset.manifest
            frames = sum(e.frame_count for e in manifest.episodes)
            labels = sorted({l for e in manifest.episodes for l in e.labels_present})
            summary.append((kind, len(manifest.episodes), frames, ",".join(labels)))
            logger.info(f"  ✓ {kind}: {len(manifest.episodes)} episodes, {frames} frames")
        files = [f for f in tmp.rglob("*") if f.is_file()]
        write_artifacts(tmp, run_config, "gen-data", files)
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise

    banner("GENERATION COMPLETE")
    logger.info(f"{'dataset':<10} {'episodes':>9} {'frames':>10}  labels")
    for kind, episodes, frames, labels in summary:
        logger.info(f"{kind:<10} {episodes:>9} {frames:>10}  {labels}")
    return 0


def cmd_pretrain(args, run_config):
    from skinssl.ssl_trainer import CHECKPOINT_NAME, pretrain

    overrides = {"objective": args.objective, "epochs": args.epochs}
    ssl = replace(run_config.ssl, **{k: v for k, v in overrides.items() if v})
    run_config.ssl = ssl
    out = Path(args.out or run_config.paths.runs / f"pretrain_{ssl.objective}")
    resume = args.resume
    if resume == "auto":
        resume = out / CHECKPOINT_NAME

    layout = run_config.layout.build()
    windows = play_windows(run_config, layout, args.data)
    banner(f"PRETRAINING ({ssl.objective.upper()})")
    logger.info(f"Windows: {len(windows)} from {len(windows.episode_ids)} episodes")
    logger.info(f"Encoder: {run_config.encoder.to_dict()}")
    logger.info(f"Epochs: {ssl.epochs}, batch {ssl.batch_size}, peak lr {ssl.peak_lr}")
    result = pretrain(ssl, run_config.encoder, layout, windows, run_config.seed, out,
                      resume=resume, run_meta=run_meta(run_config), epochs=args.stop_after)
    write_artifacts(out, run_config, "pretrain", [result.checkpoint, result.metrics_log])

    banner("PRETRAINING COMPLETE")
    if result.history:
        first, last = result.history[0], result.history[-1]
        logger.info(f"Loss: epoch {first['epoch']} {first['loss_total']:.4f} -> "
                    f"epoch {last['epoch']} {last['loss_total']:.4f}")
    logger.info(f"Checkpoint: {result.checkpoint}")
    logger.info(f"Metrics log: {result.metrics_log}")
    return 0


def cmd_probe(args, run_config):
    from skinssl.ssl_trainer import (
        encode_windows,
        heldout_episodes,
        load_pretrained_encoder,
        probe_classification,
        raw_separability_certificate,
    )

    layout = run_config.layout.build()
    windows = play_windows(run_config, layout, args.data)
    split_seed = run_config.sub_seed("split")
    banner("OBJECT PROBE")
    if args.certificate:
        cert = raw_separability_certificate(windows, seed=split_seed)
        logger.info(f"  ✓ raw-feature certificate: train accuracy {cert.train_accuracy:.3f} "
                    f"({cert.classes} classes, {cert.n_train} windows)")
    if args.checkpoint is None:
        if not args.certificate:
            raise InvalidInputError("probe needs --checkpoint (or --certificate alone)")
        return 0

    encoder, meta = load_pretrained_encoder(args.checkpoint, layout)
    cls, pooled = encode_windows(encoder, windows)
    held = np.isin(windows.episodes, heldout_episodes(windows, run_config.ssl.probe_eval_fraction,
                                                      split_seed))
    result = probe_classification(np.concatenate([cls, pooled], axis=1), windows.labels,
                                  np.flatnonzero(~held), np.flatnonzero(held), seed=split_seed)
    logger.info(f"  ✓ linear probe ({meta.get('objective')} checkpoint, epoch {meta.get('epoch')}): "
                f"held-out accuracy {result.accuracy:.3f}, train {result.train_accuracy:.3f}")
    if args.export_embeddings:
        path = Path(args.export_embeddings)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, cls=cls, pooled=pooled, labels=windows.labels, episodes=windows.episodes,
                 t_end=windows.t_end)
        logger.info(f"  ✓ embeddings: {path}")
    return 0


def cmd_train_task(args, run_config):
    from skinssl.downstream import save_decoder, train_task, write_task_outputs

    layout = run_config.layout.build()
    data = task_data(run_config, args.task, layout, args.data)
    out = Path(args.out or run_config.paths.runs / "tasks")
    banner(f"TRAINING {args.task.upper()} DECODER")
    result = train_task(args.task, args.mode, data, args.budget, run_config.seed,
                        run_config.downstream, run_config.encoder, args.checkpoint)
    meta = run_meta(run_config)
    csv_path, json_path = write_task_outputs(out, result, meta)
    decoder_path = save_decoder(csv_path.with_suffix(".ckpt"), result, meta)
    write_artifacts(out, run_config, "train-task", sorted(out.glob("*.csv")) + sorted(out.glob("*.json"))
                    + sorted(out.glob("*.ckpt")))
    logger.info(f"Encoder hash before: {result.encoder_hash_before[:16]}")
    logger.info(f"Encoder hash after:  {result.encoder_hash_after[:16]}")
    logger.info(f"Metrics: {csv_path}, {json_path}")
    logger.info(f"Decoder: {decoder_path}")
    return 0


def cmd_eval(args, run_config):
    from skinssl.downstream import load_decoder, pad_sum_force_baseline, predict, task_metrics

    layout = run_config.layout.build()
    banner(f"EVALUATING {args.task.upper()}")
    data = task_data(run_config, args.task, layout, args.data)
    results = {}
    if args.baseline:
        if args.task != "force":
            raise InvalidInputError("--baseline is only defined for the force task")
        metrics = pad_sum_force_baseline(data, args.budget, run_config.seed,
                                         run_config.downstream.eval_fraction)
        results["pad_sum_baseline"] = metrics.to_dict()
        logger.info(f"  ✓ pad-sum baseline RMSE: {[round(v, 4) for v in metrics.rmse]}")
    if args.decoder:
        decoder, meta = load_decoder(args.decoder, layout)
        if meta["task"] != args.task:
            raise InvalidInputError(f"{args.decoder} was trained for {meta['task']}, not {args.task}")
        predictions, labels = predict(decoder, data.dataset(meta["eval_episodes"]))
        cfg = run_config.downstream
        metrics = task_metrics(args.task, predictions, labels,
                               (cfg.translation_threshold, cfg.rotation_threshold_deg))
        results["decoder"] = metrics.to_dict()
        logger.info(f"  ✓ decoder RMSE: {[round(v, 4) for v in metrics.rmse]}")
        if metrics.pose_accuracy is not None:
            logger.info(f"  ✓ pose accuracy: {metrics.pose_accuracy:.3f}")
    if not results:
        raise InvalidInputError("eval needs --decoder and/or --baseline")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"eval_{args.task}.json"
        with open(path, "w") as f:
            json.dump({**results, **run_meta(run_config)}, f, indent=2, sort_keys=True)
        logger.info(f"Results: {path}")
    return 0


def cmd_sweep(args, run_config):
    from skinssl.downstream import sample_efficiency_sweep

    layout = run_config.layout.build()
    cfg = run_config.downstream
    modes = args.modes or list(cfg.modes)
    out = Path(args.out or run_config.paths.runs / "sweeps")
    data = task_data(run_config, args.task, layout, args.data)
    banner(f"SAMPLE-EFFICIENCY SWEEP: {args.task.upper()}")
    logger.info(f"Modes: {', '.join(modes)}")
    logger.info(f"Budgets: {args.budgets or list(cfg.budgets)}")
    logger.info(f"Seeds: {args.seeds or list(cfg.seeds)}")
    csv_path = out / f"sweep_{args.task}.csv"
    table = sample_efficiency_sweep(
        args.task, data, modes, args.budgets or cfg.budgets, args.seeds or cfg.seeds, cfg,
        run_config.encoder, {"distill": args.checkpoint, "mae": args.mae_checkpoint}, csv_path)
    write_artifacts(out, run_config, "sweep", sorted(out.glob("*.csv")))
    banner("SWEEP COMPLETE")
    logger.info(f"Cells: {table[['mode', 'budget', 'seed']].drop_duplicates().shape[0]}")
    logger.info(f"Table: {csv_path}")
    return 0


def cmd_export_plots(args, run_config):
    from skinssl.plots import export_plots

    metrics_dir = Path(args.metrics or run_config.paths.runs / "sweeps")
    banner("EXPORTING PLOTS")
    written = export_plots(metrics_dir, args.out)
    logger.info(f"Wrote {len(written)} files to {Path(args.out or metrics_dir)}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "train-task": cmd_train_task,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "export-plots": cmd_export_plots,
}


# =============================================================================
# CLI ARGUMENT PARSING
# =============================================================================

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Run config JSON (may "include" another file)')
    common.add_argument('--seed', type=int, help='Root seed (overrides the config)')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--threads', type=int, help='Cap torch worker threads')
    common.add_argument('--deterministic', action='store_true',
                        help='Deterministic kernels and a fixed thread count')

    parser = argparse.ArgumentParser(
        prog='python -m skinssl',
        description='Self-supervised pretraining and downstream tasks for magnetic tactile skin.',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    python -m skinssl gen-data --config configs/desk.json --seed 7
    python -m skinssl pretrain --config configs/desk.json --epochs 2
    python -m skinssl pretrain --config configs/desk.json --resume auto
    python -m skinssl probe --checkpoint runs/pretrain_distill/pretrain.ckpt --certificate
    python -m skinssl train-task --task force --mode frozen --budget 0.1 --checkpoint runs/pretrain_distill/pretrain.ckpt
    python -m skinssl sweep --task force --checkpoint runs/pretrain_distill/pretrain.ckpt --mae-checkpoint runs/pretrain_mae/pretrain.ckpt
    python -m skinssl export-plots --metrics runs/sweeps
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', parents=[common], help='Generate synthetic datasets')
    p.add_argument('--kinds', nargs='+', choices=list(DATASET_DIRS), default=list(DATASET_DIRS),
                   help='Datasets to generate (default: all)')
    p.add_argument('--overwrite', action='store_true', help='Replace a non-empty output directory')

    p = sub.add_parser('pretrain', parents=[common], help='Pretrain the encoder')
    p.add_argument('--data', help='Dataset root (default: paths.data)')
    p.add_argument('--objective', choices=['distill', 'mae'])
    p.add_argument('--epochs', type=int)
    p.add_argument('--stop-after', type=int, metavar='EPOCH',
                   help='Stop (with a checkpoint) after this epoch without changing the schedule')
    p.add_argument('--resume', nargs='?', const='auto',
                   help='Resume from a checkpoint (default: the one in --out)')

    p = sub.add_parser('probe', parents=[common], help='Linear object probe on frozen features')
    p.add_argument('--data')
    p.add_argument('--checkpoint')
    p.add_argument('--certificate', action='store_true',
                   help='Also fit the linear classifier on raw flattened windows')
    p.add_argument('--export-embeddings', metavar='NPZ',
                   help='Write per-window embeddings and labels to an .npz file')

    for name, text in (('train-task', 'Train one downstream decoder'),
                       ('eval', 'Evaluate a decoder or the pad-sum baseline')):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument('--task', choices=['force', 'pose', 'joystick'], required=True)
        p.add_argument('--data')
        p.add_argument('--budget', type=float, default=1.0)
        if name == 'train-task':
            p.add_argument('--mode', choices=MODES, required=True)
            p.add_argument('--checkpoint', help='Pretraining checkpoint (frozen/finetuned modes)')
        else:
            p.add_argument('--decoder', help='Decoder checkpoint written by train-task')
            p.add_argument('--baseline', action='store_true', help='Pad-sum force baseline')

    p = sub.add_parser('sweep', parents=[common], help='Sample-efficiency sweep')
    p.add_argument('--task', choices=['force', 'pose', 'joystick'], required=True)
    p.add_argument('--data')
    p.add_argument('--modes', nargs='+', choices=MODES)
    p.add_argument('--budgets', nargs='+', type=float)
    p.add_argument('--seeds', nargs='+', type=int)
    p.add_argument('--checkpoint', help='Distillation checkpoint (frozen/finetuned)')
    p.add_argument('--mae-checkpoint', help='MAE checkpoint (frozen_mae)')

    p = sub.add_parser('export-plots', parents=[common], help='SVG budget curves')
    p.add_argument('--metrics', help='Directory of metrics CSVs')
    return parser


def check_sweep_modes(parser, args, modes):
    if any(m in ('frozen', 'finetuned') for m in modes) and not args.checkpoint:
        parser.error("frozen/finetuned sweep modes require --checkpoint")
    if 'frozen_mae' in modes and not args.mae_checkpoint:
        parser.error("frozen_mae sweep mode requires --mae-checkpoint")


def check_usage(parser, args):
    if args.command == 'train-task':
        if args.mode != 'end_to_end' and not args.checkpoint:
            parser.error(f"--mode {args.mode} requires --checkpoint")
        if not 0.0 < args.budget <= 1.0:
            parser.error("--budget must lie in (0, 1]")
    if args.command == 'sweep' and args.modes:
        check_sweep_modes(parser, args, args.modes)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be at least 1")


# =============================================================================
# ENTRY POINT
# =============================================================================

def main(argv=None):
    global logger
    parser = build_parser()
    args = parser.parse_args(argv)
    check_usage(parser, args)

    ensure_directories()
    logger = setup_logging(args.command.replace('-', '_'))
    configure_torch(args)
    try:
        run_config = load_config(args)
        if args.command == 'sweep' and not args.modes:
            # modes left to the run config
            check_sweep_modes(parser, args, run_config.downstream.modes)
        return COMMANDS[args.command](args, run_config)
    except (SkinSSLError, OSError) as e:
        logger.error(f"✗ {args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

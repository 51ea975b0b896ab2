"""Command-line driver tying the pipeline together.

Subcommands: ``synth`` (synthetic corpus), ``prep`` (fit normalization stats),
``train``, ``predict``, ``eval``, ``gradcheck`` (finite-difference suite), and
``ablate`` (window size, kernel shape, long-term encoder, adversarial
regularizer sweeps). Every run logs its fully resolved configuration; flags
override the ``--config`` file, which overrides the built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import evaluation as E
from . import gradcheck as G
from . import mocap
from . import model as M
from . import training as T

log = logging.getLogger("convmotion")


def _add_hyper_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--seed-frames", type=int, dest="seed_frames")
    p.add_argument("--target-frames", type=int, dest="target_frames")
    p.add_argument("--window", type=int, help="short-term encoder width C")
    p.add_argument("--eta", type=float, help="window blend: 1=closed loop, 0=teacher")
    p.add_argument("--lambda-l2", type=float, dest="lambda_l2")
    p.add_argument("--lambda-adv", type=float, dest="lambda_adv")
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--dropout", type=float)
    p.add_argument("--leaky-slope", type=float, dest="leaky_slope")
    p.add_argument("--channels", type=C._parse_int_tuple)
    p.add_argument("--fc-out", type=int, dest="fc_out")
    p.add_argument("--kernel", type=C._parse_int_tuple,
                   help="conv kernel, e.g. 2x7, 7x2, 4x4")
    p.add_argument("--stride", type=C._parse_int_tuple)
    p.add_argument("--no-long-term", action="store_true", default=None,
                   dest="no_long_term")
    p.add_argument("--no-adv", action="store_true", default=None, dest="no_adv")


def _resolve_hyper(args) -> M.HyperParams:
    mapping: dict = {}
    if getattr(args, "config", None):
        mapping.update(C.load_config(args.config))
    for key in C.HYPER_KEYS:
        if key == "adversarial":
            continue
        val = getattr(args, key, None)
        if val is not None:
            mapping[key] = val
    if getattr(args, "no_adv", None):
        mapping["adversarial"] = False
    hp = C.hyperparams_from_mapping(mapping)
    for line in C.format_config(hp).strip().split("\n"):
        log.info("config: %s", line)
    return hp


def _load_dataset(manifest_path: Path, stats_path: Path, split: str):
    manifest = mocap.DatasetManifest.load(manifest_path)
    stats = mocap.NormalizationStats.load(stats_path)
    trials = mocap.load_split(manifest, split)
    return manifest, stats, [mocap.normalize(t, stats) for t in trials]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    actions = tuple(args.actions.split(","))
    manifest = mocap.generate_corpus(
        args.out, actions=actions, joints=args.joints, frames=args.frames,
        freq_lo=args.freq_lo, freq_hi=args.freq_hi, seed=args.seed,
        train_trials=args.train_trials, test_trials=args.test_trials)
    log.info("wrote corpus with manifest %s", manifest)
    print(manifest)
    return 0


def cmd_prep(args) -> int:
    manifest = mocap.DatasetManifest.load(args.data)
    trials = mocap.load_split(manifest, "train")
    stats = mocap.fit_stats(trials, eps_const=args.eps_const,
                            global_dims=args.global_dims)
    stats.save(args.out)
    log.info("fitted stats on %d trials: raw_dim=%d reduced_dim=%d",
             len(trials), stats.raw_dim, stats.reduced_dim)
    print(f"reduced_dim={stats.reduced_dim}")
    return 0


def cmd_train(args) -> int:
    hp = _resolve_hyper(args)
    _, stats, sequences = _load_dataset(args.data, args.stats, "train")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = T.TrainSchedule(iterations=args.iters, master_seed=args.seed,
                               checkpoint_every=args.checkpoint_every,
                               out_dir=out_dir)
    log.info("config: iterations=%d master_seed=%d checkpoint_every=%d",
             args.iters, args.seed, args.checkpoint_every)
    result = T.train(sequences, stats, hp, schedule,
                     resume_from=args.resume)
    report_path = args.report or (out_dir / "report.csv")
    T.reports_to_csv(result.reports, report_path)
    last = result.reports[-1]
    log.info("finished: iteration=%d mse=%g total=%g", last.iteration, last.mse,
             last.total)
    print(result.checkpoints[-1])
    return 0


def cmd_predict(args) -> int:
    stats = mocap.NormalizationStats.load(args.stats)
    ckpt = M.load_checkpoint(args.checkpoint, stats.fingerprint())
    hp = ckpt.hyper
    trial = mocap.load_trial(args.seed_file)
    if trial.num_frames < hp.seed_frames:
        log.error("seed file has %d frames, need %d", trial.num_frames,
                  hp.seed_frames)
        return 1
    seq = mocap.normalize(trial, stats)
    seed = seq.frames[-hp.seed_frames:]
    params = ckpt.to_params()
    pred = M.predict_sequence(seed, params, hp, mode="eval").data
    mocap.write_trial(mocap.denormalize_frames(pred, stats), args.out)
    log.info("wrote %d predicted frames to %s", hp.target_frames, args.out)
    return 0


def cmd_eval(args) -> int:
    _, stats, sequences = _load_dataset(args.data, args.stats, "test")
    ckpt = M.load_checkpoint(args.checkpoint, stats.fingerprint())
    horizons = tuple(int(x) for x in args.horizons.split(","))
    report = E.evaluate_checkpoint(ckpt, sequences, stats,
                                   num_sequences=args.num_sequences,
                                   seed=args.seed, horizons_ms=horizons,
                                   frame_ms=stats_frame_ms(args),
                                   dump_dir=args.dump)
    if args.out:
        Path(args.out).write_text(report.to_csv())
        log.info("wrote report to %s", args.out)
    print(report.format_table(), end="")
    return 0


def stats_frame_ms(args) -> float:
    manifest = mocap.DatasetManifest.load(args.data)
    return manifest.frame_ms


def cmd_gradcheck(args) -> int:
    hp_overrides = {}
    for key in ("seed_frames", "target_frames", "window", "channels", "fc_out",
                "dropout", "eta"):
        val = getattr(args, key, None)
        if val is not None:
            hp_overrides[key] = val
    hp = G.tiny_hyperparams(**hp_overrides)
    if args.no_long_term:
        hp = replace(hp, no_long_term=True)
    variants = {"mse": (False,), "full": (True,), "both": (False, True)}[args.variant]
    for line in C.format_config(hp).strip().split("\n"):
        log.info("config: %s", line)
    results = G.run_suite(seeds=tuple(range(args.seeds)), variants=variants,
                          tol=args.tol, hp=hp, pose_dim=args.pose_dim,
                          verbose=True, jobs=args.jobs)
    worst = max(r.max_rel_err for _, _, r in results)
    ok = all(r.passed for _, _, r in results)
    print(f"gradcheck: max rel err {worst:.3e} over {len(results)} runs -> "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


ABLATION_AXES = {
    "window": [("window", w) for w in (5, 10, 20)],
    "kernel": [("kernel", k) for k in ((2, 7), (7, 2), (4, 4))],
    "long_term": [("no_long_term", v) for v in (False, True)],
    "adversarial": [("adversarial", v) for v in (True, False)],
}


def cmd_ablate(args) -> int:
    base_hp = _resolve_hyper(args)
    _, stats, train_seqs = _load_dataset(args.data, args.stats, "train")
    manifest = mocap.DatasetManifest.load(args.data)
    test_trials = mocap.load_split(manifest, "test")
    test_seqs = [mocap.normalize(t, stats) for t in test_trials]

    horizons = [ms for ms in E.HORIZONS_MS_DEFAULT
                if ms // manifest.frame_ms <= base_hp.target_frames]
    rows = ["axis,value," + ",".join(f"ms{ms}" for ms in horizons) + ",train_mse"]
    for field_name, value in ABLATION_AXES[args.axis]:
        hp = replace(base_hp, **{field_name: value})
        schedule = T.TrainSchedule(iterations=args.iters, master_seed=args.seed,
                                   checkpoint_every=max(args.iters, 1))
        result = T.train(train_seqs, stats, hp, schedule)
        report = E.evaluate(E.model_predictor(result.params, hp), test_seqs,
                            stats, hp.seed_frames, hp.target_frames,
                            num_sequences=args.num_sequences, seed=args.seed,
                            horizons_ms=horizons, frame_ms=manifest.frame_ms)
        avg = report.average()
        label = C.format_value(field_name, value)
        tail_mse = float(np.mean([r.mse for r in result.reports[-10:]]))
        rows.append(f"{args.axis},{label},"
                    + ",".join(repr(avg[ms]) for ms in horizons)
                    + f",{tail_mse!r}")
        log.info("ablation %s=%s done (train mse %.4g)", args.axis, label,
                 tail_mse)
    text = "\n".join(rows) + "\n"
    Path(args.out).write_text(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convmotion",
        description="Convolutional sequence-to-sequence human motion prediction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic mocap corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--actions", default="walk,swing,wave")
    p.add_argument("--joints", type=int, default=8)
    p.add_argument("--frames", type=int, default=240)
    p.add_argument("--freq-lo", type=float, default=0.4)
    p.add_argument("--freq-hi", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-trials", type=int, default=2)
    p.add_argument("--test-trials", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="fit normalization statistics")
    p.add_argument("--data", type=Path, required=True, help="dataset manifest")
    p.add_argument("--out", type=Path, required=True, help="stats file to write")
    p.add_argument("--eps-const", type=float, default=mocap.EPS_CONST_DEFAULT,
                   dest="eps_const")
    p.add_argument("--global-dims", type=int, default=mocap.GLOBAL_DIMS_DEFAULT,
                   dest="global_dims")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stats", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=1000,
                   dest="checkpoint_every")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.add_argument("--report", type=Path, help="CSV report path")
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict future frames from a seed file")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--stats", type=Path, required=True)
    p.add_argument("--seed-file", type=Path, required=True, dest="seed_file")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a checkpoint at the error horizons")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stats", type=Path, required=True)
    p.add_argument("--num-sequences", type=int, default=8, dest="num_sequences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizons", default="80,160,320,400,1000")
    p.add_argument("--out", type=Path, help="CSV report path")
    p.add_argument("--dump", type=Path, help="directory for predicted sequences")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--variant", choices=("mse", "full", "both"), default="both")
    p.add_argument("--pose-dim", type=int, default=G.TINY_POSE_DIM,
                   dest="pose_dim")
    p.add_argument("--seed-frames", type=int, dest="seed_frames")
    p.add_argument("--target-frames", type=int, dest="target_frames")
    p.add_argument("--window", type=int)
    p.add_argument("--channels", type=C._parse_int_tuple)
    p.add_argument("--fc-out", type=int, dest="fc_out")
    p.add_argument("--dropout", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--no-long-term", action="store_true", dest="no_long_term")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run a configuration sweep and compare")
    p.add_argument("--axis", choices=sorted(ABLATION_AXES), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stats", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-sequences", type=int, default=4, dest="num_sequences")
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

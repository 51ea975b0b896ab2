"""Euler-angle evaluation protocol.

Predictions and ground truth are compared in denormalized angle space: each
non-global joint triple is converted exponential map -> rotation matrix ->
Euler angles, and the error at a horizon is the L2 norm of the difference
over the concatenated Euler vector, restricted to the kept dimensions (the
masked near-constant dimensions and the global block never contribute).
Horizons are expressed in milliseconds and map onto predicted frames through
the frame period (40 ms by default, so 80/160/320/400/1000 ms hit frames
2/4/8/10/25).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import model as M
from .mocap import (
    FRAME_MS_DEFAULT,
    MotionSequence,
    NormalizationStats,
    denormalize_frames,
    expmap_to_rotmat,
    format_trial,
    rotmat_to_euler,
)

HORIZONS_MS_DEFAULT = (80, 160, 320, 400, 1000)
# joints start after the leading translation triple
JOINT_START_DEFAULT = 3


def horizon_frames(horizons_ms=HORIZONS_MS_DEFAULT,
                   frame_ms: float = FRAME_MS_DEFAULT) -> list:
    """Map horizons to 1-based predicted frame numbers: floor(ms / frame_ms)."""
    frames = []
    for ms in horizons_ms:
        f = int(ms // frame_ms)
        if f < 1:
            raise ValueError(f"horizon {ms} ms is shorter than one frame")
        frames.append(f)
    if frames != sorted(frames):
        raise ValueError("horizons must be ascending")
    return frames


def frame_to_euler(frame: np.ndarray,
                   joint_start: int = JOINT_START_DEFAULT) -> np.ndarray:
    """Convert each joint triple of a raw-width frame to Euler angles."""
    out = np.array(frame, dtype=np.float64, copy=True)
    width = out.shape[0]
    for j in range(joint_start, width - 2, 3):
        out[j:j + 3] = rotmat_to_euler(expmap_to_rotmat(frame[j:j + 3]))
    return out


def euler_error(pred_frames: np.ndarray, truth_frames: np.ndarray,
                frame_idx: int, stats: NormalizationStats,
                joint_start: int = JOINT_START_DEFAULT) -> float:
    """Euler-angle distance between prediction and truth at one frame.

    Both inputs are denormalized ``[num_frames, raw_dim]`` arrays; the error
    is the L2 norm of the Euler-angle difference over kept dimensions.
    """
    pred_frames = np.asarray(pred_frames, dtype=np.float64)
    truth_frames = np.asarray(truth_frames, dtype=np.float64)
    if pred_frames.shape[1] != truth_frames.shape[1]:
        raise ValueError(
            f"width mismatch: {pred_frames.shape[1]} vs {truth_frames.shape[1]}"
        )
    if pred_frames.shape[1] != stats.raw_dim:
        raise ValueError(
            f"frames of width {pred_frames.shape[1]} do not match stats width "
            f"{stats.raw_dim}"
        )
    if not 0 <= frame_idx < min(pred_frames.shape[0], truth_frames.shape[0]):
        raise IndexError(f"frame index {frame_idx} out of range")
    pe = frame_to_euler(pred_frames[frame_idx], joint_start)
    te = frame_to_euler(truth_frames[frame_idx], joint_start)
    diff = (pe - te)[stats.kept]
    return float(np.sqrt(np.sum(diff * diff)))


def zero_velocity_predict(seed: np.ndarray, target_frames: int) -> np.ndarray:
    """Baseline predictor: repeat the last observed frame."""
    seed = np.asarray(seed)
    return np.repeat(seed[-1:, :], target_frames, axis=0)


# ---------------------------------------------------------------------------
# Horizon reports
# ---------------------------------------------------------------------------


@dataclass
class HorizonReport:
    horizons_ms: tuple
    frame_ms: float
    errors: dict  # action -> {ms -> mean error}
    num_sequences: int
    seed: int
    actions: list = field(default_factory=list)

    def __post_init__(self):
        if not self.actions:
            self.actions = sorted(self.errors)

    def average(self) -> dict:
        """All-action mean per horizon."""
        out = {}
        for ms in self.horizons_ms:
            out[ms] = float(np.mean([self.errors[a][ms] for a in self.actions]))
        return out

    def to_csv(self) -> str:
        lines = ["action,ms,error"]
        for action in self.actions:
            for ms in self.horizons_ms:
                lines.append(f"{action},{ms},{self.errors[action][ms]!r}")
        for ms, err in self.average().items():
            lines.append(f"Average,{ms},{err!r}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        name_w = max(len("Average"), *(len(a) for a in self.actions)) + 2
        header = "ms".ljust(name_w) + "".join(f"{ms:>8d}" for ms in self.horizons_ms)
        rows = [header, "-" * len(header)]
        for action in self.actions:
            row = action.ljust(name_w)
            row += "".join(f"{self.errors[action][ms]:8.3f}"
                           for ms in self.horizons_ms)
            rows.append(row)
        avg = self.average()
        rows.append("Average".ljust(name_w)
                    + "".join(f"{avg[ms]:8.3f}" for ms in self.horizons_ms))
        return "\n".join(rows) + "\n"


def evaluate(predictor: Callable[[np.ndarray], np.ndarray],
             test_sequences: Sequence[MotionSequence],
             stats: NormalizationStats, seed_frames: int, target_frames: int,
             num_sequences: int = 8, seed: int = 0,
             horizons_ms=HORIZONS_MS_DEFAULT,
             frame_ms: float = FRAME_MS_DEFAULT,
             joint_start: int = JOINT_START_DEFAULT,
             dump_dir=None) -> HorizonReport:
    """Score a predictor on randomly drawn windows, per action and horizon.

    ``predictor`` maps a normalized ``[t, L]`` seed to a normalized ``[T, L]``
    prediction. Windows are drawn deterministically from ``seed``; the same
    seed always yields the same report.
    """
    frames_at = horizon_frames(horizons_ms, frame_ms)
    if max(frames_at) > target_frames:
        raise ValueError(
            f"longest horizon needs frame {max(frames_at)} but only "
            f"{target_frames} frames are predicted"
        )
    window_len = seed_frames + target_frames
    by_action: dict = {}
    for seq in test_sequences:
        if seq.num_frames >= window_len:
            by_action.setdefault(seq.action, []).append(seq)
    if not by_action:
        raise ValueError(f"no test trial is long enough for {window_len} frames")

    errors: dict = {}
    for a_idx, action in enumerate(sorted(by_action)):
        seqs = by_action[action]
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([int(seed), a_idx])))
        sums = {ms: 0.0 for ms in horizons_ms}
        for s_idx in range(num_sequences):
            pick = int(rng.integers(0, len(seqs)))
            seq = seqs[pick]
            offset = int(rng.integers(0, seq.num_frames - window_len + 1))
            seed_norm = seq.frames[offset:offset + seed_frames]
            truth_norm = seq.frames[offset + seed_frames:offset + window_len]
            pred_norm = np.asarray(predictor(seed_norm))
            if pred_norm.shape != (target_frames, seq.pose_dim):
                raise ValueError(
                    f"predictor returned shape {pred_norm.shape}, expected "
                    f"{(target_frames, seq.pose_dim)}"
                )
            pred_raw = denormalize_frames(pred_norm, stats)
            truth_raw = denormalize_frames(truth_norm, stats)
            for ms, f in zip(horizons_ms, frames_at):
                sums[ms] += euler_error(pred_raw, truth_raw, f - 1, stats,
                                        joint_start)
            if dump_dir is not None:
                out = Path(dump_dir)
                out.mkdir(parents=True, exist_ok=True)
                (out / f"{action}_{s_idx}.txt").write_text(format_trial(pred_raw))
        errors[action] = {ms: sums[ms] / num_sequences for ms in horizons_ms}

    return HorizonReport(tuple(horizons_ms), frame_ms, errors, num_sequences,
                         seed)


def model_predictor(params: M.ModelParams, hp: M.HyperParams):
    """Wrap trained parameters as an eval-mode seed -> prediction function."""

    def predict(seed_norm: np.ndarray) -> np.ndarray:
        return M.predict_sequence(seed_norm, params, hp, mode="eval").data

    return predict


def evaluate_checkpoint(checkpoint: M.Checkpoint,
                        test_sequences: Sequence[MotionSequence],
                        stats: NormalizationStats, num_sequences: int = 8,
                        seed: int = 0, horizons_ms=HORIZONS_MS_DEFAULT,
                        frame_ms: float = FRAME_MS_DEFAULT,
                        dump_dir=None) -> HorizonReport:
    """Evaluate a checkpoint; refuses stats that do not match its fingerprint."""
    if checkpoint.stats_fingerprint != stats.fingerprint():
        raise ValueError(
            "checkpoint was trained against different normalization stats; "
            "refusing to evaluate"
        )
    hp = checkpoint.hyper
    params = checkpoint.to_params()
    return evaluate(model_predictor(params, hp), test_sequences, stats,
                    hp.seed_frames, hp.target_frames, num_sequences, seed,
                    horizons_ms, frame_ms, dump_dir=dump_dir)

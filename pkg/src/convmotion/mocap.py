"""Motion-capture ingestion and preprocessing.

Trials are plain text files, one frame per line, comma-separated joint angles
in exponential-map parameterization with a leading global translation and
root-orientation block. Preprocessing pools per-dimension statistics over the
training trials, drops near-constant dimensions, zeroes the global block, and
standardizes the rest. Rotation conversions provide the exponential-map ->
rotation matrix -> Euler-angle chain used by the evaluation metric.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

# One predicted frame spans 40 ms: the 25-frame horizon covers one second.
FRAME_MS_DEFAULT = 40.0
# Leading global block: 3 translation + 3 root-orientation dimensions.
GLOBAL_DIMS_DEFAULT = 6
EPS_CONST_DEFAULT = 1e-4

STATS_FORMAT = "convmotion-stats"
STATS_VERSION = 1
MANIFEST_FORMAT = "convmotion-manifest"
MANIFEST_VERSION = 1


class ParseError(ValueError):
    """Malformed trial file."""


# ---------------------------------------------------------------------------
# Trial files
# ---------------------------------------------------------------------------


@dataclass
class RawTrial:
    """One recorded motion trial in raw (unnormalized) angle space."""

    frames: np.ndarray  # [num_frames, raw_dim]
    action: str = "unknown"
    subject: str = "unknown"
    trial_id: int = 0
    frame_ms: float = FRAME_MS_DEFAULT

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def raw_dim(self) -> int:
        return self.frames.shape[1]


def parse_trial(data, action="unknown", subject="unknown", trial_id=0,
                frame_ms=FRAME_MS_DEFAULT) -> RawTrial:
    """Parse comma-separated frames; every line must carry the same width."""
    if isinstance(data, bytes):
        text = data.decode("utf-8")
    else:
        text = data
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        tokens = line.split(",")
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise ParseError(
                f"line {lineno}: expected {width} values, got {len(tokens)}"
            )
        try:
            rows.append([float(tok) for tok in tokens])
        except ValueError:
            bad = next(tok for tok in tokens if not _is_float(tok))
            raise ParseError(f"line {lineno}: invalid number {bad.strip()!r}") from None
    if not rows:
        raise ParseError("empty file")
    frames = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(frames)):
        raise ParseError("file contains non-finite values")
    return RawTrial(frames, action=action, subject=subject, trial_id=trial_id,
                    frame_ms=frame_ms)


def _is_float(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def format_trial(frames: np.ndarray) -> str:
    """Serialize frames so that a parse round-trips bit-exactly (repr floats)."""
    frames = np.asarray(frames, dtype=np.float64)
    buf = io.StringIO()
    for row in frames:
        buf.write(",".join(repr(float(v)) for v in row))
        buf.write("\n")
    return buf.getvalue()


def write_trial(frames: np.ndarray, path) -> None:
    Path(path).write_text(format_trial(frames))


def load_trial(path, action="unknown", subject="unknown", trial_id=0,
               frame_ms=FRAME_MS_DEFAULT) -> RawTrial:
    return parse_trial(Path(path).read_text(), action=action, subject=subject,
                       trial_id=trial_id, frame_ms=frame_ms)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass
class NormalizationStats:
    """Per-dimension mean/std plus the kept-dimension mask.

    A dimension is masked out when its pooled population standard deviation
    falls below ``eps_const``; the leading ``global_dims`` dimensions
    (translation and root orientation) are always masked.
    """

    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray  # bool mask, True = kept
    eps_const: float = EPS_CONST_DEFAULT
    global_dims: int = GLOBAL_DIMS_DEFAULT

    @property
    def raw_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def reduced_dim(self) -> int:
        return int(self.kept.sum())

    def to_json(self) -> str:
        doc = {
            "format": STATS_FORMAT,
            "version": STATS_VERSION,
            "eps_const": self.eps_const,
            "global_dims": self.global_dims,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "kept": [bool(k) for k in self.kept],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NormalizationStats":
        doc = json.loads(text)
        if doc.get("format") != STATS_FORMAT:
            raise ValueError(f"not a stats document: format={doc.get('format')!r}")
        if doc.get("version") != STATS_VERSION:
            raise ValueError(f"unsupported stats version {doc.get('version')!r}")
        return cls(
            mean=np.asarray(doc["mean"], dtype=np.float64),
            std=np.asarray(doc["std"], dtype=np.float64),
            kept=np.asarray(doc["kept"], dtype=bool),
            eps_const=float(doc["eps_const"]),
            global_dims=int(doc["global_dims"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        return cls.from_json(Path(path).read_text())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@dataclass
class MotionSequence:
    """Frames in normalized reduced space, tied to the stats that produced them."""

    frames: np.ndarray  # [num_frames, reduced_dim]
    stats: NormalizationStats
    action: str = "unknown"
    subject: str = "unknown"
    trial_id: int = 0
    frame_ms: float = FRAME_MS_DEFAULT

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def pose_dim(self) -> int:
        return self.frames.shape[1]


def fit_stats(trials: Sequence[RawTrial], eps_const: float = EPS_CONST_DEFAULT,
              global_dims: int = GLOBAL_DIMS_DEFAULT) -> NormalizationStats:
    """Pool mean/std over all frames of all trials (population convention)."""
    trials = list(trials)
    if not trials:
        raise ValueError("fit_stats requires at least one trial")
    width = trials[0].raw_dim
    for t in trials:
        if t.raw_dim != width:
            raise ValueError(
                f"trial width mismatch: expected {width}, got {t.raw_dim} "
                f"({t.subject}/{t.action}_{t.trial_id})"
            )
    pooled = np.concatenate([t.frames for t in trials], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)  # ddof=0
    kept = std >= eps_const
    kept[:global_dims] = False
    return NormalizationStats(mean=mean, std=std, kept=kept,
                              eps_const=eps_const, global_dims=global_dims)


def normalize(trial: RawTrial, stats: NormalizationStats) -> MotionSequence:
    frames = normalize_frames(trial.frames, stats)
    return MotionSequence(frames, stats, action=trial.action,
                          subject=trial.subject, trial_id=trial.trial_id,
                          frame_ms=trial.frame_ms)


def normalize_frames(frames: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != stats.raw_dim:
        raise ValueError(
            f"frames of width {frames.shape[-1]} do not match stats width {stats.raw_dim}"
        )
    kept = stats.kept
    return (frames[:, kept] - stats.mean[kept]) / stats.std[kept]


def denormalize_frames(frames: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Expand reduced frames back to raw width; masked dims come back as zero."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != stats.reduced_dim:
        raise ValueError(
            f"frames of width {frames.shape[-1]} do not match reduced width "
            f"{stats.reduced_dim}"
        )
    out = np.zeros((frames.shape[0], stats.raw_dim), dtype=np.float64)
    kept = stats.kept
    out[:, kept] = frames * stats.std[kept] + stats.mean[kept]
    return out


# ---------------------------------------------------------------------------
# Rotation conversions
# ---------------------------------------------------------------------------


def _skew(r: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -r[2], r[1]],
        [r[2], 0.0, -r[0]],
        [-r[1], r[0], 0.0],
    ])


def expmap_to_rotmat(r) -> np.ndarray:
    """Rodrigues formula; below theta=1e-8 the second-order series is used."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3,):
        raise ValueError(f"exponential map must be a 3-vector, got shape {r.shape}")
    theta = float(np.linalg.norm(r))
    K = _skew(r)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    return (np.eye(3)
            + (math.sin(theta) / theta) * K
            + ((1.0 - math.cos(theta)) / (theta * theta)) * (K @ K))


_EULER_ORTHO_TOL = 1e-6


def rotmat_to_euler(R) -> np.ndarray:
    """Decompose a rotation into Euler angles ``(e1, e2, e3)``.

    Convention: ``R == rot_x(-e1) @ rot_y(-e2) @ rot_z(-e3)`` (the benchmark
    convention for this metric, keyed off ``R[0, 2]``). Gimbal lock
    (``|R[0, 2]| == 1``) takes the degenerate branch with ``e3 = 0``.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation matrix must be 3x3, got shape {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > _EULER_ORTHO_TOL:
        raise ValueError(
            f"matrix is not orthonormal (max |R^T R - I| = {err:.3e})"
        )
    s = R[0, 2]
    if abs(s) >= 1.0 - 1e-12:
        e3 = 0.0
        if s < 0.0:  # R[0, 2] == -1
            e2 = math.pi / 2.0
            e1 = math.atan2(R[1, 0], R[1, 1])
        else:  # R[0, 2] == +1
            e2 = -math.pi / 2.0
            e1 = math.atan2(-R[1, 0], R[1, 1])
        return np.array([e1, e2, e3])
    e2 = -math.asin(s)
    c = math.cos(e2)
    e1 = math.atan2(R[1, 2] / c, R[2, 2] / c)
    e3 = math.atan2(R[0, 1] / c, R[0, 0] / c)
    return np.array([e1, e2, e3])


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotmat(e) -> np.ndarray:
    """Recompose angles produced by ``rotmat_to_euler``."""
    e = np.asarray(e, dtype=np.float64)
    return _rot_x(-e[0]) @ _rot_y(-e[1]) @ _rot_z(-e[2])


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


@dataclass
class TrialRef:
    subject: str
    action: str
    trial: int
    path: str  # relative to the manifest's directory


@dataclass
class DatasetManifest:
    train: list
    test: list
    frame_ms: float = FRAME_MS_DEFAULT
    root: Optional[Path] = None  # set when loaded from disk

    def actions(self) -> list:
        seen = []
        for ref in self.train + self.test:
            if ref.action not in seen:
                seen.append(ref.action)
        return seen

    def to_json(self) -> str:
        def encode(refs):
            return [
                {"subject": r.subject, "action": r.action, "trial": r.trial,
                 "path": r.path}
                for r in refs
            ]

        doc = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "frame_ms": self.frame_ms,
            "train": encode(self.train),
            "test": encode(self.test),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"not a dataset manifest: {path}")

        def decode(entries):
            return [TrialRef(e["subject"], e["action"], int(e["trial"]), e["path"])
                    for e in entries]

        return cls(train=decode(doc["train"]), test=decode(doc["test"]),
                   frame_ms=float(doc["frame_ms"]), root=path.parent)


def manifest_from_tree(root, test_subject: str = "S5",
                       frame_ms: float = FRAME_MS_DEFAULT) -> DatasetManifest:
    """Scan a ``<root>/<subject>/<action>_<trial>.txt`` tree into a manifest.

    Every trial under ``test_subject`` lands in the test split; all other
    subjects train.
    """
    root = Path(root)
    train_refs, test_refs = [], []
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        subject = subject_dir.name
        for path in sorted(subject_dir.glob("*.txt")):
            stem = path.stem
            action, _, trial_str = stem.rpartition("_")
            if not action or not trial_str.isdigit():
                continue
            ref = TrialRef(subject, action, int(trial_str),
                           f"{subject}/{path.name}")
            (test_refs if subject == test_subject else train_refs).append(ref)
    if not train_refs:
        raise ValueError(f"no trials found under {root}")
    return DatasetManifest(train=train_refs, test=test_refs, frame_ms=frame_ms,
                           root=root)


def load_split(manifest: DatasetManifest, split: str) -> list:
    """Load and parse every trial of ``split`` ('train' or 'test')."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if manifest.root is None:
        raise ValueError("manifest has no root directory; load it from disk")
    refs = manifest.train if split == "train" else manifest.test
    trials = []
    for ref in refs:
        trials.append(load_trial(manifest.root / ref.path, action=ref.action,
                                 subject=ref.subject, trial_id=ref.trial,
                                 frame_ms=manifest.frame_ms))
    return trials


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def synthetic_trial_frames(rng: np.random.Generator, joints: int, frames: int,
                           freq_lo: float, freq_hi: float,
                           frame_ms: float = FRAME_MS_DEFAULT) -> np.ndarray:
    """Sum-of-sinusoids joint angles with per-joint phase coupling.

    Produces ``[frames, 6 + 3*joints]`` rows: a zero global block followed by
    three angle dimensions per joint. Neighbouring joints share the base
    frequency but are offset in phase, giving wave-like coordinated motion.
    """
    raw_dim = GLOBAL_DIMS_DEFAULT + 3 * joints
    out = np.zeros((frames, raw_dim))
    t = np.arange(frames) * (frame_ms / 1000.0)
    base_freq = rng.uniform(freq_lo, freq_hi)
    trial_phase = rng.uniform(0.0, 2.0 * math.pi)
    for j in range(joints):
        joint_phase = 2.0 * math.pi * j / joints + trial_phase
        for d in range(3):
            col = GLOBAL_DIMS_DEFAULT + 3 * j + d
            amp = rng.uniform(0.3, 0.8)
            harmonic = 1.0 + d * 0.5
            dim_phase = rng.uniform(-0.4, 0.4)
            offset = rng.uniform(-0.3, 0.3)
            out[:, col] = offset + amp * np.sin(
                2.0 * math.pi * base_freq * harmonic * t + joint_phase + dim_phase
            )
    return out


def generate_corpus(root, actions=("walk", "swing", "wave"), joints: int = 8,
                    frames: int = 240, freq_lo: float = 0.2, freq_hi: float = 0.6,
                    seed: int = 0, train_trials: int = 2, test_trials: int = 2,
                    frame_ms: float = FRAME_MS_DEFAULT,
                    train_subject: str = "S1", test_subject: str = "S5") -> Path:
    """Write a synthetic corpus tree plus its manifest; returns the manifest path."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    train_refs, test_refs = [], []
    for action in actions:
        for split, subject, count, refs in (
            ("train", train_subject, train_trials, train_refs),
            ("test", test_subject, test_trials, test_refs),
        ):
            subject_dir = root / subject
            subject_dir.mkdir(parents=True, exist_ok=True)
            for trial in range(1, count + 1):
                data = synthetic_trial_frames(rng, joints, frames, freq_lo,
                                              freq_hi, frame_ms)
                rel = f"{subject}/{action}_{trial}.txt"
                write_trial(data, root / rel)
                refs.append(TrialRef(subject, action, trial, rel))
    manifest = DatasetManifest(train=train_refs, test=test_refs, frame_ms=frame_ms,
                               root=root)
    manifest_path = root / "manifest.json"
    manifest.save(manifest_path)
    return manifest_path

"""Training: losses, Adam, window sampling, and the alternating loop.

Each iteration samples a batch of (seed, target) windows across all actions,
takes one generator step on the combined objective (prediction MSE + weight
penalty - adversarial log-score) and, when the adversarial regularizer is
enabled, one discriminator step on the real/generated classification loss
with the generated sequences detached. Everything is deterministic under the
master seed: iteration ``i`` draws from RNG streams derived from
``(master_seed, i)``, so resuming from a checkpoint replays the exact
trajectory of an uninterrupted run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import GradTape, Tensor, backward
from .mocap import MotionSequence, NormalizationStats

PROB_EPS = 1e-7

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_mse(pred: Tensor, target: Tensor) -> Tensor:
    """Per-sequence mean over time of squared pose error, averaged over the batch."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ad.ShapeError(
            f"loss_mse: prediction {pred.shape} vs target {target.shape}"
        )
    if pred.ndim == 2:
        B, T = 1, pred.shape[0]
    elif pred.ndim == 3:
        B, T = pred.shape[0], pred.shape[1]
    else:
        raise ad.ShapeError(f"loss_mse expects [T, L] or [B, T, L], got {pred.shape}")
    diff = ad.sub(pred, target)
    return ad.mul(ad.tsum(ad.square(diff)), 1.0 / (B * T))


def loss_discriminator(real_prob: Tensor, fake_prob: Tensor) -> Tensor:
    """Batch-mean binary cross-entropy: real sequences toward 1, generated
    toward 0. Probabilities are clamped to keep the logs finite."""
    rp = ad.clip(real_prob, PROB_EPS, 1.0 - PROB_EPS)
    fp = ad.clip(fake_prob, PROB_EPS, 1.0 - PROB_EPS)
    real_term = ad.mul(ad.tmean(ad.tlog(rp)), -1.0)
    fake_term = ad.mul(ad.tmean(ad.tlog(1.0 - fp)), -1.0)
    return ad.add(real_term, fake_term)


@dataclass
class LossTerms:
    """Scalar breakdown of one generator objective evaluation."""

    mse: float
    l2: float
    adv: float
    total: float


def weight_penalty(named_params: dict) -> Tensor:
    """Sum of squared entries over every given parameter tensor."""
    total = None
    for name in sorted(named_params):
        term = ad.sumsq(named_params[name])
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("weight_penalty needs at least one parameter")
    return total


def loss_generator(pred: Tensor, target, gen_params: dict,
                   fake_prob: Optional[Tensor], hp: M.HyperParams):
    """Combined objective; returns the loss tensor and its term breakdown.

    Discriminator parameters never appear in ``gen_params``: they are outside
    the weight penalty and receive no update from this loss.
    """
    mse_t = loss_mse(pred, target)
    l2_t = weight_penalty(gen_params)
    loss = ad.add(mse_t, ad.mul(l2_t, hp.lambda_l2))
    lam_adv = hp.effective_lambda_adv
    if fake_prob is not None and lam_adv > 0.0:
        fp = ad.clip(fake_prob, PROB_EPS, 1.0 - PROB_EPS)
        adv_t = ad.mul(ad.tmean(ad.tlog(fp)), -1.0)
        loss = ad.add(loss, ad.mul(adv_t, lam_adv))
        adv_val = adv_t.item()
    else:
        adv_val = 0.0
    terms = LossTerms(mse=mse_t.item(), l2=l2_t.item(), adv=adv_val,
                      total=loss.item())
    return loss, terms


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates, shaped exactly like their parameters."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={n: np.zeros_like(p.data) for n, p in params.items()},
                   v={n: np.zeros_like(p.data) for n, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place. Parameters without a gradient
    entry are left untouched; non-finite gradients abort with the name."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient for parameter {name!r} at Adam step {t}"
            )
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.assign_(p.data - lr * update)


def grads_by_name(named_params: dict, grads_by_tensor: dict) -> dict:
    return {name: grads_by_tensor.get(p)
            for name, p in named_params.items()
            if grads_by_tensor.get(p) is not None}


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    seeds: np.ndarray    # [B, t, L]
    targets: np.ndarray  # [B, T, L]
    actions: list


class WindowSampler:
    """Uniform draws over every admissible (trial, start-offset) pair."""

    def __init__(self, sequences: Sequence[MotionSequence], seed_frames: int,
                 target_frames: int):
        self.window_len = seed_frames + target_frames
        self.seed_frames = seed_frames
        self.sequences = [s for s in sequences
                          if s.num_frames >= self.window_len]
        if not self.sequences:
            raise ValueError(
                f"no trial is long enough for a {self.window_len}-frame window"
            )
        counts = np.array([s.num_frames - self.window_len + 1
                           for s in self.sequences])
        self._cum = np.cumsum(counts)
        self.total_windows = int(self._cum[-1])

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        flat = rng.integers(0, self.total_windows, size=batch_size)
        seeds, targets, actions = [], [], []
        for idx in flat:
            trial = int(np.searchsorted(self._cum, idx, side="right"))
            offset = int(idx - (self._cum[trial - 1] if trial else 0))
            seq = self.sequences[trial]
            window = seq.frames[offset:offset + self.window_len]
            seeds.append(window[:self.seed_frames])
            targets.append(window[self.seed_frames:])
            actions.append(seq.action)
        return Batch(np.stack(seeds), np.stack(targets), actions)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainSchedule:
    iterations: int
    master_seed: int = 0
    checkpoint_every: int = 1000
    out_dir: Optional[Path] = None
    validation: Optional[Sequence] = None  # MotionSequences for best-checkpoint


@dataclass
class IterationReport:
    iteration: int
    mse: float
    l2: float
    adv: float
    d_loss: Optional[float]
    total: float
    ms_per_iter: float = 0.0  # wall clock; excluded from determinism guarantees

    def deterministic_fields(self) -> tuple:
        return (self.iteration, self.mse, self.l2, self.adv, self.d_loss,
                self.total)


@dataclass
class TrainResult:
    params: M.ModelParams
    reports: list
    checkpoints: list = field(default_factory=list)
    best_checkpoint: Optional[Path] = None


REPORT_COLUMNS = ("iteration", "mse", "l2", "adv", "d_loss", "total", "ms_per_iter")


def reports_to_csv(reports, path=None, include_timing: bool = True) -> str:
    cols = REPORT_COLUMNS if include_timing else REPORT_COLUMNS[:-1]
    lines = [",".join(cols)]
    for r in reports:
        row = [str(r.iteration), repr(r.mse), repr(r.l2), repr(r.adv),
               "" if r.d_loss is None else repr(r.d_loss), repr(r.total)]
        if include_timing:
            row.append(repr(r.ms_per_iter))
        lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _iteration_rngs(master_seed: int, iteration: int):
    """Independent per-iteration streams: (sampling, generator dropout, spare)."""
    ss = np.random.SeedSequence([int(master_seed), int(iteration)])
    children = ss.spawn(3)
    return tuple(np.random.Generator(np.random.PCG64(c)) for c in children)


def _validation_mse(params, hp, sampler, master_seed) -> float:
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(master_seed), 987654321])))
    batch = sampler.sample(rng, min(8, hp.batch_size))
    pred = M.predict_sequence(Tensor(batch.seeds), params, hp, mode="eval")
    return loss_mse(pred, Tensor(batch.targets)).item()


def train(sequences: Sequence[MotionSequence], stats: NormalizationStats,
          hp: M.HyperParams, schedule: TrainSchedule,
          params: Optional[M.ModelParams] = None,
          resume_from=None) -> TrainResult:
    """Run the alternating optimization; returns parameters and the report stream.

    ``resume_from`` may be a checkpoint path or ``Checkpoint``; training
    continues from its stored iteration with restored optimizer moments and
    reproduces the uninterrupted trajectory exactly.
    """
    sequences = list(sequences)
    if not sequences:
        raise ValueError("training requires a non-empty dataset")
    pose_dim = sequences[0].pose_dim
    sampler = WindowSampler(sequences, hp.seed_frames, hp.target_frames)

    start_iteration = 0
    gen_state = disc_state = None
    master_seed = schedule.master_seed
    if resume_from is not None:
        ckpt = (resume_from if isinstance(resume_from, M.Checkpoint)
                else M.load_checkpoint(resume_from, stats.fingerprint()))
        if ckpt.stats_fingerprint != stats.fingerprint():
            raise ValueError("checkpoint stats fingerprint does not match dataset")
        params = ckpt.to_params()
        start_iteration = int(ckpt.extra.get("iteration", 0))
        master_seed = int(ckpt.extra.get("master_seed", master_seed))
        gen_state, disc_state = _optimizer_from_tensors(ckpt, params, hp)
    elif params is None:
        init_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([int(master_seed), 0])))
        params = M.init_params(hp, pose_dim, init_rng)

    gen_named = params.generator_named(include_long=not hp.no_long_term)
    disc_named = params.discriminator_named()
    if gen_state is None:
        gen_state = AdamState.for_params(gen_named)
    if disc_state is None:
        disc_state = AdamState.for_params(disc_named)

    reports: list = []
    checkpoints: list = []
    best_path = None
    best_val = np.inf
    val_sampler = (WindowSampler(list(schedule.validation), hp.seed_frames,
                                 hp.target_frames)
                   if schedule.validation else None)

    for it in range(start_iteration + 1, schedule.iterations + 1):
        t0 = time.perf_counter()
        sample_rng, gen_rng, _spare = _iteration_rngs(master_seed, it)
        batch = sampler.sample(sample_rng, hp.batch_size)
        seeds_t = Tensor(batch.seeds)
        targets_t = Tensor(batch.targets)

        # generator step on the combined objective
        with GradTape() as tape:
            pred = M.predict_sequence(seeds_t, params, hp, teacher=targets_t,
                                      mode="train", rng=gen_rng)
            fake_prob = None
            if hp.adversarial and hp.lambda_adv > 0.0:
                full_fake = ad.concat([seeds_t, pred], axis=1)
                fake_prob = M.discriminate(full_fake, params.discriminator, hp,
                                           mode="train")
            loss, terms = loss_generator(pred, targets_t, gen_named, fake_prob, hp)
        if not np.isfinite(terms.total):
            raise FloatingPointError(
                f"non-finite generator loss at iteration {it}: {terms}"
            )
        grads = backward(loss, tape)
        adam_step(gen_named, grads_by_name(gen_named, grads), gen_state,
                  hp.learning_rate)

        # discriminator step on the classification loss, fake detached
        d_loss_val = None
        if hp.adversarial and hp.lambda_adv > 0.0:
            fake_frames = Tensor(pred.data.copy())
            with GradTape() as dtape:
                real_p = M.discriminate(ad.concat([seeds_t, targets_t], axis=1),
                                        params.discriminator, hp, mode="train")
                fake_p = M.discriminate(ad.concat([seeds_t, fake_frames], axis=1),
                                        params.discriminator, hp, mode="train")
                d_loss = loss_discriminator(real_p, fake_p)
            d_loss_val = d_loss.item()
            if not np.isfinite(d_loss_val):
                raise FloatingPointError(
                    f"non-finite discriminator loss at iteration {it}"
                )
            dgrads = backward(d_loss, dtape)
            adam_step(disc_named, grads_by_name(disc_named, dgrads), disc_state,
                      hp.learning_rate)

        ms = (time.perf_counter() - t0) * 1000.0
        reports.append(IterationReport(it, terms.mse, terms.l2, terms.adv,
                                       d_loss_val, terms.total, ms))

        if schedule.out_dir is not None and (
                it % schedule.checkpoint_every == 0 or it == schedule.iterations):
            path = Path(schedule.out_dir) / f"ckpt_{it:07d}.ckpt"
            _save_training_checkpoint(path, params, hp, pose_dim, stats, it,
                                      master_seed, gen_state, disc_state)
            checkpoints.append(path)
            if val_sampler is not None:
                val = _validation_mse(params, hp, val_sampler, master_seed)
                if val < best_val:
                    best_val = val
                    best_path = Path(schedule.out_dir) / "best.ckpt"
                    _save_training_checkpoint(best_path, params, hp, pose_dim,
                                              stats, it, master_seed, gen_state,
                                              disc_state)

    return TrainResult(params=params, reports=reports, checkpoints=checkpoints,
                       best_checkpoint=best_path)


def _save_training_checkpoint(path, params, hp, pose_dim, stats, iteration,
                              master_seed, gen_state, disc_state) -> None:
    tensors = M.tensors_from_params(params)
    for prefix, state in (("optim.gen", gen_state), ("optim.disc", disc_state)):
        for name, arr in state.m.items():
            tensors[f"{prefix}.m.{name}"] = arr
        for name, arr in state.v.items():
            tensors[f"{prefix}.v.{name}"] = arr
    extra = {
        "iteration": iteration,
        "master_seed": master_seed,
        "adam_gen_step": gen_state.step,
        "adam_disc_step": disc_state.step,
    }
    M.save_checkpoint(path, hp, pose_dim, stats.fingerprint(), tensors, extra)


def _optimizer_from_tensors(ckpt: M.Checkpoint, params: M.ModelParams,
                            hp: M.HyperParams):
    gen_named = params.generator_named(include_long=not hp.no_long_term)
    disc_named = params.discriminator_named()

    def restore(prefix, named, step):
        m = {n: ckpt.tensors[f"{prefix}.m.{n}"].copy() for n in named}
        v = {n: ckpt.tensors[f"{prefix}.v.{n}"].copy() for n in named}
        return AdamState(m=m, v=v, step=step)

    gen = restore("optim.gen", gen_named, int(ckpt.extra.get("adam_gen_step", 0)))
    disc = restore("optim.disc", disc_named,
                   int(ckpt.extra.get("adam_disc_step", 0)))
    return gen, disc

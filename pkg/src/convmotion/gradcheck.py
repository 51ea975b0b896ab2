"""Full-model gradient verification by central finite differences.

The reverse-mode gradients of the complete training objective are compared,
parameter by parameter, against central differences of an independent
reference evaluator. The reference implementation below recomputes the whole
forward pass (encoders, recursive decoding, losses, optional discriminator
score) in plain numpy with no autodiff machinery, and evaluates many
perturbed parameter copies at once via a leading batch axis, which makes
differencing every scalar parameter affordable.

Dropout is exercised under a fixed mask: both routes draw identical masks
from the same seeded stream, re-drawn per evaluation, so the objective stays
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import autodiff as ad
from . import model as M
from . import training as T
from .autodiff import GradCheckEntry, GradCheckReport, GradTape, Tensor, backward

PROB_EPS = T.PROB_EPS

# desk-scale configuration used by the verification suite
TINY_POSE_DIM = 12


def tiny_hyperparams(**overrides) -> M.HyperParams:
    base = dict(seed_frames=16, target_frames=6, window=8,
                channels=(8, 16, 16), fc_out=64, dropout=0.5, batch_size=1)
    base.update(overrides)
    return M.HyperParams(**base)


# ---------------------------------------------------------------------------
# Reference objective: plain numpy, leading parameter-batch axis
# ---------------------------------------------------------------------------


def _same_pad(n, k, s):
    target = -(-n // s)
    total = max(0, (target - 1) * s + k - n)
    return -(-total // 2)


def _conv_p(x, k, b, stride):
    """Batched conv: x [Px,C,H,W], k [Pk,Co,C,kh,kw], b [Pb,Co].

    Each parameter-batch combination maps onto a single (or one batched)
    GEMM; plain einsum falls back to the slow non-BLAS kernel here.
    """
    sH, sW = stride
    Pk, Co, C, kh, kw = k.shape
    Px, _, H, W = x.shape
    pH, pW = _same_pad(H, kh, sH), _same_pad(W, kw, sW)
    if pH or pW:
        xp = np.zeros((Px, C, H + 2 * pH, W + 2 * pW), dtype=x.dtype)
        xp[:, :, pH:pH + H, pW:pW + W] = x
    else:
        xp = np.ascontiguousarray(x)
    Ho = (H + 2 * pH - kh) // sH + 1
    Wo = (W + 2 * pW - kw) // sW + 1
    s0, s1, s2, s3 = xp.strides
    ckk = C * kh * kw
    k2 = k.reshape(Pk, Co, ckk)
    # axis order of the window view is chosen per branch so that a single
    # reshape-copy lands in the layout its GEMM needs
    if Px == 1:
        win = as_strided(xp[0], (C, kh, kw, Ho, Wo),
                         (s1, s2, s3, s2 * sH, s3 * sW))
        out = (k2.reshape(Pk * Co, ckk) @ win.reshape(ckk, Ho * Wo))
        out = out.reshape(Pk, Co, Ho * Wo)
    elif Pk == 1:
        win = as_strided(xp, (C, kh, kw, Px, Ho, Wo),
                         (s1, s2, s3, s0, s2 * sH, s3 * sW))
        out = (k2[0] @ win.reshape(ckk, Px * Ho * Wo))
        out = out.reshape(Co, Px, Ho * Wo).transpose(1, 0, 2)
    else:
        win = as_strided(xp, (Px, C, kh, kw, Ho, Wo),
                         (s0, s1, s2, s3, s2 * sH, s3 * sW))
        out = np.matmul(k2, win.reshape(Px, ckk, Ho * Wo))
    out = out.reshape(out.shape[0], Co, Ho, Wo)
    return out + b[:, :, None, None]


def _linear_p(x, w, b):
    """Batched affine: x [Px,i], w [Pw,o,i], b [Pb,o]."""
    Pw, O, I = w.shape
    if Pw == 1:
        out = x @ w[0].T
    elif x.shape[0] == 1:
        out = (w.reshape(Pw * O, I) @ x[0]).reshape(Pw, O)
    else:
        out = np.matmul(w, x[:, :, None])[:, :, 0]
    return out + b


@dataclass
class MaskFactors:
    """Pre-drawn inverted-dropout factors, in model execution order."""

    long_enc: Optional[np.ndarray]
    short_enc: list
    decoder: list


def draw_mask_factors(hp: M.HyperParams, pose_dim: int,
                      rng: np.random.Generator) -> Optional[MaskFactors]:
    """Replicates the model's mask-draw order: long encoder once, then one
    short-encoder and one decoder mask per step."""
    p = hp.dropout
    if p == 0.0:
        return None
    scale = 1.0 / (1.0 - p)
    ch3 = hp.channels[-1]
    long_grid = hp.long_cem(pose_dim).grid_trace()[-1]
    short_grid = hp.short_cem(pose_dim).grid_trace()[-1]
    long_f = None
    if not hp.no_long_term:
        long_f = (rng.random((1, ch3, *long_grid)) >= p) * scale
    shorts, decs = [], []
    for _ in range(hp.target_frames):
        shorts.append((rng.random((1, ch3, *short_grid)) >= p) * scale)
        decs.append((rng.random((1, hp.fc_out)) >= p) * scale)
    return MaskFactors(long_f, shorts, decs)


def reference_objective(arrays: dict, seed: np.ndarray, target: np.ndarray,
                        masks: Optional[MaskFactors], hp: M.HyperParams,
                        adversarial: bool,
                        override: Optional[dict] = None) -> np.ndarray:
    """Evaluate the training objective for a stack of parameter variants.

    ``arrays`` maps parameter names to their base values; ``override`` maps
    at most a few names to ``[P, ...]`` stacks that replace the base value.
    Returns the per-variant objective of shape ``[P]`` (or ``[1]`` when no
    override is given). Batch size is one sequence.
    """
    override = override or {}
    P = max((v.shape[0] for v in override.values()), default=1)

    def A(name):
        if name in override:
            return override[name]
        return arrays[name][None]

    t, Tn, C = hp.seed_frames, hp.target_frames, hp.window
    L = seed.shape[1]
    slope = hp.leaky_slope

    def lrelu(x):
        return np.where(x >= 0, x, slope * x)

    def cem(prefix, frames, mask_factor):
        x = frames[:, None]  # [P', 1, n, L]
        for i in (1, 2, 3):
            x = _conv_p(x, A(f"{prefix}.conv{i}.kernel"),
                        A(f"{prefix}.conv{i}.bias"), hp.stride)
            x = lrelu(x)
        if mask_factor is not None:
            x = x * mask_factor
        x = x.reshape(x.shape[0], -1)
        return _linear_p(x, A(f"{prefix}.fc.weight"), A(f"{prefix}.fc.bias"))

    if hp.no_long_term:
        zl = np.zeros((1, hp.fc_out))
    else:
        zl = cem("long", seed[None], masks.long_enc if masks else None)

    seed_rows = [seed[None, i] for i in range(t - C, t)]  # each [1, L]
    blended: list = []
    preds: list = []
    prev = seed_rows[-1]
    for k in range(1, Tn + 1):
        ids = M.window_frame_ids(t, C, k)
        rows = [seed_rows[idx - (t - C)] if kind == "seed" else blended[idx - 1]
                for kind, idx in ids]
        pw = max(r.shape[0] for r in rows)
        win = np.stack([np.broadcast_to(r, (pw, L)) for r in rows], axis=1)
        zs = cem("short", win, masks.short_enc[k - 1] if masks else None)
        zl_b, zs_b = np.broadcast_arrays(
            np.broadcast_to(zl, (max(zl.shape[0], zs.shape[0]), zl.shape[1])),
            np.broadcast_to(zs, (max(zl.shape[0], zs.shape[0]), zs.shape[1])))
        h = np.concatenate([zl_b, zs_b], axis=1)
        h = _linear_p(h, A("decoder.fc1.weight"), A("decoder.fc1.bias"))
        h = lrelu(h)
        if masks is not None:
            h = h * masks.decoder[k - 1]
        h = _linear_p(h, A("decoder.fc2.weight"), A("decoder.fc2.bias"))
        x_hat = h + prev
        preds.append(x_hat)
        if hp.eta == 1.0:
            blended.append(x_hat)
        else:
            blended.append(x_hat * hp.eta + target[k - 1] * (1.0 - hp.eta))
        prev = x_hat

    pw = max(p.shape[0] for p in preds)
    pred_stack = np.stack([np.broadcast_to(p, (pw, L)) for p in preds], axis=1)
    mse = np.square(pred_stack - target[None]).sum(axis=(1, 2)) / Tn

    l2 = np.zeros(1)
    gen_prefixes = ["short", "decoder"] if hp.no_long_term else ["long", "short",
                                                                 "decoder"]
    for name in sorted(arrays):
        if name.split(".")[0] in gen_prefixes:
            a = A(name)
            l2 = l2 + np.square(a).reshape(a.shape[0], -1).sum(axis=1)
    loss = mse + hp.lambda_l2 * l2

    if adversarial:
        full = np.concatenate(
            [np.broadcast_to(seed[None], (pred_stack.shape[0], t, L)), pred_stack],
            axis=1)
        code = cem("disc.cem", full, None)
        logit = _linear_p(code, A("disc.head.weight"), A("disc.head.bias"))
        prob = 1.0 / (1.0 + np.exp(-logit[:, 0]))
        prob = np.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
        loss = loss + hp.lambda_adv * (-np.log(prob))

    return np.broadcast_to(loss, (P,)).copy()


# ---------------------------------------------------------------------------
# Taped objective (the implementation under test)
# ---------------------------------------------------------------------------


def taped_objective(params: M.ModelParams, gen_named: dict, seed: np.ndarray,
                    target: np.ndarray, hp: M.HyperParams, adversarial: bool,
                    mask_seed: int):
    """One tape evaluation of the objective; returns (loss tensor, tape)."""
    rng = np.random.Generator(np.random.PCG64(mask_seed))
    seed_t = Tensor(seed)
    target_t = Tensor(target)
    with GradTape() as tape:
        pred = M.predict_sequence(seed_t, params, hp, teacher=target_t,
                                  mode="train", rng=rng)
        fake_prob = None
        if adversarial:
            full = ad.concat([seed_t, pred], axis=0)
            fake_prob = M.discriminate(full, params.discriminator, hp,
                                       mode="train")
        loss, _terms = T.loss_generator(pred, target_t, gen_named, fake_prob,
                                        replace(hp, adversarial=adversarial))
    return loss, tape


# ---------------------------------------------------------------------------
# The check itself
# ---------------------------------------------------------------------------


def generic_params(hp: M.HyperParams, pose_dim: int,
                   rng: np.random.Generator) -> M.ModelParams:
    """Randomized parameters with every gradient path active (including the
    zero-initialized final layer), scaled so the objective stays O(1):
    finite-difference cancellation noise grows with the loss magnitude, and
    gradient correctness is independent of the operating point."""
    params = M.init_params(hp, pose_dim, rng)
    for tensor in params.all_named().values():
        tensor.assign_(0.5 * tensor.data
                       + rng.normal(scale=0.05, size=tensor.shape))
    return params


def full_model_grad_check(hp: Optional[M.HyperParams] = None,
                          pose_dim: int = TINY_POSE_DIM, seed: int = 0,
                          adversarial: bool = False, h: float = 1e-5,
                          tol: float = 1e-4, chunk: int = 1024,
                          retry_steps=(1e-4, 1e-3, 4e-3, 2e-6)) -> GradCheckReport:
    """Check every generator parameter of the full objective at one seed.

    Elements failing at the primary step are re-differenced at the steps in
    ``retry_steps`` and keep their best agreement: a larger step escapes the
    64-bit cancellation floor on near-zero gradients, a smaller one escapes
    activation-kink crossings. An actual gradient defect fails at every step.
    """
    hp = hp or tiny_hyperparams()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    params = generic_params(hp, pose_dim, rng)
    seq_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
    seed_frames = 0.5 * seq_rng.normal(size=(hp.seed_frames, pose_dim))
    target_frames = 0.5 * seq_rng.normal(size=(hp.target_frames, pose_dim))
    mask_seed = int(np.random.SeedSequence([seed, 3]).generate_state(1)[0])

    gen_named = params.generator_named(include_long=not hp.no_long_term)
    loss, tape = taped_objective(params, gen_named, seed_frames, target_frames,
                                 hp, adversarial, mask_seed)
    grads = backward(loss, tape)

    arrays = {name: t.data for name, t in params.all_named().items()}
    masks = draw_mask_factors(hp, pose_dim,
                              np.random.Generator(np.random.PCG64(mask_seed)))

    # route agreement: the reference evaluator must reproduce the taped loss
    ref = reference_objective(arrays, seed_frames, target_frames, masks, hp,
                              adversarial)[0]
    if abs(ref - loss.item()) > 1e-10 * max(1.0, abs(ref)):
        raise ad.GradCheckSetupError(
            f"reference objective disagrees with taped forward: "
            f"{ref!r} vs {loss.item()!r}"
        )

    entries = []
    for name, p in gen_named.items():
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        a_flat = analytic.reshape(-1)
        numeric = _fd_gradient(arrays, name, np.arange(p.size), seed_frames,
                               target_frames, masks, hp, adversarial, h, chunk)
        rel = _rel_err(a_flat, numeric)
        for h_alt in retry_steps:
            bad = np.flatnonzero(rel > tol)
            if bad.size == 0:
                break
            numeric_alt = _fd_gradient(arrays, name, bad, seed_frames,
                                       target_frames, masks, hp, adversarial,
                                       h_alt, chunk)
            rel_alt = _rel_err(a_flat[bad], numeric_alt)
            better = rel_alt < rel[bad]
            numeric[bad[better]] = numeric_alt[better]
            rel[bad] = np.minimum(rel[bad], rel_alt)
        worst = int(np.argmax(rel))
        entries.append(GradCheckEntry(
            name, p.shape, float(rel[worst]),
            tuple(np.unravel_index(worst, p.shape)),
            float(a_flat[worst]), float(numeric[worst])))
    return GradCheckReport(entries, tol)


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _fd_gradient(arrays, name, indices, seed, target, masks, hp, adversarial,
                 h, chunk):
    """Central differences of the reference objective at selected flat indices."""
    base = arrays[name]
    flat = base.reshape(-1)
    grad = np.empty(indices.size)
    for start in range(0, indices.size, chunk):
        idxs = indices[start:start + chunk]
        P = 2 * idxs.size
        stack = np.repeat(flat[None, :], P, axis=0)
        rows = np.arange(idxs.size)
        stack[2 * rows, idxs] += h
        stack[2 * rows + 1, idxs] -= h
        losses = reference_objective(arrays, seed, target, masks, hp,
                                     adversarial,
                                     override={name: stack.reshape(P, *base.shape)})
        grad[start:start + idxs.size] = (losses[0::2] - losses[1::2]) / (2.0 * h)
    return grad


def run_suite(seeds=(0, 1, 2, 3, 4), variants=(False, True), tol: float = 1e-4,
              hp: Optional[M.HyperParams] = None, pose_dim: int = TINY_POSE_DIM,
              h: float = 1e-5, verbose: bool = False, jobs: int = 1) -> list:
    """Run the full check over several seeds and objective variants.

    Returns ``[(seed, adversarial, GradCheckReport), ...]``; the suite passes
    when every report passes. ``jobs > 1`` fans the (seed, variant) grid out
    over worker processes.
    """
    grid = [(seed, adversarial) for seed in seeds for adversarial in variants]
    if jobs > 1:
        results = _run_grid_parallel(grid, tol, hp, pose_dim, h, jobs)
    else:
        results = []
        for seed, adversarial in grid:
            report = full_model_grad_check(hp=hp, pose_dim=pose_dim, seed=seed,
                                           adversarial=adversarial, h=h, tol=tol)
            results.append((seed, adversarial, report))
    if verbose:
        for seed, adversarial, report in results:
            tag = "full" if adversarial else "mse+l2"
            print(f"seed {seed} [{tag}]: max_rel_err {report.max_rel_err:.3e} "
                  f"{'PASS' if report.passed else 'FAIL'}")
    return results


def _grid_job(args):
    seed, adversarial, tol, hp, pose_dim, h = args
    report = full_model_grad_check(hp=hp, pose_dim=pose_dim, seed=seed,
                                   adversarial=adversarial, h=h, tol=tol)
    return seed, adversarial, report


def _run_grid_parallel(grid, tol, hp, pose_dim, h, jobs):
    """Spawned workers each pin their BLAS pool to one thread: the small
    GEMMs here gain nothing from threads, and unpinned workers contend."""
    import multiprocessing as mp
    import os

    pin_keys = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")
    saved = {k: os.environ.get(k) for k in pin_keys}
    for k in pin_keys:
        os.environ[k] = "1"
    try:
        ctx = mp.get_context("spawn")
        with ctx.Pool(processes=jobs) as pool:
            results = pool.map(
                _grid_job,
                [(seed, adv, tol, hp, pose_dim, h) for seed, adv in grid])
    finally:
        for k, v in saved.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v
    return results

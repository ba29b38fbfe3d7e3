"""Arbitrarily conditioned generation and the task wrappers built on it.

Generation follows a two-stage schedule: integrate the gap flow from noise to
data time, map the result back through the inverse log transform to absolute
times, then condition the location flow on those times and integrate it.
Observed events pass through unchanged, bitwise. Conditioning never exposes
any attribute of a generated event to the encoder: observed tokens carry
gap features computed within the observed subsequence only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .events import EventSequence
from .masks import BatchMasks, TokenMaskSet, apply_padding, autoregressive_masks
from .model import TorchMasks, TrainedBundle
from .train import condition_encoder_gaps

TASK_MODES = (
    "next", "inverse", "impute-random", "recover-block",
    "forecast-joint", "forecast-ar", "partial-attribute",
)


@dataclass
class GenerationTask:
    """One sequence with per-token, per-attribute conditioning flags.

    ``values`` holds ground truth at observed positions; entries at generated
    positions are never consulted. ``cond_time`` / ``cond_loc`` are 1 where
    the attribute is observed, 0 where it must be generated. ``teacher_anchor``
    reconstructs each generated time from the true previous time instead of
    chaining through generated ones (parallel causal evaluation).
    """

    values: EventSequence
    cond_time: np.ndarray
    cond_loc: np.ndarray = None
    use_ar: bool = False
    teacher_anchor: bool = False

    def __post_init__(self):
        self.cond_time = np.asarray(self.cond_time, dtype=np.int8).reshape(-1)
        if self.cond_loc is None:
            self.cond_loc = self.cond_time.copy()
        self.cond_loc = np.asarray(self.cond_loc, dtype=np.int8).reshape(-1)
        n = len(self.values)
        if self.cond_time.shape[0] != n or self.cond_loc.shape[0] != n:
            raise ValueError("condition vectors must match the sequence length")


@dataclass
class GenerationResult:
    times: np.ndarray
    locations: np.ndarray  # original coordinates
    clamped: int = 0       # generated gaps floored at eps
    meta: dict = field(default_factory=dict)


def _generation_mask_set(task: GenerationTask, L: int, pad_row: np.ndarray,
                         flow: str) -> TokenMaskSet:
    """Per-flow mask set. Conditioning tokens are those with any observed
    attribute; targets are tokens whose attribute for this flow is missing.
    A flow may have no targets at all (the encoder part must survive for the
    other flow), so the target-free case is assembled directly.
    """
    n = len(task.values)
    if task.use_ar:
        return apply_padding(autoregressive_masks(L), pad_row)
    enc_keep = np.zeros(L, dtype=bool)
    targets = np.zeros(L, dtype=bool)
    enc_keep[:n] = (task.cond_time == 1) | (task.cond_loc == 1)
    cond = task.cond_time if flow == "temporal" else task.cond_loc
    targets[:n] = cond == 0
    tms = TokenMaskSet(
        enc_keep[:, None] & enc_keep[None, :],
        targets[:, None] & targets[None, :],
        targets[:, None] & enc_keep[None, :],
        targets,
    )
    return apply_padding(tms, pad_row)


def _euler_integrate(velocity_fn, state: torch.Tensor, target: torch.Tensor, n_steps: int) -> torch.Tensor:
    """Forward Euler on [0, 1]; only target tokens move."""
    h = 1.0 / n_steps
    tgt = target.to(state.dtype)
    if state.dim() == 3:
        tgt = tgt.unsqueeze(-1)
    for k in range(n_steps):
        state = state + h * velocity_fn(state, k * h) * tgt
    return state


def repair_block_order(times: np.ndarray, locations: np.ndarray, generated: np.ndarray):
    """Sort each maximal run of generated tokens by time, moving locations
    along. Observed entries are never touched."""
    times = times.copy()
    locations = locations.copy()
    n = times.shape[0]
    i = 0
    while i < n:
        if generated[i]:
            j = i
            while j < n and generated[j]:
                j += 1
            order = np.argsort(times[i:j], kind="stable")
            times[i:j] = times[i:j][order]
            locations[i:j] = locations[i:j][order]
            i = j
        else:
            i += 1
    return times, locations


def generate_batch(
    bundle: TrainedBundle,
    tasks: list[GenerationTask],
    n_euler_steps: int = 10,
    rng: np.random.Generator | None = None,
    m_samples: int = 1,
) -> list[GenerationResult]:
    """Run two-stage conditioned generation for a batch of tasks.

    Draws ``m_samples`` independent completions and averages the predicted
    times/locations per position (one sample by default).
    """
    if n_euler_steps < 1:
        raise ValueError("need at least one integration step")
    rng = rng if rng is not None else np.random.default_rng()
    model = bundle.model
    eps = bundle.eps
    d = bundle.spatial_dim
    B = len(tasks)
    L = max(len(t.values) for t in tasks)

    pad = np.zeros((B, L), dtype=bool)
    times = np.zeros((B, L))
    locs_norm = np.zeros((B, L, d))
    cond_time = np.ones((B, L), dtype=np.int8)
    cond_loc = np.ones((B, L), dtype=np.int8)
    for i, task in enumerate(tasks):
        n = len(task.values)
        pad[i, :n] = True
        times[i, :n] = task.values.times
        locs_norm[i, :n] = bundle.affine.apply(task.values.locations)
        cond_time[i, :n] = task.cond_time
        cond_loc[i, :n] = task.cond_loc

    # Encoder features: gaps within the observed-time subsequence; under the
    # causal strategy every real token is history so full gaps apply.
    any_ar = any(t.use_ar for t in tasks)
    if any_ar and not all(t.use_ar for t in tasks):
        raise ValueError("mixed causal/conditioned tasks in one batch")
    enc_cond = np.where(pad, cond_time, 0)
    if any_ar:
        z_enc = condition_encoder_gaps(times, np.ones_like(cond_time), pad, eps)
        time_present = torch.as_tensor(pad)
        loc_present = torch.as_tensor(pad)
    else:
        z_enc = condition_encoder_gaps(times, enc_cond, pad, eps)
        time_present = torch.as_tensor((cond_time == 1) & pad)
        loc_present = torch.as_tensor((cond_loc == 1) & pad)

    masks_t = BatchMasks.stack([
        _generation_mask_set(t, L, pad[i], "temporal") for i, t in enumerate(tasks)
    ])
    masks_x = BatchMasks.stack([
        _generation_mask_set(t, L, pad[i], "spatial") for i, t in enumerate(tasks)
    ])
    tm_t = TorchMasks.from_batch(masks_t)
    tm_x = TorchMasks.from_batch(masks_x)

    z_enc_t = torch.as_tensor(z_enc, dtype=torch.float32)
    locs_t = torch.as_tensor(locs_norm, dtype=torch.float32)
    # location features are zeroed for tokens whose location is unobserved
    locs_enc = locs_t * torch.as_tensor((cond_loc == 1) & pad).unsqueeze(-1).to(locs_t.dtype)
    if any_ar:
        locs_enc = locs_t

    sample_times = np.zeros((m_samples, B, L))
    sample_locs = np.zeros((m_samples, B, L, d))
    clamp_counts = np.zeros(B, dtype=np.int64)
    with torch.no_grad():
        enc = model.encode_history(z_enc_t, locs_enc, tm_t.encoder_self,
                                   time_present=time_present, loc_present=loc_present)
        for m in range(m_samples):
            gen_t = tm_t.target
            s_state = torch.as_tensor(rng.standard_normal((B, L)), dtype=torch.float32) * gen_t
            s_state = _euler_integrate(
                lambda y, t: model.temporal_velocity(y, t, enc, tm_t), s_state, gen_t, n_euler_steps
            )
            s1 = s_state.numpy()
            gaps = np.exp(s1) - eps
            clamped = (gaps < eps) & gen_t.numpy()
            clamp_counts += clamped.sum(axis=1)
            gaps = np.maximum(gaps, eps)

            abs_times = np.zeros_like(times)
            for i, task in enumerate(tasks):
                n = len(task.values)
                prev = 0.0
                for j in range(n):
                    if cond_time[i, j] == 1:
                        abs_times[i, j] = times[i, j]
                    elif task.teacher_anchor:
                        abs_times[i, j] = (times[i, j - 1] if j else 0.0) + gaps[i, j]
                    else:
                        abs_times[i, j] = prev + gaps[i, j]
                    prev = abs_times[i, j]

            # condition the location flow on the generated/observed times:
            # generated tokens carry their integrated state directly, observed
            # tokens the log gap from the reconstructed predecessor (clamped,
            # since a generated block may legitimately overshoot them)
            prev = np.concatenate([np.zeros((B, 1)), abs_times[:, :-1]], axis=1)
            z_cond = np.log(np.maximum(abs_times - prev, 0.0) + eps)
            z_cond = np.where(pad, z_cond, 0.0)
            z_cond = np.where((cond_time == 0) & pad, s1, z_cond)
            z_cond_t = torch.as_tensor(z_cond, dtype=torch.float32)
            gen_x = tm_x.target
            x_state = torch.as_tensor(rng.standard_normal((B, L, d)), dtype=torch.float32)
            x_state = x_state * gen_x.unsqueeze(-1)
            x_state = _euler_integrate(
                lambda y, t: model.spatial_velocity(y, t, z_cond_t, enc, tm_x), x_state, gen_x, n_euler_steps
            )
            x1 = x_state.numpy()
            sample_times[m] = abs_times
            sample_locs[m] = np.where((cond_loc == 1)[..., None], locs_norm, x1)

    results = []
    mean_times = sample_times.mean(axis=0)
    mean_locs = sample_locs.mean(axis=0)
    for i, task in enumerate(tasks):
        n = len(task.values)
        t_out = np.where(cond_time[i, :n] == 1, times[i, :n], mean_times[i, :n])
        x_out = np.where((cond_loc[i, :n] == 1)[:, None], task.values.locations,
                         bundle.affine.invert(mean_locs[i, :n]))
        if not task.teacher_anchor:
            # teacher-anchored tokens are independent one-step predictions, so
            # block order is not a chained-generation artifact there
            t_out, x_out = repair_block_order(t_out, x_out, cond_time[i, :n] == 0)
        results.append(GenerationResult(t_out, x_out, int(clamp_counts[i])))
    return results


def generate(
    bundle: TrainedBundle,
    task: GenerationTask,
    n_euler_steps: int = 10,
    rng: np.random.Generator | None = None,
    m_samples: int = 1,
) -> GenerationResult:
    return generate_batch(bundle, [task], n_euler_steps, rng, m_samples)[0]


def next_event_tasks(seqs: list[EventSequence]) -> list[GenerationTask]:
    """Parallel one-step-ahead prediction of every event from its prefix."""
    return [
        GenerationTask(s, np.zeros(len(s), dtype=np.int8), np.zeros(len(s), dtype=np.int8),
                       use_ar=True, teacher_anchor=True)
        for s in seqs
    ]


def forecast_joint(
    bundle: TrainedBundle,
    history: EventSequence,
    horizon: int,
    truth_suffix: EventSequence | None = None,
    n_euler_steps: int = 10,
    rng: np.random.Generator | None = None,
    m_samples: int = 1,
) -> GenerationResult:
    """Jointly generate a block of ``horizon`` future events after history."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    m = len(history)
    placeholder_t = history.times[-1] if m else 0.0
    suffix_t = (truth_suffix.times if truth_suffix is not None
                else placeholder_t + np.arange(1, horizon + 1))
    suffix_x = (truth_suffix.locations if truth_suffix is not None
                else np.zeros((horizon, history.locations.shape[1] if m else 2)))
    full = EventSequence(np.concatenate([history.times, suffix_t]),
                         np.concatenate([history.locations, suffix_x], axis=0))
    cond = np.concatenate([np.ones(m, dtype=np.int8), np.zeros(horizon, dtype=np.int8)])
    res = generate(bundle, GenerationTask(full, cond), n_euler_steps, rng, m_samples)
    return GenerationResult(res.times[m:], res.locations[m:], res.clamped, res.meta)


def forecast_ar(
    bundle: TrainedBundle,
    history: EventSequence,
    horizon: int,
    n_euler_steps: int = 10,
    rng: np.random.Generator | None = None,
    m_samples: int = 1,
) -> GenerationResult:
    """Generate future events one at a time, feeding each one back in."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    cur = EventSequence(history.times.copy(), history.locations.copy())
    out_t, out_x = [], []
    clamped = 0
    d = history.locations.shape[1] if len(history) else 2
    for _ in range(horizon):
        m = len(cur)
        slot_t = (cur.times[-1] if m else 0.0) + 1.0
        full = EventSequence(np.append(cur.times, slot_t),
                             np.vstack([cur.locations, np.zeros((1, d))]))
        cond = np.concatenate([np.ones(m, dtype=np.int8), np.zeros(1, dtype=np.int8)])
        res = generate(bundle, GenerationTask(full, cond, use_ar=True), n_euler_steps, rng, m_samples)
        t_new, x_new = float(res.times[-1]), res.locations[-1]
        clamped += res.clamped
        out_t.append(t_new)
        out_x.append(x_new)
        cur = EventSequence(np.append(cur.times, t_new), np.vstack([cur.locations, x_new[None, :]]))
    return GenerationResult(np.array(out_t), np.array(out_x), clamped)

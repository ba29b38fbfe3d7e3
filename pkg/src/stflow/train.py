"""Hybrid masked flow-matching training.

Every optimization step applies three masking strategies to the same padded
mini-batch (parallel autoregressive, random condition, consecutive block),
regresses both velocity heads onto the constant linear-path targets, and sums
all six loss terms. Temporal targets are log inter-event gaps, spatial
targets are box-normalized locations.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import TrainingError
from .events import (
    DEFAULT_LOG_EPS,
    Batch,
    DomainSpec,
    EventSequence,
    batch_log_gaps,
    box_normalizer,
    normalize_space,
    pad_batch,
    to_log_interevent,
)
from .masks import BatchMasks, build_batch_masks
from .model import ModelConfig, TorchMasks, VelocityModel, save_checkpoint

MASK_KINDS = ("ar", "random", "consecutive")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 64
    max_epochs: int = 300
    w_temporal: float = 1.0
    w_spatial: float = 1.5
    p_cond: float = 0.7
    seed: int = 0
    patience: int = 20
    grad_clip: float | None = 1.0
    eps: float = DEFAULT_LOG_EPS

    def __post_init__(self):
        if self.w_temporal <= 0 or self.w_spatial <= 0:
            raise ValueError("loss weights must be positive")


def interpolate(x0, x1, tau: float):
    """Linear path point (1 - tau) * x0 + tau * x1."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if hasattr(x0, "shape") and hasattr(x1, "shape") and tuple(x0.shape) != tuple(x1.shape):
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    return (1.0 - tau) * x0 + tau * x1


def condition_encoder_gaps(
    times: np.ndarray, cond: np.ndarray, pad: np.ndarray, eps: float
) -> np.ndarray:
    """Log gaps computed within the observed subsequence of each row.

    Observed tokens measure their gap from the previous observed event (or
    the window origin); everything else is zero. Keeps encoder features free
    of any information about masked-out events.
    """
    z = np.zeros_like(times)
    B = times.shape[0]
    for i in range(B):
        obs = np.where((cond[i] == 1) & pad[i])[0]
        if obs.size:
            z[i, obs] = to_log_interevent(times[i, obs], eps)
    return z


@dataclass
class BatchTensors:
    """One padded mini-batch in model-ready form."""

    z_full: torch.Tensor      # (B, L) log gaps over the full sequence
    locations: torch.Tensor   # (B, L, d) normalized
    times: np.ndarray         # (B, L) absolute times (for condition gaps)
    pad: np.ndarray           # (B, L) bool

    @property
    def batch_size(self) -> int:
        return int(self.z_full.shape[0])


def batch_to_tensors(batch: Batch, eps: float) -> BatchTensors:
    z = batch_log_gaps(batch, eps)
    return BatchTensors(
        torch.as_tensor(z, dtype=torch.float32),
        torch.as_tensor(batch.locations, dtype=torch.float32),
        batch.times,
        batch.mask,
    )


def encoder_inputs_for(bt: BatchTensors, bm: BatchMasks, eps: float) -> torch.Tensor:
    """Per-mask encoder gap features: full-sequence gaps under the causal
    strategy, observed-subsequence gaps under condition masks."""
    if bm.condition is None:
        return bt.z_full
    z = condition_encoder_gaps(bt.times, bm.condition, bt.pad, eps)
    return torch.as_tensor(z, dtype=torch.float32)


def flow_matching_losses(
    model: VelocityModel,
    bt: BatchTensors,
    mask_sets: dict[str, BatchMasks],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Summed objective plus the six per-(mask, flow) terms.

    Each mask pass draws its own noise and flow times. Loss terms are sums
    of squared residuals over target entries, divided by the batch size.
    """
    B = bt.batch_size
    d = bt.locations.shape[-1]
    total = None
    terms: dict[str, float] = {}
    for kind, bm in mask_sets.items():
        tm = TorchMasks.from_batch(bm)
        z_enc = encoder_inputs_for(bt, bm, cfg.eps)
        enc = model.encode_history(z_enc, bt.locations, tm.encoder_self)
        s0 = torch.as_tensor(rng.standard_normal(bt.z_full.shape), dtype=torch.float32)
        x0 = torch.as_tensor(rng.standard_normal(bt.locations.shape), dtype=torch.float32)
        tau1, tau2 = float(rng.random()), float(rng.random())
        s_t = interpolate(s0, bt.z_full, tau1)
        x_t = interpolate(x0, bt.locations, tau2)
        v1 = model.temporal_velocity(s_t, tau1, enc, tm)
        v2 = model.spatial_velocity(x_t, tau2, bt.z_full, enc, tm)
        tgt = tm.target.to(torch.float32)
        l1 = (((v1 - (bt.z_full - s0)) ** 2) * tgt).sum() / B
        l2 = ((((v2 - (bt.locations - x0)) ** 2).sum(-1)) * tgt).sum() / B
        term = cfg.w_temporal * l1 + cfg.w_spatial * l2
        total = term if total is None else total + term
        terms[f"{kind}_temporal"] = float(l1.detach())
        terms[f"{kind}_spatial"] = float(l2.detach())
    return total, terms


def sample_step_masks(pad: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> dict[str, BatchMasks]:
    return {
        "ar": build_batch_masks("ar", pad),
        "random": build_batch_masks("random", pad, rng, cfg.p_cond),
        "consecutive": build_batch_masks("consecutive", pad, rng),
    }


def hybrid_step(
    model: VelocityModel,
    optimizer: torch.optim.Optimizer,
    bt: BatchTensors,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> dict[str, float]:
    """One optimizer step on the three-mask objective; masks are resampled."""
    mask_sets = sample_step_masks(bt.pad, cfg, rng)
    total, terms = flow_matching_losses(model, bt, mask_sets, cfg, rng)
    if not torch.isfinite(total):
        raise TrainingError(f"non-finite training loss; per-term values: {terms}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    terms["total"] = float(total.detach())
    return terms


def _batched(n: int, size: int, order: np.ndarray):
    for start in range(0, n, size):
        yield order[start:start + size]


def validation_loss(
    model: VelocityModel,
    seqs: list[EventSequence],
    cfg: TrainConfig,
) -> float:
    """Deterministic three-mask objective on a held-out split (eval mode)."""
    was_training = model.training
    model.eval()
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    total = 0.0
    order = np.arange(len(seqs))
    with torch.no_grad():
        for idx in _batched(len(seqs), cfg.batch_size, order):
            bt = batch_to_tensors(pad_batch([seqs[i] for i in idx]), cfg.eps)
            mask_sets = sample_step_masks(bt.pad, cfg, rng)
            loss, _ = flow_matching_losses(model, bt, mask_sets, cfg, rng)
            total += float(loss) * len(idx)
    if was_training:
        model.train()
    return total / max(len(seqs), 1)


def fit(
    train_seqs: list[EventSequence],
    val_seqs: list[EventSequence],
    domain: DomainSpec,
    model_cfg: ModelConfig | None = None,
    cfg: TrainConfig | None = None,
    out_dir: str | Path | None = None,
    log_fn=None,
) -> tuple[VelocityModel, list[dict], Path | None]:
    """Train on normalized sequences with early stopping on validation loss.

    Returns the best model (by validation loss), the per-epoch history, and
    the checkpoint path when ``out_dir`` is given.
    """
    if not train_seqs:
        raise ValueError("training split is empty")
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig(spatial_dim=domain.dim)
    amap = box_normalizer(domain)
    train_n = [normalize_space(s, domain)[0] for s in train_seqs]
    val_n = [normalize_space(s, domain)[0] for s in val_seqs]

    torch.manual_seed(cfg.seed)
    model = VelocityModel(model_cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    root = np.random.SeedSequence(cfg.seed)
    shuffle_rng, step_rng = (np.random.default_rng(s) for s in root.spawn(2))

    history: list[dict] = []
    best_val = float("inf")
    best_state = None
    best_epoch = -1
    epochs_since_best = 0
    model.train()
    for epoch in range(cfg.max_epochs):
        t0 = time.time()
        order = shuffle_rng.permutation(len(train_n))
        epoch_losses = []
        for idx in _batched(len(train_n), cfg.batch_size, order):
            bt = batch_to_tensors(pad_batch([train_n[i] for i in idx]), cfg.eps)
            terms = hybrid_step(model, optimizer, bt, cfg, step_rng)
            epoch_losses.append(terms["total"])
        val = validation_loss(model, val_n, cfg) if val_n else float(np.mean(epoch_losses))
        rec = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val,
            "seconds": round(time.time() - t0, 3),
        }
        history.append(rec)
        if log_fn:
            log_fn(rec)
        if val < best_val - 1e-12:
            best_val = val
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()

    ckpt_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "train_config": asdict(cfg),
            "domain": domain.to_dict(),
            "best_epoch": best_epoch,
            "best_val_loss": best_val,
            "epochs_run": len(history),
            "n_train": len(train_n),
            "n_val": len(val_n),
        }
        ckpt_path = out / "model.ckpt"
        save_checkpoint(ckpt_path, model, amap, cfg.eps, meta)
        with (out / "metrics.jsonl").open("w") as fh:
            for rec in history:
                fh.write(json.dumps(rec) + "\n")
    return model, history, ckpt_path

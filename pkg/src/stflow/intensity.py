"""Conditional density, CDF, and hazard recovery from trained flows.

The scalar gap flow yields the next-event time density via a backward solve
of the coupled state/log-density ODE, and its CDF directly from the noise CDF
evaluated at the backward-mapped state (one-dimensional flows transport
quantiles, so the CDF value is invariant along trajectories). The location
flow yields the conditional spatial density through the standard
change-of-variable accumulator. The hazard is assembled as

    lambda(s, x | H) = p(s | H) / (1 - F(s | H)) * p(x | s, H)

so no spatial integration is ever required; the survival term comes from the
scalar flow alone.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

from .events import EventSequence, to_log_interevent
from .masks import BatchMasks, autoregressive_masks
from .model import TorchMasks, TrainedBundle
from .ode import SolverConfig, solve_ode
from .simulate import IntensityGrid, make_grid

LOG_2PI = math.log(2.0 * math.pi)
SURVIVAL_FLOOR = 1e-12

ScalarField = Callable[[torch.Tensor, float], torch.Tensor]
ScalarFieldWithDeriv = Callable[[torch.Tensor, float], tuple[torch.Tensor, torch.Tensor]]
VectorFieldWithDiv = Callable[[torch.Tensor, float], tuple[torch.Tensor, torch.Tensor]]


def std_normal_logpdf(x: torch.Tensor) -> torch.Tensor:
    return -0.5 * x**2 - 0.5 * LOG_2PI


def std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return torch.special.ndtr(x)


# --------------------------------------------------------------- field-based


def backward_state(field: ScalarField, z_val: torch.Tensor, solver: SolverConfig,
                   t_start: float = 1.0) -> tuple[torch.Tensor, bool]:
    """Map a state at ``t_start`` back to its source value at t=0."""
    res = solve_ode(lambda t, y: field(y, t), z_val, t_start, 0.0, solver)
    return res.y, res.accuracy_flag


def cdf_from_field(field: ScalarField, z_val: torch.Tensor, solver: SolverConfig,
                   t_start: float = 1.0) -> torch.Tensor:
    """CDF of the flow state at ``t_start`` evaluated at ``z_val``.

    Backward-solves to t=0 and reads off the standard-normal CDF there.
    """
    z0, _ = backward_state(field, z_val, solver, t_start)
    return std_normal_cdf(z0)


def scalar_log_density_from_field(
    field_with_deriv: ScalarFieldWithDeriv, z_val: torch.Tensor, solver: SolverConfig
) -> tuple[torch.Tensor, torch.Tensor, bool]:
    """(log density, source state) of a one-dimensional flow at t=1."""

    def rhs(t: float, y: torch.Tensor) -> torch.Tensor:
        v, dv = field_with_deriv(y[0], t)
        return torch.stack([v, -dv])

    y1 = torch.stack([z_val, torch.zeros_like(z_val)])
    res = solve_ode(rhs, y1, 1.0, 0.0, solver)
    z0, ell0 = res.y[0], res.y[1]
    return std_normal_logpdf(z0) - ell0, z0, res.accuracy_flag


def log_density_from_field(
    field_with_div: VectorFieldWithDiv, x_val: torch.Tensor, solver: SolverConfig
) -> tuple[torch.Tensor, bool]:
    """Log density of a d-dimensional flow at t=1 for states ``(..., d)``."""
    d = x_val.shape[-1]

    def rhs(t: float, y: torch.Tensor) -> torch.Tensor:
        v, div = field_with_div(y[..., :d], t)
        return torch.cat([v, -div.unsqueeze(-1)], dim=-1)

    y1 = torch.cat([x_val, torch.zeros(*x_val.shape[:-1], 1, dtype=x_val.dtype)], dim=-1)
    res = solve_ode(rhs, y1, 1.0, 0.0, solver)
    x0, ell0 = res.y[..., :d], res.y[..., d]
    return std_normal_logpdf(x0).sum(-1) - ell0, res.accuracy_flag


# --------------------------------------------------------------- model-bound


def _ar_context(bundle: TrainedBundle, times: np.ndarray, locations: np.ndarray):
    """Causal encoder pass over a sequence; returns reps and token masks."""
    n = len(times)
    z = to_log_interevent(times, bundle.eps)
    locs_n = bundle.affine.apply(locations)
    bm = BatchMasks.stack([autoregressive_masks(n)])
    tm = TorchMasks.from_batch(bm)
    zt = torch.as_tensor(z, dtype=torch.float32).unsqueeze(0)
    xt = torch.as_tensor(locs_n, dtype=torch.float32).unsqueeze(0)
    with torch.no_grad():
        enc = bundle.model.encode_history(zt, xt, tm.encoder_self)
    return zt, enc, tm


def temporal_density_cdf_tokens(
    bundle: TrainedBundle,
    z_tokens: torch.Tensor,
    enc: torch.Tensor,
    tm: TorchMasks,
    solver: SolverConfig,
) -> tuple[torch.Tensor, torch.Tensor, bool]:
    """Per-token (log p_Z, CDF) of the gap flow at the token's own gap value."""
    model = bundle.model

    def rhs(t: float, y: torch.Tensor) -> torch.Tensor:
        v, dv = model.temporal_derivative(y[0], t, enc, tm)
        return torch.stack([v, -dv])

    with torch.no_grad():
        y1 = torch.stack([z_tokens, torch.zeros_like(z_tokens)])
        res = solve_ode(rhs, y1, 1.0, 0.0, solver)
    z0, ell0 = res.y[0], res.y[1]
    log_pz = std_normal_logpdf(z0) - ell0
    return log_pz, std_normal_cdf(z0), res.accuracy_flag


def spatial_log_density_tokens(
    bundle: TrainedBundle,
    x_states: torch.Tensor,   # (B, L, d), normalized coordinates
    z_cond: torch.Tensor,     # (B, L)
    enc: torch.Tensor,
    tm: TorchMasks,
    solver: SolverConfig,
) -> tuple[torch.Tensor, bool]:
    """Per-token log density of the location flow in normalized coordinates."""
    model = bundle.model
    d = bundle.spatial_dim

    def rhs(t: float, y: torch.Tensor) -> torch.Tensor:
        v, div = model.spatial_divergence(y[..., :d], t, z_cond, enc, tm)
        return torch.cat([v, -div.unsqueeze(-1)], dim=-1)

    with torch.no_grad():
        y1 = torch.cat([x_states, torch.zeros(*x_states.shape[:-1], 1)], dim=-1)
        res = solve_ode(rhs, y1, 1.0, 0.0, solver)
    x0, ell0 = res.y[..., :d], res.y[..., d]
    return std_normal_logpdf(x0).sum(-1) - ell0, res.accuracy_flag


def _single_query_context(bundle: TrainedBundle, s_val: float, history: EventSequence):
    """Causally encoded history plus masks for one appended query token.

    The decoder carries a single token whose cross-attention row reaches the
    full history (or nothing, for an empty history), so per-query solves cost
    one token instead of one per history event.
    """
    m = len(history)
    last = history.times[-1] if m else 0.0
    if s_val <= last:
        raise ValueError(f"query time {s_val} must exceed the last history time {last}")
    z_query = float(np.log(s_val - last + bundle.eps))
    if m:
        z = to_log_interevent(history.times, bundle.eps)
        locs_n = bundle.affine.apply(history.locations)
        enc_allow = torch.as_tensor(np.tril(np.ones((m, m), dtype=bool))).unsqueeze(0)
        zt = torch.as_tensor(z, dtype=torch.float32).unsqueeze(0)
        xt = torch.as_tensor(locs_n, dtype=torch.float32).unsqueeze(0)
        with torch.no_grad():
            enc = bundle.model.encode_history(zt, xt, enc_allow)
        cross = torch.ones((1, 1, m), dtype=torch.bool)
    else:
        enc = torch.zeros((1, 1, bundle.config.embed_dim))
        cross = torch.zeros((1, 1, 1), dtype=torch.bool)
    tm = TorchMasks(
        encoder_self=torch.ones((1, 1, 1), dtype=torch.bool),  # unused by the decoder
        decoder_self=torch.ones((1, 1, 1), dtype=torch.bool),
        cross=cross,
        target=torch.ones((1, 1), dtype=torch.bool),
    )
    return z_query, enc, tm


def temporal_density_cdf(
    s_val: float, history: EventSequence, bundle: TrainedBundle, solver: SolverConfig | None = None
) -> tuple[float, float]:
    """Log density and CDF of the next event time at ``s_val`` given history."""
    solver = solver or SolverConfig()
    z_query, enc, tm = _single_query_context(bundle, s_val, history)
    zq = torch.tensor([[z_query]], dtype=torch.float32)
    log_pz, cdf, _ = temporal_density_cdf_tokens(bundle, zq, enc, tm, solver)
    # d/ds log(s - s_M + eps) contributes -z as the log-Jacobian of the gap map
    return float(log_pz[0, 0]) - z_query, float(cdf[0, 0])


def spatial_log_density(
    x_val: np.ndarray,
    s_val: float,
    history: EventSequence,
    bundle: TrainedBundle,
    solver: SolverConfig | None = None,
) -> float:
    """Log density of the event location at normalized coordinates ``x_val``."""
    return float(spatial_log_density_batch(
        np.asarray(x_val, dtype=np.float64).reshape(1, -1), s_val, history, bundle, solver)[0])


def spatial_log_density_batch(
    x_vals: np.ndarray,
    s_val: float,
    history: EventSequence,
    bundle: TrainedBundle,
    solver: SolverConfig | None = None,
) -> np.ndarray:
    """Vectorized :func:`spatial_log_density` over query points ``(M, d)``."""
    solver = solver or SolverConfig()
    z_query, enc, tm = _single_query_context(bundle, s_val, history)
    pts = np.asarray(x_vals, dtype=np.float64).reshape(-1, bundle.spatial_dim)
    m = pts.shape[0]
    x = torch.as_tensor(pts, dtype=torch.float32).reshape(m, 1, bundle.spatial_dim)
    zq = torch.full((m, 1), z_query, dtype=torch.float32)
    enc_b = enc.expand(m, -1, -1)
    tm_b = TorchMasks(tm.encoder_self.expand(m, -1, -1), tm.decoder_self.expand(m, -1, -1),
                      tm.cross.expand(m, -1, -1), tm.target.expand(m, -1))
    logp, _ = spatial_log_density_tokens(bundle, x, zq, enc_b, tm_b, solver)
    return logp[:, 0].numpy()


def hazard(
    s_val: float,
    x_val: np.ndarray,
    history: EventSequence,
    bundle: TrainedBundle,
    solver: SolverConfig | None = None,
) -> float:
    """Conditional intensity at (s, x) in original coordinates."""
    solver = solver or SolverConfig()
    log_ps, cdf = temporal_density_cdf(s_val, history, bundle, solver)
    x_norm = bundle.affine.apply(np.asarray(x_val, dtype=np.float64).reshape(-1))
    log_px = spatial_log_density(x_norm, s_val, history, bundle, solver) + bundle.affine.log_jacobian
    survival = max(1.0 - cdf, SURVIVAL_FLOOR)
    return float(math.exp(log_ps - math.log(survival) + log_px))


def model_intensity_grid(
    bundle: TrainedBundle,
    seq: EventSequence,
    g: int,
    solver: SolverConfig | None = None,
    box: np.ndarray | None = None,
) -> IntensityGrid:
    """Model hazard snapshots at every event time, strict-past conditioning.

    All tokens share one causal encoder pass; the temporal densities for the
    whole sequence come from a single batched backward solve, and the spatial
    densities for all grid cells and tokens from another.
    """
    solver = solver or SolverConfig()
    if box is None:
        meta_domain = bundle.meta.get("domain") if isinstance(bundle.meta, dict) else None
        if meta_domain:
            box = np.asarray(meta_domain["spatial_box"], dtype=np.float64)
        else:
            box = np.stack([np.zeros(bundle.spatial_dim), np.ones(bundle.spatial_dim)], axis=1)
    n = len(seq)
    centers, cell_area = make_grid(box, g)

    zt, enc, tm = _ar_context(bundle, seq.times, seq.locations)
    log_pz, cdf, t_flag = temporal_density_cdf_tokens(bundle, zt, enc, tm, solver)
    log_ps = log_pz - zt  # gap-map Jacobian per token
    survival = torch.clamp(1.0 - cdf, min=SURVIVAL_FLOOR)
    n_clamped = int((1.0 - cdf < SURVIVAL_FLOOR).sum())

    m = centers.shape[0]
    centers_norm = bundle.affine.apply(centers)
    x_states = torch.as_tensor(centers_norm, dtype=torch.float32).reshape(m, 1, -1)
    x_states = x_states.expand(m, n, bundle.spatial_dim).contiguous()
    enc_g = enc.expand(m, -1, -1)
    z_g = zt.expand(m, -1)
    tm_g = TorchMasks(
        tm.encoder_self.expand(m, -1, -1),
        tm.decoder_self.expand(m, -1, -1),
        tm.cross.expand(m, -1, -1),
        tm.target.expand(m, -1),
    )
    log_px_norm, x_flag = spatial_log_density_tokens(bundle, x_states, z_g, enc_g, tm_g, solver)
    log_px = log_px_norm + bundle.affine.log_jacobian  # (m, n), original coordinates

    log_lambda = (log_ps - torch.log(survival)).reshape(1, n) + log_px
    values = torch.exp(log_lambda).T.reshape(n, g, g).numpy()
    return IntensityGrid(
        seq.times.copy(),
        centers.reshape(g, g, 2),
        values,
        cell_area,
        meta={
            "survival_clamped": n_clamped,
            "temporal_accuracy_flag": bool(t_flag),
            "spatial_accuracy_flag": bool(x_flag),
        },
    )

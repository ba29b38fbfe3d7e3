"""Encoder-decoder velocity network shared by the temporal and spatial flows.

One transformer backbone hosts both flows: the encoder ingests observed
events (log inter-event gap + location features, summed), the decoder carries
one token per event to generate, and two MLP heads emit the scalar temporal
velocity and the d-dimensional spatial velocity. All attention is driven by
explicit boolean allow-matrices; a fully blocked row yields an exactly zero
attention output, so generation from an empty history is well defined and
blocked tokens can never influence the outcome, bitwise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .events import AffineMap, DEFAULT_LOG_EPS
from .masks import BatchMasks

CHECKPOINT_FORMAT = "stflow-ckpt-v1"


@dataclass
class ModelConfig:
    embed_dim: int = 32
    sin_dim: int = 32
    n_enc_layers: int = 3
    n_dec_layers: int = 3
    n_heads: int = 1
    ff_dim: int = 32
    dropout: float = 0.15
    pre_layer_norm: bool = True
    state_hidden: int = 64    # input MLP width for ODE states and locations
    time_hidden: int = 32     # input MLP width for the flow time
    head_hidden: int = 256    # velocity head width
    spatial_dim: int = 2

    def __post_init__(self):
        if self.sin_dim % 2:
            raise ValueError("sin_dim must be even")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")


def sinusoidal_encode(v: torch.Tensor, dim: int) -> torch.Tensor:
    """Interleaved sin/cos features at dim/2 geometric frequencies in [1, 1e4]."""
    if dim % 2:
        raise ValueError("encoding dimension must be even")
    if not torch.is_tensor(v):
        v = torch.as_tensor(v, dtype=torch.float32)
    half = dim // 2
    exponents = torch.linspace(0.0, 4.0, half, dtype=v.dtype, device=v.device)
    freqs = torch.pow(10.0, exponents)
    ang = v.unsqueeze(-1) * freqs
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
    return out.reshape(*v.shape, dim)


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, d_out))


@dataclass
class TorchMasks:
    """Boolean allow-matrices on the model device."""

    encoder_self: torch.Tensor  # (B, L, L)
    decoder_self: torch.Tensor  # (B, L, L)
    cross: torch.Tensor         # (B, L, L)
    target: torch.Tensor        # (B, L)

    @classmethod
    def from_batch(cls, bm: BatchMasks, device: torch.device | str = "cpu") -> "TorchMasks":
        to = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=torch.bool, device=device)
        return cls(to(bm.encoder_self), to(bm.decoder_self), to(bm.cross), to(bm.target))

    def expand_batch(self, repeat: int) -> "TorchMasks":
        """View the same per-sequence masks for ``repeat`` parallel states."""
        def rep(a):
            return a.repeat_interleave(repeat, dim=0) if repeat > 1 else a
        return TorchMasks(rep(self.encoder_self), rep(self.decoder_self),
                          rep(self.cross), rep(self.target))


class MaskedAttention(nn.Module):
    """Scaled dot-product attention driven by a boolean allow-matrix.

    Blocked entries are excluded from the softmax (exact zero weight), so
    the values of blocked tokens cannot influence live rows. Rows with no
    allowed key attend a neutral surrogate row and their output is zeroed
    afterwards, which keeps both forward values and gradients finite.
    """

    def __init__(self, dim: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.dropout_p = dropout
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, keyval: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        B, Lq, _ = query.shape
        Lk = keyval.shape[1]
        h, hd = self.n_heads, self.head_dim
        q = self.q_proj(query).view(B, Lq, h, hd).transpose(1, 2)
        k = self.k_proj(keyval).view(B, Lk, h, hd).transpose(1, 2)
        v = self.v_proj(keyval).view(B, Lk, h, hd).transpose(1, 2)
        live = allow.any(dim=-1)                        # (B, Lq)
        safe_allow = torch.where(live.unsqueeze(-1), allow, torch.ones_like(allow))
        out = nn.functional.scaled_dot_product_attention(
            q, k, v,
            attn_mask=safe_allow.unsqueeze(1),
            dropout_p=self.dropout_p if self.training else 0.0,
        )
        out = out * live.unsqueeze(1).unsqueeze(-1)     # zero dead rows exactly
        out = out.transpose(1, 2).reshape(B, Lq, h * hd)
        return self.out_proj(out) * live.unsqueeze(-1)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MaskedAttention(cfg.embed_dim, cfg.n_heads, cfg.dropout)
        self.ff = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.ff_dim), nn.GELU(),
            nn.Dropout(cfg.dropout), nn.Linear(cfg.ff_dim, cfg.embed_dim),
        )
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, allow))
        x = x + self.drop(self.ff(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MaskedAttention(cfg.embed_dim, cfg.n_heads, cfg.dropout)
        self.cross_attn = MaskedAttention(cfg.embed_dim, cfg.n_heads, cfg.dropout)
        self.ff = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.ff_dim), nn.GELU(),
            nn.Dropout(cfg.dropout), nn.Linear(cfg.ff_dim, cfg.embed_dim),
        )
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.norm3 = nn.LayerNorm(cfg.embed_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, self_allow, cross_allow):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, self_allow))
        x = x + self.drop(self.cross_attn(self.norm2(x), memory, cross_allow))
        x = x + self.drop(self.ff(self.norm3(x)))
        return x


class VelocityModel(nn.Module):
    """Shared-backbone velocity fields for the temporal and spatial flows."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        c = self.cfg
        d = c.spatial_dim
        self.loc_in = _mlp(d, c.state_hidden, c.embed_dim)
        self.tstate_in = _mlp(1, c.state_hidden, c.embed_dim)
        self.xstate_in = _mlp(d, c.state_hidden, c.embed_dim)
        self.ftime_mlp = _mlp(c.sin_dim, c.time_hidden, c.embed_dim)
        self.enc_layers = nn.ModuleList(EncoderLayer(c) for _ in range(c.n_enc_layers))
        self.dec_layers = nn.ModuleList(DecoderLayer(c) for _ in range(c.n_dec_layers))
        self.enc_norm = nn.LayerNorm(c.embed_dim)
        self.dec_norm = nn.LayerNorm(c.embed_dim)
        self.head_t = _mlp(c.embed_dim, c.head_hidden, 1)
        self.head_x = _mlp(c.embed_dim, c.head_hidden, d)

    # ---------------------------------------------------------------- encoder

    def embed_events(
        self,
        times_z: torch.Tensor,
        locations: torch.Tensor,
        time_present: torch.Tensor | None = None,
        loc_present: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Token embeddings: gap features plus location features, summed.

        Presence flags gate each attribute's contribution so partially
        observed events can expose only their known attributes.
        """
        gap_feat = sinusoidal_encode(times_z, self.cfg.sin_dim)
        loc_feat = self.loc_in(locations)
        if time_present is not None:
            gap_feat = gap_feat * time_present.unsqueeze(-1).to(gap_feat.dtype)
        if loc_present is not None:
            loc_feat = loc_feat * loc_present.unsqueeze(-1).to(loc_feat.dtype)
        return gap_feat + loc_feat

    def encode_history(
        self,
        times_z: torch.Tensor,
        locations: torch.Tensor,
        encoder_self: torch.Tensor,
        time_present: torch.Tensor | None = None,
        loc_present: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Masked self-attention over event tokens.

        Tokens whose allow-row is empty (conditioned-out or padded) come back
        as exact zero representations.
        """
        if times_z.shape != encoder_self.shape[:2] or locations.shape[:2] != times_z.shape:
            raise ValueError("batch and mask shapes disagree")
        x = self.embed_events(times_z, locations, time_present, loc_present)
        for layer in self.enc_layers:
            x = layer(x, encoder_self)
        x = self.enc_norm(x)
        active = encoder_self.any(dim=-1)
        return x * active.unsqueeze(-1)

    # ---------------------------------------------------------------- decoder

    def _flow_time_embedding(self, t: float | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        t_val = float(t) if not torch.is_tensor(t) else float(t.item())
        # solver stages may spill past the endpoints by rounding error only
        if -1e-6 <= t_val < 0.0 or 1.0 < t_val <= 1.0 + 1e-6:
            t_val = min(max(t_val, 0.0), 1.0)
        if not 0.0 <= t_val <= 1.0:
            raise ValueError(f"flow time must lie in [0, 1], got {t_val}")
        tt = torch.tensor(t_val, dtype=like.dtype, device=like.device)
        return self.ftime_mlp(sinusoidal_encode(tt, self.cfg.sin_dim))

    def _decode(self, tokens: torch.Tensor, enc_reps: torch.Tensor, masks: TorchMasks) -> torch.Tensor:
        x = tokens
        for layer in self.dec_layers:
            x = layer(x, enc_reps, masks.decoder_self, masks.cross)
        return self.dec_norm(x)

    def temporal_velocity(
        self, state: torch.Tensor, t: float, enc_reps: torch.Tensor, masks: TorchMasks
    ) -> torch.Tensor:
        """Velocity of the scalar gap flow, one value per decoder token."""
        if tuple(state.shape) != tuple(masks.cross.shape[:2]):
            raise ValueError(f"state shape {tuple(state.shape)} does not match decoder tokens")
        if tuple(enc_reps.shape[:2]) != (masks.cross.shape[0], masks.cross.shape[2]):
            raise ValueError("encoder representations do not match the cross mask")
        ft = self._flow_time_embedding(t, state)
        tokens = self.tstate_in(state.unsqueeze(-1)) + ft
        return self.head_t(self._decode(tokens, enc_reps, masks)).squeeze(-1)

    def spatial_velocity(
        self,
        state: torch.Tensor,
        t: float,
        times_z: torch.Tensor | None,
        enc_reps: torch.Tensor,
        masks: TorchMasks,
    ) -> torch.Tensor:
        """Velocity of the location flow, conditioned on per-token event times.

        ``times_z`` carries the log-gap representation of each token's event
        time: ground truth during training, generated values at inference.
        """
        if times_z is None:
            raise ValueError("spatial flow requires event times for every target token")
        if tuple(state.shape[:2]) != tuple(masks.cross.shape[:2]) or state.shape[-1] != self.cfg.spatial_dim:
            raise ValueError(f"bad spatial state shape {tuple(state.shape)}")
        if times_z.shape != state.shape[:2]:
            raise ValueError("times_z must be (batch, tokens)")
        ft = self._flow_time_embedding(t, state)
        tokens = self.xstate_in(state) + sinusoidal_encode(times_z, self.cfg.sin_dim) + ft
        return self.head_x(self._decode(tokens, enc_reps, masks))

    # ------------------------------------------------------------ divergences

    def spatial_divergence(
        self,
        state: torch.Tensor,
        t: float,
        times_z: torch.Tensor | None,
        enc_reps: torch.Tensor,
        masks: TorchMasks,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Velocity and its per-token divergence (trace of the d x d Jacobian).

        Exact via d reverse-mode passes. Token states must be decoupled
        across decoder tokens (diagonal decoder self-attention), which holds
        for the causal mask under which densities are evaluated.
        """
        d = self.cfg.spatial_dim
        state = state.detach().requires_grad_(True)
        with torch.enable_grad():
            v = self.spatial_velocity(state, t, times_z, enc_reps, masks)
            div = torch.zeros(state.shape[:2], dtype=state.dtype, device=state.device)
            for i in range(d):
                g = torch.autograd.grad(v[..., i].sum(), state, retain_graph=(i < d - 1))[0]
                div = div + g[..., i]
        return v.detach(), div.detach()

    def temporal_derivative(
        self, state: torch.Tensor, t: float, enc_reps: torch.Tensor, masks: TorchMasks
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Velocity and its per-token state derivative for the scalar flow."""
        state = state.detach().requires_grad_(True)
        with torch.enable_grad():
            v = self.temporal_velocity(state, t, enc_reps, masks)
            g = torch.autograd.grad(v.sum(), state)[0]
        return v.detach(), g.detach()


# ------------------------------------------------------------------ bundling


@dataclass
class TrainedBundle:
    """A loaded checkpoint: model in eval mode plus its data transforms."""

    model: VelocityModel
    config: ModelConfig
    affine: AffineMap
    eps: float
    meta: dict

    @property
    def spatial_dim(self) -> int:
        return self.config.spatial_dim


def save_checkpoint(
    path: str | Path,
    model: VelocityModel,
    affine: AffineMap,
    eps: float = DEFAULT_LOG_EPS,
    meta: dict | None = None,
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "state_dict": model.state_dict(),
        "model_config": asdict(model.cfg),
        "affine": affine.to_dict(),
        "eps": float(eps),
        "meta": meta or {},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> TrainedBundle:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format tag: {payload.get('format')!r}")
    cfg = ModelConfig(**payload["model_config"])
    model = VelocityModel(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return TrainedBundle(model, cfg, AffineMap.from_dict(payload["affine"]),
                         float(payload["eps"]), payload.get("meta", {}))

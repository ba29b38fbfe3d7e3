"""Attention-mask construction for masked conditional training and inference.

Three strategies are supported:

* autoregressive: causal encoder self-attention, each decoder token attends
  to the strict past through cross-attention, decoder self-attention is
  restricted to the diagonal;
* random condition: a Bernoulli condition vector marks observed events (1)
  versus events to generate (0);
* consecutive: the generated set is one contiguous block.

Matrices store "attention allowed" as True. Conversion to additive biases
happens at the model boundary, not here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TokenMaskSet:
    """Allow-matrices for one sequence plus the loss/generation target vector.

    ``cross`` rows index decoder tokens and columns index encoder tokens.
    """

    encoder_self: np.ndarray  # (N, N) bool
    decoder_self: np.ndarray  # (N, N) bool
    cross: np.ndarray         # (N, N) bool
    target: np.ndarray        # (N,) bool

    @property
    def n_tokens(self) -> int:
        return int(self.target.shape[0])


def autoregressive_masks(n: int) -> TokenMaskSet:
    """Causal masks: token i sees 1..i, decoder token n conditions on 1..n-1."""
    if n < 1:
        raise ValueError(f"need at least one token, got {n}")
    idx = np.arange(n)
    encoder_self = idx[None, :] <= idx[:, None]
    cross = idx[None, :] < idx[:, None]
    decoder_self = np.eye(n, dtype=bool)
    target = np.ones(n, dtype=bool)
    return TokenMaskSet(encoder_self, decoder_self, cross, target)


def sample_random_condition(n: int, p_cond: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Bernoulli(p_cond) condition vector, resampled until mixed."""
    if not 0.0 < p_cond < 1.0:
        raise ValueError("p_cond must lie strictly inside (0, 1)")
    if n < 2:
        raise ValueError("need at least two tokens for a mixed condition mask")
    while True:
        c = (rng.random(n) < p_cond).astype(np.int8)
        if 0 < c.sum() < n:
            return c


def consecutive_condition(n: int, a: int, b: int) -> np.ndarray:
    """Condition vector that generates the 1-based inclusive block [a, b]."""
    if not (1 <= a < b <= n):
        raise ValueError(f"endpoints must satisfy 1 <= a < b <= {n}, got a={a}, b={b}")
    c = np.ones(n, dtype=np.int8)
    c[a - 1:b] = 0
    return c


def sample_consecutive(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform endpoints a < b in {1..n}; the block [a, b] is generated."""
    if n < 2:
        raise ValueError("need at least two tokens for a consecutive mask")
    while True:
        a, b = rng.integers(1, n + 1, size=2)
        if a < b:
            return consecutive_condition(n, int(a), int(b))


def masks_from_sets(enc_keep: np.ndarray, targets: np.ndarray) -> TokenMaskSet:
    """Mask set from explicit conditioning/generation token sets.

    Conditioning tokens exchange information through full encoder
    self-attention; target tokens self-attend among themselves on the decoder
    side and cross-attend to every conditioning token. The sets may overlap
    (a token with one observed and one missing attribute conditions with the
    observed part while its missing part is generated).
    """
    enc_keep = np.asarray(enc_keep).astype(bool).reshape(-1)
    targets = np.asarray(targets).astype(bool).reshape(-1)
    if enc_keep.shape != targets.shape:
        raise ValueError("conditioning and target vectors must share a length")
    if not targets.any():
        raise ValueError("no generation target")
    encoder_self = enc_keep[:, None] & enc_keep[None, :]
    decoder_self = targets[:, None] & targets[None, :]
    cross = targets[:, None] & enc_keep[None, :]
    return TokenMaskSet(encoder_self, decoder_self, cross, targets.copy())


def masks_from_condition(c: np.ndarray) -> TokenMaskSet:
    """Mask set for a binary condition vector (1 = observed, 0 = generate)."""
    c = np.asarray(c).astype(bool).reshape(-1)
    if c.all():
        raise ValueError("condition vector has no generation target (all ones)")
    return masks_from_sets(c, ~c)


def apply_padding(tms: TokenMaskSet, pad: np.ndarray) -> TokenMaskSet:
    """Block every row/column of padded tokens and drop them from the target."""
    pad = np.asarray(pad).astype(bool).reshape(-1)
    n = tms.n_tokens
    if pad.shape[0] != n:
        raise ValueError(f"padding vector has length {pad.shape[0]}, masks have {n} tokens")
    keep2d = pad[:, None] & pad[None, :]
    return TokenMaskSet(
        tms.encoder_self & keep2d,
        tms.decoder_self & keep2d,
        tms.cross & keep2d,
        tms.target & pad,
    )


def empty_mask_set(n: int) -> TokenMaskSet:
    """All-blocked mask set (used for rows that cannot host a condition mask)."""
    z = np.zeros((n, n), dtype=bool)
    return TokenMaskSet(z.copy(), z.copy(), z.copy(), np.zeros(n, dtype=bool))


@dataclass
class BatchMasks:
    """Stacked per-sequence mask sets, aligned with a padded batch."""

    encoder_self: np.ndarray  # (B, L, L)
    decoder_self: np.ndarray  # (B, L, L)
    cross: np.ndarray         # (B, L, L)
    target: np.ndarray        # (B, L)
    condition: np.ndarray | None = None  # (B, L) int8, 1=observed, valid on real tokens

    @classmethod
    def stack(cls, sets: list[TokenMaskSet], condition: np.ndarray | None = None) -> "BatchMasks":
        return cls(
            np.stack([m.encoder_self for m in sets]),
            np.stack([m.decoder_self for m in sets]),
            np.stack([m.cross for m in sets]),
            np.stack([m.target for m in sets]),
            condition,
        )


def build_batch_masks(
    kind: str,
    pad: np.ndarray,
    rng: np.random.Generator | None = None,
    p_cond: float = 0.7,
) -> BatchMasks:
    """Per-row mask sets of one strategy, combined with the padding mask.

    Rows with fewer than two real events cannot host a mixed condition mask;
    they contribute an all-blocked set (zero loss) under the random and
    consecutive strategies.
    """
    pad = np.asarray(pad).astype(bool)
    B, L = pad.shape
    sets: list[TokenMaskSet] = []
    cond = np.ones((B, L), dtype=np.int8)
    for i in range(B):
        n = int(pad[i].sum())
        if kind == "ar":
            tms = autoregressive_masks(L) if L else empty_mask_set(L)
        elif kind in ("random", "consecutive"):
            if n < 2:
                sets.append(empty_mask_set(L))
                continue
            if rng is None:
                raise ValueError(f"mask kind '{kind}' needs an rng")
            c = (
                sample_random_condition(n, p_cond, rng)
                if kind == "random"
                else sample_consecutive(n, rng)
            )
            c_ext = np.ones(L, dtype=np.int8)
            c_ext[:n] = c
            cond[i, :n] = c
            tms = masks_from_condition(c_ext)
        else:
            raise ValueError(f"unknown mask kind '{kind}'")
        sets.append(apply_padding(tms, pad[i]))
    # Under the autoregressive strategy every real token plays both roles and
    # the encoder consumes full-sequence features; no condition vector applies.
    return BatchMasks.stack(sets, None if kind == "ar" else cond)


def masks_from_condition_batch(conds: list[np.ndarray], pad: np.ndarray) -> BatchMasks:
    """Stack condition-mask sets for explicit per-row condition vectors."""
    pad = np.asarray(pad).astype(bool)
    B, L = pad.shape
    sets = []
    cond = np.ones((B, L), dtype=np.int8)
    for i, c in enumerate(conds):
        n = int(pad[i].sum())
        c = np.asarray(c).astype(np.int8).reshape(-1)
        if c.shape[0] != n:
            raise ValueError(f"row {i}: condition length {c.shape[0]} != real length {n}")
        c_ext = np.ones(L, dtype=np.int8)
        c_ext[:n] = c
        cond[i, :n] = c
        sets.append(apply_padding(masks_from_condition(c_ext), pad[i]))
    return BatchMasks.stack(sets, cond)

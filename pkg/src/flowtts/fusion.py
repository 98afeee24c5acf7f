"""Unified multi-modal token fusion at the shape-and-invariant level.

Latent, image-condition, and text tokens are concatenated into one
sequence so that every token can attend to every other token; rotary
position treatment and additive modality embeddings distinguish position
and modality.  Weights are random (fixed seed) or zeroed; there is no
training loop, since the contract here is purely structural: shapes,
residual identities, norm preservation, permutation equivariance, and
cross-modal connectivity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .flows import _as_readonly

MODALITY_LATENT = 0
MODALITY_IMAGE = 1
MODALITY_TEXT = 2


@dataclass(frozen=True, eq=False)
class SequenceBatch:
    """Token matrix (L, d_model) with segment lengths, positions, modalities."""

    tokens: np.ndarray
    lengths: tuple
    positions: np.ndarray
    modality: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tokens", _as_readonly(self.tokens))
        pos = np.asarray(self.positions, dtype=np.int64)
        mod = np.asarray(self.modality, dtype=np.int64)
        pos.flags.writeable = False
        mod.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "modality", mod)
        object.__setattr__(self, "lengths", tuple(int(v) for v in self.lengths))
        rows = self.tokens.shape[0]
        if sum(self.lengths) != rows:
            raise ValueError("segment lengths must sum to the row count")
        if len(self.positions) != rows or len(self.modality) != rows:
            raise ValueError("positions and modality must cover every token")
        if not np.all(np.isin(self.modality,
                              (MODALITY_LATENT, MODALITY_IMAGE, MODALITY_TEXT))):
            raise ValueError("unknown modality id")

    @property
    def d_model(self) -> int:
        return self.tokens.shape[1]

    def split(self):
        """Recover the three input segments."""
        lz, li, lt = self.lengths
        return (self.tokens[:lz], self.tokens[lz:lz + li],
                self.tokens[lz + li:])


def build_sequence(z_tokens, img_tokens, txt_tokens) -> SequenceBatch:
    """Concatenate latent, image, and text tokens (in that order)."""
    parts = [np.atleast_2d(np.asarray(p, dtype=np.float64))
             for p in (z_tokens, img_tokens, txt_tokens)]
    parts = [p.reshape(0, parts[0].shape[1]) if p.size == 0 else p
             for p in parts]
    widths = {p.shape[1] for p in parts if p.shape[0] > 0}
    if len(widths) > 1:
        raise ValueError(f"token widths differ: {sorted(widths)}")
    lengths = tuple(p.shape[0] for p in parts)
    tokens = np.concatenate(parts, axis=0)
    modality = np.concatenate([
        np.full(lengths[0], MODALITY_LATENT),
        np.full(lengths[1], MODALITY_IMAGE),
        np.full(lengths[2], MODALITY_TEXT),
    ])
    return SequenceBatch(tokens=tokens, lengths=lengths,
                         positions=np.arange(tokens.shape[0]),
                         modality=modality)


def rotary(tokens: np.ndarray, positions: np.ndarray,
           base: float = 10000.0) -> np.ndarray:
    """Rotate feature pairs (2i, 2i+1) by angle position * base^(-2i/d).

    Pure rotation: per-token Euclidean norms are preserved, and position 0
    is the identity.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    d = tokens.shape[1]
    if d % 2 != 0:
        raise ValueError("rotary treatment needs even d_model")
    freqs = base ** (-np.arange(0, d, 2) / d)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = tokens[:, 0::2], tokens[:, 1::2]
    out = np.empty_like(tokens)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def encode_positions(seq: SequenceBatch,
                     modality_embed: "np.ndarray | None" = None,
                     base: float = 10000.0) -> SequenceBatch:
    """Apply the rotary position treatment, then add modality embeddings."""
    rotated = rotary(seq.tokens, seq.positions, base)
    if modality_embed is None:
        modality_embed = np.zeros((3, seq.d_model))
    modality_embed = np.asarray(modality_embed, dtype=np.float64)
    if modality_embed.shape != (3, seq.d_model):
        raise ValueError("modality embedding must be (3, d_model)")
    return replace(seq, tokens=rotated + modality_embed[seq.modality])


@dataclass(frozen=True, eq=False)
class BlockWeights:
    """One transformer block: attention projections plus a two-layer MLP."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    n_heads: int = 1

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.n_heads != 0:
            raise ValueError("d_model must divide by n_heads")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be ({d}, {d})")
        hidden = self.w1.shape[1]
        if self.w1.shape != (d, hidden) or self.w2.shape != (hidden, d):
            raise ValueError("MLP weight shapes inconsistent")
        if self.b1.shape != (hidden,) or self.b2.shape != (d,):
            raise ValueError("MLP bias shapes inconsistent")

    @classmethod
    def create(cls, d_model: int, seed: int = 0, n_heads: int = 1,
               hidden_mult: int = 4, zero_output: bool = False) -> "BlockWeights":
        """Seeded random weights; zero_output zeroes the attention output
        projection and the MLP output layer, making the block an exact
        identity through the residuals."""
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        scale = 1.0 / np.sqrt(d_model)
        hidden = hidden_mult * d_model
        draw = lambda *shape: gen.standard_normal(shape) * scale
        return cls(
            wq=draw(d_model, d_model), wk=draw(d_model, d_model),
            wv=draw(d_model, d_model),
            wo=np.zeros((d_model, d_model)) if zero_output else draw(d_model, d_model),
            w1=draw(d_model, hidden), b1=np.zeros(hidden),
            w2=np.zeros((hidden, d_model)) if zero_output else draw(hidden, d_model),
            b2=np.zeros(d_model), n_heads=n_heads)


def layer_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def self_attention(x: np.ndarray, w: BlockWeights):
    """Full (unmasked) self-attention.  Returns (output, row-stochastic
    attention probabilities of shape (heads, L, L))."""
    length, d = x.shape
    head_dim = d // w.n_heads
    q = (x @ w.wq).reshape(length, w.n_heads, head_dim).transpose(1, 0, 2)
    k = (x @ w.wk).reshape(length, w.n_heads, head_dim).transpose(1, 0, 2)
    v = (x @ w.wv).reshape(length, w.n_heads, head_dim).transpose(1, 0, 2)
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(head_dim)
    logits -= logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=-1, keepdims=True)
    heads = probs @ v
    merged = heads.transpose(1, 0, 2).reshape(length, d)
    return merged @ w.wo, probs


def block_forward(seq: SequenceBatch, weights: BlockWeights,
                  return_attention: bool = False):
    """Pre-normalization transformer block.

    attn_out = SelfAttention(LayerNorm(S));  A = S + attn_out
    out      = A + MLP(LayerNorm(A))

    Output shape equals input shape; with zeroed output projections the
    block is the exact identity.
    """
    x = seq.tokens
    attn_out, probs = self_attention(layer_norm(x), weights)
    a = x + attn_out
    h = layer_norm(a) @ weights.w1 + weights.b1
    h = np.where(h > 0.0, h, 0.0)
    out = a + (h @ weights.w2 + weights.b2)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite block output")
    result = replace(seq, tokens=out)
    return (result, probs) if return_attention else result

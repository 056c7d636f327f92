"""Three-stage transformer where only the CLS token crosses stage boundaries.

Leads are folded into the batch axis, so every sequence seen here belongs to
one lead. Each stage prepends the carried CLS token to that stage's
contextual tokens, runs a stack of pre-norm blocks and hands token 0 on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .encoder import ContextualTokens


class StageConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    dim: int = 64
    heads: int = 4
    layers_per_stage: tuple[int, ...] = (2, 2, 2)
    mlp_ratio: int = 4
    attention: str = "standard"  # or "differential"
    lambda_init: float = 0.5
    diff_head_norm: bool = False
    positional: str = "learned"  # or "none"
    per_lead_cls: bool = False

    def __post_init__(self):
        self.layers_per_stage = tuple(int(n) for n in self.layers_per_stage)
        if len(self.layers_per_stage) != 3:
            raise StageConfigError("exactly three stages")
        if min(self.layers_per_stage) < 0:
            raise StageConfigError("layers_per_stage must be >= 0")
        if self.dim % self.heads:
            raise StageConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.attention not in ("standard", "differential"):
            raise StageConfigError(f"unknown attention kind {self.attention!r}")
        if self.attention == "differential" and self.head_dim % 2:
            raise StageConfigError(f"differential attention needs an even head dim, got {self.head_dim}")
        if self.positional not in ("learned", "none"):
            raise StageConfigError(f"unknown positional embedding {self.positional!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return dict(
            dim=self.dim, heads=self.heads, layers_per_stage=list(self.layers_per_stage),
            mlp_ratio=self.mlp_ratio, attention=self.attention, lambda_init=self.lambda_init,
            diff_head_norm=self.diff_head_norm, positional=self.positional,
            per_lead_cls=self.per_lead_cls,
        )


@dataclass
class AttentionRecord:
    """Attention maps keyed by (stage, layer); each map is [B*C, H, T, T]."""

    maps: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    lambdas: dict[tuple[int, int], float] = field(default_factory=dict)

    def add(self, stage: int, layer: int, attn: np.ndarray, lam: float | None = None) -> None:
        self.maps[(stage, layer)] = attn
        if lam is not None:
            self.lambdas[(stage, layer)] = lam


# --------------------------------------------------------------------- params


def _dense(rng, fan_in, fan_out, dtype):
    w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)).astype(dtype)
    return DiffArray(w, requires_grad=True), DiffArray(np.zeros(fan_out, dtype=dtype), requires_grad=True)


def init_attention(cfg: StageConfig, prefix: str, rng, dtype) -> dict[str, DiffArray]:
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.w{name}"], p[f"{prefix}.b{name}"] = _dense(rng, cfg.dim, cfg.dim, dtype)
    if cfg.attention == "differential":
        p[f"{prefix}.lambda"] = DiffArray(np.asarray(cfg.lambda_init, dtype=dtype), requires_grad=True)
    return p


def init_block(cfg: StageConfig, prefix: str, rng, dtype) -> dict[str, DiffArray]:
    d, hidden = cfg.dim, cfg.dim * cfg.mlp_ratio
    p = {}
    for norm in ("norm1", "norm2"):
        p[f"{prefix}.{norm}.gain"] = DiffArray(np.ones(d, dtype=dtype), requires_grad=True)
        p[f"{prefix}.{norm}.shift"] = DiffArray(np.zeros(d, dtype=dtype), requires_grad=True)
    p.update(init_attention(cfg, f"{prefix}.attn", rng, dtype))
    p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"] = _dense(rng, d, hidden, dtype)
    p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"] = _dense(rng, hidden, d, dtype)
    return p


def init_stages(cfg: StageConfig, token_counts, leads: int, rng, dtype=np.float64) -> dict[str, DiffArray]:
    """Parameters of all three stages plus the shared CLS token.

    The positional table of stage ``s`` has ``N_s + 1`` rows; row 0 is the
    CLS slot and stays unused so the carried CLS enters each stage unchanged.
    """
    p: dict[str, DiffArray] = {}
    n_cls = leads if cfg.per_lead_cls else 1
    p["cls"] = DiffArray(rng.normal(0.0, 0.02, (n_cls, 1, cfg.dim)).astype(dtype), requires_grad=True)
    for s, (n_tok, n_layers) in enumerate(zip(token_counts, cfg.layers_per_stage), start=1):
        if cfg.positional == "learned":
            pos = rng.normal(0.0, 0.02, (n_tok + 1, cfg.dim))
            pos[0] = 0.0
            p[f"stage{s}.pos"] = DiffArray(pos.astype(dtype), requires_grad=True)
        for layer in range(1, n_layers + 1):
            p.update(init_block(cfg, f"stage{s}.layer{layer}", rng, dtype))
    return p


# ------------------------------------------------------------------ attention


def _split_heads(x: DiffArray, heads: int) -> DiffArray:
    B, T, D = x.shape
    return ad.transpose(ad.reshape(x, (B, T, heads, D // heads)), (0, 2, 1, 3))


def _merge_heads(x: DiffArray) -> DiffArray:
    B, H, T, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, T, H * dh))


def attention_map(q: DiffArray, k: DiffArray) -> DiffArray:
    """softmax(q k^T / sqrt(d)) over keys; q, k are [B, H, T, d]."""
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    return ad.softmax(ad.scale(scores, 1.0 / math.sqrt(q.shape[-1])))


def _project(x, params, prefix, name):
    return ad.add(ad.matmul(x, params[f"{prefix}.w{name}"]), params[f"{prefix}.b{name}"])


def msa_standard(x: DiffArray, params: dict, prefix: str, heads: int, record: list | None = None) -> DiffArray:
    """Unmasked multi-head self-attention over [B', T, D] tokens."""
    if x.shape[-1] % heads:
        raise ad.DimensionError(f"width {x.shape[-1]} not divisible by {heads} heads")
    q = _split_heads(_project(x, params, prefix, "q"), heads)
    k = _split_heads(_project(x, params, prefix, "k"), heads)
    v = _split_heads(_project(x, params, prefix, "v"), heads)
    attn = attention_map(q, k)
    if record is not None:
        record.append(attn.values)
    return _project(_merge_heads(ad.matmul(attn, v)), params, prefix, "o")


def msa_differential(
    x: DiffArray,
    params: dict,
    prefix: str,
    heads: int,
    record: list | None = None,
    head_norm: bool = False,
    lambda_init: float = 0.5,
) -> DiffArray:
    """Differential attention, no causal mask.

    Each head's query/key vectors are split into halves (q1|q2, k1|k2); the
    combined map ``softmax(q1 k1^T/sqrt(d/2)) - lam * softmax(q2 k2^T/sqrt(d/2))``
    weights the full-width values. Rows of the combined map sum to ``1 - lam``.
    """
    dh = x.shape[-1] // heads
    if x.shape[-1] % heads or dh % 2:
        raise StageConfigError(f"differential attention needs an even head dim, got width {x.shape[-1]} / {heads} heads")
    half = dh // 2
    q = _split_heads(_project(x, params, prefix, "q"), heads)
    k = _split_heads(_project(x, params, prefix, "k"), heads)
    v = _split_heads(_project(x, params, prefix, "v"), heads)
    a1 = attention_map(ad.slice_axis(q, -1, 0, half), ad.slice_axis(k, -1, 0, half))
    a2 = attention_map(ad.slice_axis(q, -1, half, dh), ad.slice_axis(k, -1, half, dh))
    lam = params[f"{prefix}.lambda"]
    attn = ad.sub(a1, ad.mul(lam, a2))
    if record is not None:
        record.append(attn.values)
    out = ad.matmul(attn, v)
    if head_norm:
        ones = DiffArray(np.ones(dh, dtype=out.dtype))
        zeros = DiffArray(np.zeros(dh, dtype=out.dtype))
        out = ad.scale(ad.layer_norm(out, ones, zeros), 1.0 - lambda_init)
    return _project(_merge_heads(out), params, prefix, "o")


def transformer_block(x: DiffArray, params: dict, prefix: str, cfg: StageConfig, record: list | None = None) -> DiffArray:
    """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x))."""
    h = ad.layer_norm(x, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.shift"])
    if cfg.attention == "differential":
        h = msa_differential(h, params, f"{prefix}.attn", cfg.heads, record, cfg.diff_head_norm, cfg.lambda_init)
    else:
        h = msa_standard(h, params, f"{prefix}.attn", cfg.heads, record)
    x = ad.add(x, h)
    h = ad.layer_norm(x, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.shift"])
    h = ad.gelu(_project(h, params, f"{prefix}.mlp", "1"))
    h = _project(h, params, f"{prefix}.mlp", "2")
    return ad.add(x, h)


# --------------------------------------------------------------------- stages


def transformer_stage(
    ctx: ContextualTokens,
    cls_in: DiffArray,
    params: dict,
    cfg: StageConfig,
    record: AttentionRecord | None = None,
) -> tuple[DiffArray, DiffArray]:
    """One stage: [CLS; ctx + pos] -> blocks -> (all tokens, CLS token)."""
    s = ctx.stage
    tokens = ctx.tokens
    if tokens.shape[-1] != cfg.dim:
        raise ad.DimensionError(f"stage {s} expects width {cfg.dim}, got {tokens.shape[-1]}")
    if cls_in.shape != (tokens.shape[0], 1, cfg.dim):
        raise ad.DimensionError(f"CLS state {cls_in.shape} does not match tokens {tokens.shape}")
    n = tokens.shape[1]
    if cfg.positional == "learned":
        pos = params[f"stage{s}.pos"]
        if pos.shape[0] < n + 1:
            raise StageConfigError(f"stage {s} positional table has {pos.shape[0]} rows, needs {n + 1}")
        tokens = ad.add(tokens, ad.getitem(pos, slice(1, n + 1)))
    x = ad.concat([cls_in, tokens], axis=1)
    for layer in range(1, cfg.layers_per_stage[s - 1] + 1):
        maps = [] if record is not None else None
        x = transformer_block(x, params, f"stage{s}.layer{layer}", cfg, maps)
        if record is not None:
            lam = params.get(f"stage{s}.layer{layer}.attn.lambda")
            record.add(s, layer, maps[0], None if lam is None else float(lam.values))
    cls_out = ad.slice_axis(x, 1, 0, 1)
    # only one token per lead-sequence may cross the boundary
    assert cls_out.shape[1] == 1
    return x, cls_out


def initial_cls(params: dict, batch: int, leads: int) -> DiffArray:
    cls = params["cls"]
    dim = cls.shape[-1]
    if cls.shape[0] == 1:
        return ad.expand(cls, (batch * leads, 1, dim))
    return ad.reshape(ad.expand(cls, (batch, leads, 1, dim)), (batch * leads, 1, dim))


def run_three_stages(
    taps: list[ContextualTokens],
    params: dict,
    cfg: StageConfig,
    record: AttentionRecord | None = None,
) -> tuple[DiffArray, AttentionRecord | None]:
    """Thread the CLS token through the three stages; return it as [B, C, D]."""
    if len(taps) != 3:
        raise ValueError("need exactly three taps")
    sizes = [t.spatial_size for t in taps]
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise StageConfigError(f"tap sizes {sizes} must strictly decrease")
    leads = taps[0].n_leads
    batch = taps[0].tokens.shape[0] // leads
    cls = initial_cls(params, batch, leads)
    for ctx in taps:
        _, cls = transformer_stage(ctx, cls, params, cfg, record)
        assert cls.shape == (batch * leads, 1, cfg.dim)
    return ad.reshape(cls, (batch, leads, cfg.dim)), record

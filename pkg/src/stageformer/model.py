"""Full classifier: depthwise encoder -> three CLS-linked stages -> head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .encoder import EncoderConfig, encode, init_encoder, project_per_lead
from .head import gated_attention, gated_logits, init_gated_head, init_pooled_head, pooled_head
from .transformer import AttentionRecord, StageConfig, init_stages, run_three_stages

# the four model variants of the ablation grid
VARIANTS = {
    "ours": ("gated", "standard"),
    "ours-no-attn-gated": ("pooled", "standard"),
    "ours-diff": ("gated", "differential"),
    "ours-no-attn-gated-diff": ("pooled", "differential"),
}


@dataclass
class ModelConfig:
    n_classes: int
    input_length: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stages: StageConfig = field(default_factory=StageConfig)
    head: str = "gated"  # or "pooled"
    per_lead_gate: bool = False
    n_wide_features: int = 0
    final_norm: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.encoder, Mapping):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.stages, Mapping):
            self.stages = StageConfig(**self.stages)
        if self.head not in ("gated", "pooled"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        self.token_counts  # validates input_length against the encoder

    @property
    def token_counts(self) -> list[int]:
        return self.encoder.tap_lengths(self.input_length)

    @property
    def head_width(self) -> int:
        return self.stages.dim + self.n_wide_features

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return dict(
            n_classes=self.n_classes, input_length=self.input_length,
            encoder=self.encoder.to_dict(), stages=self.stages.to_dict(), head=self.head,
            per_lead_gate=self.per_lead_gate, n_wide_features=self.n_wide_features,
            final_norm=self.final_norm, dtype=self.dtype,
        )

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))

    def variant(self, name: str) -> "ModelConfig":
        """Copy with head / attention kind switched to one of :data:`VARIANTS`."""
        head, attention = VARIANTS[name]
        d = self.to_dict()
        d["head"] = head
        d["stages"]["attention"] = attention
        return ModelConfig.from_dict(d)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, DiffArray]:
    rng = np.random.default_rng(seed)
    dtype = cfg.np_dtype
    params = init_encoder(cfg.encoder, cfg.stages.dim, rng, dtype)
    params.update(init_stages(cfg.stages, cfg.token_counts, cfg.encoder.leads, rng, dtype))
    if cfg.final_norm:
        params["final_norm.gain"] = DiffArray(np.ones(cfg.stages.dim, dtype=dtype), requires_grad=True)
        params["final_norm.shift"] = DiffArray(np.zeros(cfg.stages.dim, dtype=dtype), requires_grad=True)
    if cfg.head == "gated":
        leads = cfg.encoder.leads if cfg.per_lead_gate else None
        params.update(init_gated_head(cfg.head_width, cfg.n_classes, rng, dtype, leads))
    else:
        params.update(init_pooled_head(cfg.head_width, cfg.n_classes, rng, dtype))
    return params


def count_parameters(params: Mapping[str, DiffArray]) -> int:
    return int(sum(p.values.size for p in params.values()))


@dataclass
class ForwardResult:
    logits: DiffArray  # [B, N]
    final_cls: DiffArray  # [B, C, D], before the final norm
    lead_weights: DiffArray | None  # [B, N, C] for the gated head
    attention: AttentionRecord | None


def encode_tokens(x: DiffArray, cfg: ModelConfig, params: dict):
    taps = encode(x, cfg.encoder, params)
    return [project_per_lead(t, params) for t in taps]


def forward(
    params: dict,
    x,
    cfg: ModelConfig,
    features=None,
    record: bool = False,
) -> ForwardResult:
    """Logits for a batch ``x`` of shape [B, leads, input_length]."""
    if not isinstance(x, DiffArray):
        x = DiffArray(np.asarray(x, dtype=cfg.np_dtype))
    taps = encode_tokens(x, cfg, params)
    rec = AttentionRecord() if record else None
    final_cls, rec = run_three_stages(taps, params, cfg.stages, rec)
    h = final_cls
    if cfg.final_norm:
        h = ad.layer_norm(h, params["final_norm.gain"], params["final_norm.shift"])
    if cfg.n_wide_features:
        if features is None:
            raise ValueError(f"model expects {cfg.n_wide_features} wide features per recording")
        f = ad.as_diff(np.asarray(features, dtype=cfg.np_dtype))
        B, C, _ = h.shape
        if f.shape != (B, cfg.n_wide_features):
            raise ad.DimensionError(f"wide features {f.shape}, expected {(B, cfg.n_wide_features)}")
        f = ad.expand(ad.reshape(f, (B, 1, cfg.n_wide_features)), (B, C, cfg.n_wide_features))
        h = ad.concat([h, f], axis=-1)
    if cfg.head == "gated":
        logits, weights = gated_logits(h, gated_attention(h, params), params)
    else:
        logits, weights = pooled_head(h, params), None
    return ForwardResult(logits, final_cls, weights, rec)

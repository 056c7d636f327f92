"""Four-layer depthwise 1-D convolutional encoder with three token taps.

Every layer is a grouped convolution with ``groups == leads`` followed by
GELU, so lead ``c`` of every tap depends on input lead ``c`` only. The taps
are reshaped to per-lead token sequences ``[B*C, N, m]`` and mapped to the
transformer width by an affine projection (shared across leads by default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray


class EncoderConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    leads: int = 12
    kernels: tuple[int, ...] = (15, 9, 9, 5)
    strides: tuple[int, ...] = (3, 2, 2, 2)
    multipliers: tuple[int, ...] = (4, 8, 16, 32)
    tap_layers: tuple[int, ...] = (2, 3, 4)
    per_lead_projection: bool = False
    activation: str = "gelu"

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        self.strides = tuple(int(s) for s in self.strides)
        self.multipliers = tuple(int(m) for m in self.multipliers)
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        if not (len(self.kernels) == len(self.strides) == len(self.multipliers) == 4):
            raise EncoderConfigError("encoder has exactly 4 layers: need 4 kernels, strides and multipliers")
        if min(self.strides) < 1 or min(self.kernels) < 1 or min(self.multipliers) < 1:
            raise EncoderConfigError("kernels, strides and multipliers must be >= 1")
        if len(self.tap_layers) != 3 or any(t not in (1, 2, 3, 4) for t in self.tap_layers):
            raise EncoderConfigError(f"need 3 tap layers in 1..4, got {self.tap_layers}")
        if any(b <= a for a, b in zip(self.tap_layers, self.tap_layers[1:])):
            raise EncoderConfigError(f"tap layers must be strictly increasing, got {self.tap_layers}")
        if self.leads < 1:
            raise EncoderConfigError("leads must be >= 1")

    def layer_lengths(self, length: int) -> list[int]:
        out = []
        for k, s in zip(self.kernels, self.strides):
            if length < k:
                raise ad.InputTooShortError(
                    f"sequence of length {length} too short for kernel {k} (layer {len(out) + 1})"
                )
            length = ad.conv_output_length(length, k, s)
            out.append(length)
        return out

    def tap_lengths(self, length: int) -> list[int]:
        """Token counts N_1, N_2, N_3; raises unless strictly decreasing."""
        lengths = self.layer_lengths(length)
        taps = [lengths[t - 1] for t in self.tap_layers]
        if any(b >= a for a, b in zip(taps, taps[1:])):
            raise EncoderConfigError(f"tap lengths {taps} are not strictly decreasing")
        return taps

    def tap_widths(self) -> list[int]:
        return [self.multipliers[t - 1] for t in self.tap_layers]

    def to_dict(self) -> dict:
        return dict(
            leads=self.leads, kernels=list(self.kernels), strides=list(self.strides),
            multipliers=list(self.multipliers), tap_layers=list(self.tap_layers),
            per_lead_projection=self.per_lead_projection, activation=self.activation,
        )


@dataclass
class ContextualTokens:
    tokens: DiffArray  # [B*C, N, width]
    stage: int
    n_leads: int

    @property
    def spatial_size(self) -> int:
        return self.tokens.shape[1]

    @property
    def width(self) -> int:
        return self.tokens.shape[2]


def init_encoder(cfg: EncoderConfig, dim: int, rng: np.random.Generator, dtype=np.float64) -> dict[str, DiffArray]:
    params: dict[str, DiffArray] = {}
    prev = 1
    for i, (k, m) in enumerate(zip(cfg.kernels, cfg.multipliers), start=1):
        std = np.sqrt(2.0 / (prev * k))
        params[f"encoder.conv{i}.weight"] = DiffArray(
            rng.normal(0.0, std, (cfg.leads * m, prev, k)).astype(dtype), requires_grad=True)
        params[f"encoder.conv{i}.bias"] = DiffArray(np.zeros(cfg.leads * m, dtype=dtype), requires_grad=True)
        prev = m
    for s, width in enumerate(cfg.tap_widths(), start=1):
        std = np.sqrt(1.0 / width)
        if cfg.per_lead_projection:
            w = rng.normal(0.0, std, (cfg.leads, width, dim))
            b = np.zeros((cfg.leads, 1, dim))
        else:
            w = rng.normal(0.0, std, (width, dim))
            b = np.zeros(dim)
        params[f"encoder.proj{s}.weight"] = DiffArray(w.astype(dtype), requires_grad=True)
        params[f"encoder.proj{s}.bias"] = DiffArray(b.astype(dtype), requires_grad=True)
    return params


def _to_lead_tokens(h: DiffArray, leads: int) -> DiffArray:
    # [B, C*m, N] -> [B, C, N, m]
    B, Cm, N = h.shape
    h = ad.reshape(h, (B, leads, Cm // leads, N))
    return ad.transpose(h, (0, 1, 3, 2))


def encode(x: DiffArray, cfg: EncoderConfig, params: dict[str, DiffArray]) -> list[ContextualTokens]:
    """Run the four depthwise layers; return the three taps in stage order."""
    x = ad.as_diff(x)
    if x.ndim != 3 or x.shape[1] != cfg.leads:
        raise ad.DimensionError(f"expected input [B, {cfg.leads}, L], got {x.shape}")
    cfg.tap_lengths(x.shape[2])
    act = ad.gelu if cfg.activation == "gelu" else ad.relu
    h = x
    taps = []
    for i, s in enumerate(cfg.strides, start=1):
        h = ad.grouped_conv1d(
            h, params[f"encoder.conv{i}.weight"], params[f"encoder.conv{i}.bias"],
            stride=s, groups=cfg.leads,
        )
        h = act(h)
        if i in cfg.tap_layers:
            t = _to_lead_tokens(h, cfg.leads)
            B, C, N, m = t.shape
            taps.append(ContextualTokens(ad.reshape(t, (B * C, N, m)), len(taps) + 1, C))
        if i == cfg.tap_layers[-1]:
            break
    return taps


def project_per_lead(t: ContextualTokens, params: dict[str, DiffArray]) -> ContextualTokens:
    """Affine map of each token from the tap width to the transformer width."""
    w = params[f"encoder.proj{t.stage}.weight"]
    b = params[f"encoder.proj{t.stage}.bias"]
    tok = t.tokens
    if w.ndim == 3:
        BC, N, m = tok.shape
        C = t.n_leads
        tok4 = ad.reshape(tok, (BC // C, C, N, m))
        out = ad.add(ad.matmul(tok4, w), ad.expand(b, (C, N, w.shape[-1])))
        out = ad.reshape(out, (BC, N, w.shape[-1]))
    else:
        out = ad.add(ad.matmul(tok, w), b)
    return ContextualTokens(out, t.stage, t.n_leads)

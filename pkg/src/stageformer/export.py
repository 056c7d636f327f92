"""Attention-map export: raw per-head CSVs, lead attribution and SVG overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from .head import LeadAttribution
from .model import forward
from .signals import PipelineConfig, Recording, evenly_spaced_crops, preprocess
from .train import Checkpoint, load_checkpoint

STANDARD_LEADS = ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"]

SVG_WIDTH, SVG_HEIGHT, SVG_PAD = 900, 240, 10


def lead_names_for(rec: Recording) -> list[str]:
    names = (rec.source_meta or {}).get("lead_names")
    if names and len(names) == rec.n_leads:
        return [str(n) for n in names]
    if rec.n_leads == len(STANDARD_LEADS):
        return list(STANDARD_LEADS)
    return [f"lead{c}" for c in range(rec.n_leads)]


def _fmt(v: float) -> str:
    return repr(float(v))


def _matrix_csv(m: np.ndarray) -> str:
    return "".join(",".join(_fmt(v) for v in row) + "\n" for row in m)


def cls_row_overlay(attn: np.ndarray, length: int) -> np.ndarray:
    """Token 0's attention to the contextual tokens, nearest-neighbour upsampled.

    ``attn`` is one lead's [H, T, T] map; heads are averaged.
    """
    row = attn[:, 0, 1:].mean(axis=0)
    idx = np.minimum((np.arange(length) * len(row)) // length, len(row) - 1)
    return row[idx]


def _polyline(y: np.ndarray, lo: float, hi: float) -> str:
    n = len(y)
    xs = SVG_PAD + np.arange(n) * (SVG_WIDTH - 2 * SVG_PAD) / max(1, n - 1)
    span = hi - lo if hi > lo else 1.0
    ys = SVG_HEIGHT - SVG_PAD - (y - lo) / span * (SVG_HEIGHT - 2 * SVG_PAD)
    return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))


def render_svg(signal: np.ndarray, overlay: np.ndarray, title: str) -> str:
    """Signal trace over a shaded attention profile (both scaled to the canvas)."""
    top = float(overlay.max()) if overlay.size else 0.0
    shade = overlay / top if top > 0 else np.zeros_like(overlay)
    n = len(signal)
    step = (SVG_WIDTH - 2 * SVG_PAD) / max(1, n)
    # merge equal neighbouring samples into one rect to keep files small
    rects = []
    start = 0
    for i in range(1, n + 1):
        if i == n or shade[i] != shade[start]:
            rects.append(
                f'<rect x="{SVG_PAD + start * step:.2f}" y="{SVG_PAD}" width="{(i - start) * step:.2f}" '
                f'height="{SVG_HEIGHT - 2 * SVG_PAD}" fill="#d62728" fill-opacity="{0.6 * shade[start]:.4f}"/>'
            )
            start = i
    trace = _polyline(signal, float(signal.min()), float(signal.max()))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">\n'
        f"<title>{title}</title>\n"
        f'<g id="attention">\n' + "\n".join(rects) + "\n</g>\n"
        f'<polyline id="signal" fill="none" stroke="#1f1f1f" stroke-width="1" points="{trace}"/>\n'
        "</svg>\n"
    )


def export_attention(
    checkpoint: Checkpoint | str | Path,
    recording: Recording,
    out_dir: str | Path,
    pipeline: PipelineConfig | None = None,
) -> list[Path]:
    """Write every attention map of the first crop of ``recording``.

    Files: ``stage{s}_layer{l}_head{h}_lead{c}.csv`` (1-based stage/layer,
    0-based head/lead), ``lead_attribution.csv`` and ``lead{c}.svg``, the last
    overlaying the final-stage CLS row on the crop. Output is byte-stable.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    cfg = ckpt.model_config
    if pipeline is None:
        pipeline = ckpt.train_config.pipeline if ckpt.train_config is not None else PipelineConfig()
    rec = preprocess(recording, pipeline)
    if rec.n_leads != cfg.encoder.leads:
        raise ValueError(f"recording has {rec.n_leads} leads, model expects {cfg.encoder.leads}")
    crop = evenly_spaced_crops(rec.signal, cfg.input_length)[:1].astype(cfg.np_dtype)
    feats = None
    if cfg.n_wide_features:
        if rec.features is None:
            raise ValueError("model expects wide features but the recording has none")
        feats = np.asarray(rec.features)[None, :]
    with ad.no_grad():
        out = forward(ckpt.diff_params(), crop, cfg, feats, record=True)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    maps = out.attention.maps
    for (s, layer) in sorted(maps):
        m = maps[(s, layer)]  # [C, H, T, T] for a single recording
        for h in range(m.shape[1]):
            for c in range(m.shape[0]):
                p = out_dir / f"stage{s}_layer{layer}_head{h}_lead{c}.csv"
                p.write_text(_matrix_csv(m[c, h].astype(np.float64)))
                written.append(p)

    names = ckpt.class_names or [f"class{i}" for i in range(cfg.n_classes)]
    leads = lead_names_for(recording)
    if out.lead_weights is not None:
        w = out.lead_weights.values[0].astype(np.float64)
    else:
        # the pooled head averages leads, which is a uniform attribution
        w = np.full((cfg.n_classes, rec.n_leads), 1.0 / rec.n_leads)
    p = out_dir / "lead_attribution.csv"
    LeadAttribution(w, list(names), leads).save(p)
    written.append(p)

    final = max(maps) if maps else None
    sig = crop[0].astype(np.float64)
    for c in range(rec.n_leads):
        overlay = (cls_row_overlay(maps[final][c].astype(np.float64), sig.shape[1])
                   if final else np.zeros(sig.shape[1]))
        p = out_dir / f"lead{c}.svg"
        p.write_text(render_svg(sig[c], overlay, f"{rec.id} {leads[c]}"))
        written.append(p)
    return written

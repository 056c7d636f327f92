"""
Train a small model and look at its attention
=============================================

A few epochs on synthetic data, an evaluation and an attention export.
"""

import tempfile
from pathlib import Path

from stageformer.export import export_attention
from stageformer.signals import SyntheticSpec, load_recording, read_manifest, split_folds, synth_generate, write_dataset
from stageformer.train import TrainConfig, evaluate, train

work = Path(tempfile.mkdtemp())

# %%
# 200 four-lead recordings split into five folds; fold 0 is held out.
spec = SyntheticSpec(n_recordings=200, leads=4, duration=8.0, rng_seed=7)
manifest = split_folds(read_manifest(write_dataset(synth_generate(spec), spec.class_names, work / "data")), 5, 0)
train_m, test_m = manifest.subset(exclude=[0]), manifest.subset(folds=[0])

# %%
# The four ablation variants differ only in the ``variant`` field.
cfg = TrainConfig(
    model=dict(encoder=dict(leads=4, multipliers=[4, 8, 8, 16]),
               stages=dict(dim=32, heads=4, layers_per_stage=[1, 1, 1])),
    pipeline=dict(target_fs=100.0, segment_seconds=5.0, fir_taps=301),
    variant="ours", epochs=4, batch_size=16, seed=0,
)
result = train(cfg, train_m, out_dir=work / "run", on_epoch=print)

# %%
# Held-out metrics.
report = evaluate(result.checkpoint, test_m).report
print(f"macro AUC {report.macro_auc:.3f}  macro F2 {report.macro_fbeta:.3f}  challenge {report.challenge_normalized:.3f}")

# %%
# One CSV per stage, layer, head and lead, the lead attribution and an SVG
# per lead with the final-stage CLS attention shaded under the trace.
rec = load_recording(test_m.resolve(test_m.entries[0]))
files = export_attention(result.checkpoint, rec, work / "attn")
print(len(files), "files in", work / "attn")
print((work / "attn" / "lead_attribution.csv").read_text())

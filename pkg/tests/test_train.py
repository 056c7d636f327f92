import json
import math

import numpy as np
import pytest

from stageformer import autodiff as ad
from stageformer.autodiff import DiffArray
from stageformer.autodiff.gradcheck import finite_diff_check
from stageformer.export import export_attention
from stageformer.head import LeadAttribution
from stageformer.metrics import EvalReport
from stageformer.signals import load_recording, read_manifest
from stageformer.train import (
    Checkpoint,
    TrainConfig,
    evaluate,
    load_checkpoint,
    loss,
    save_checkpoint,
    train,
)


# ------------------------------------------------------------------- loss


def test_loss_at_zero_logits():
    assert float(loss(DiffArray(np.zeros((4, 3))), np.eye(4, 3)).values) == pytest.approx(math.log(2), abs=1e-15)


def test_loss_vanishes_for_confident_correct():
    assert float(loss(DiffArray(np.array([[800.0]])), [1.0]).values) == 0.0
    assert float(loss(DiffArray(np.array([[-800.0]])), [0.0]).values) == 0.0


def test_loss_binary_targets_and_shape_check():
    z = DiffArray(np.array([[0.3], [-1.2]]))
    assert float(loss(z, [1.0, 0.0]).values) == pytest.approx(
        np.mean([math.log1p(math.exp(-0.3)), math.log1p(math.exp(-1.2))]), abs=1e-12)
    with pytest.raises(ad.DimensionError):
        loss(DiffArray(np.zeros((2, 3))), np.zeros((2, 2)))


def test_loss_gradient(rng):
    z = DiffArray(2 * rng.standard_normal((5, 3)), requires_grad=True)
    y = (rng.random((5, 3)) < 0.5).astype(float)
    assert finite_diff_check(lambda: loss(z, y), [z], order=4, floor=1e-9) < 1e-5


# ------------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer=dict(lr=0.0))
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(variant="bogus")


def test_config_dict_roundtrip(tiny_train_config):
    d = tiny_train_config.to_dict()
    assert TrainConfig.from_dict(json.loads(json.dumps(d))).to_dict() == d


@pytest.mark.parametrize("variant, head, attention", [
    ("ours", "gated", "standard"),
    ("ours-no-attn-gated", "pooled", "standard"),
    ("ours-diff", "gated", "differential"),
    ("ours-no-attn-gated-diff", "pooled", "differential"),
])
def test_variants_reachable_from_config(tiny_train_config, variant, head, attention):
    tiny_train_config.variant = variant
    cfg = tiny_train_config.model_config(2)
    assert (cfg.head, cfg.stages.attention) == (head, attention)


# ------------------------------------------------------------------- train


@pytest.fixture(scope="module")
def manifest(tiny_dataset):
    return read_manifest(tiny_dataset)


def test_same_seed_same_curve(manifest, tiny_train_config):
    a = train(tiny_train_config, manifest)
    b = train(tiny_train_config, manifest)
    assert [r["train_loss"] for r in a.history] == [r["train_loss"] for r in b.history]
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].values, b.params[k].values)


def test_resume_continues_identically(manifest, tiny_train_config, tmp_path):
    full = train(tiny_train_config, manifest, out_dir=tmp_path / "full")
    tiny_train_config.epochs = 1
    train(tiny_train_config, manifest, out_dir=tmp_path / "part")
    tiny_train_config.epochs = 3
    resumed = train(tiny_train_config, manifest, out_dir=tmp_path / "resumed",
                    resume=tmp_path / "part" / "epoch_0001.ckpt")
    assert [r["train_loss"] for r in resumed.history] == [r["train_loss"] for r in full.history]
    for k in full.params:
        np.testing.assert_array_equal(resumed.params[k].values, full.params[k].values)
    log = [json.loads(line) for line in (tmp_path / "resumed" / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2, 3]


def test_checkpoint_roundtrip_bit_exact(manifest, tiny_train_config, tmp_path):
    res = train(tiny_train_config, manifest)
    path = save_checkpoint(res.checkpoint, tmp_path / "c.ckpt")
    back = load_checkpoint(path)
    assert back.params.keys() == res.checkpoint.params.keys()
    for k, v in res.checkpoint.params.items():
        assert back.params[k].dtype == v.dtype
        np.testing.assert_array_equal(back.params[k], v)
        np.testing.assert_array_equal(back.optimizer_m[k], res.checkpoint.optimizer_m[k])
        np.testing.assert_array_equal(back.optimizer_v[k], res.checkpoint.optimizer_v[k])
    assert back.rng_state == res.checkpoint.rng_state
    assert back.model_config.to_dict() == res.checkpoint.model_config.to_dict()
    assert back.train_config.to_dict() == tiny_train_config.to_dict()
    # the container is deterministic too
    assert save_checkpoint(back, tmp_path / "d.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_validation_fold_metrics_logged(manifest, tiny_train_config):
    tiny_train_config.val_fold = 0
    tiny_train_config.epochs = 1
    row = train(tiny_train_config, manifest).history[0]
    assert {"train_loss", "val_loss", "val_macro_auc", "val_macro_fbeta"} <= set(row)


def test_empty_manifest_rejected(manifest, tiny_train_config):
    with pytest.raises(ValueError):
        train(tiny_train_config, manifest.subset(folds=[99]))


# ------------------------------------------------------------------- evaluate


@pytest.fixture(scope="module")
def trained(manifest):
    import copy

    from conftest import TINY_TRAIN

    return train(TrainConfig.from_dict(copy.deepcopy(TINY_TRAIN)), manifest).checkpoint


def test_evaluate_report(manifest, trained):
    ev = evaluate(trained, manifest)
    assert ev.scores.shape == (16, 2)
    assert ev.report.n_recordings == 16
    assert EvalReport.from_json(ev.report.to_json()) == ev.report


def test_evaluate_empty_fold(manifest, trained):
    with pytest.raises(ValueError, match="empty"):
        evaluate(trained, manifest.subset(folds=[42]))


def test_evaluate_class_mismatch(manifest, trained):
    ck = Checkpoint(trained.params, trained.model_config, trained.train_config)
    ck.model_config = type(trained.model_config).from_dict({**trained.model_config.to_dict(), "n_classes": 3})
    with pytest.raises(ValueError, match="classes"):
        evaluate(ck, manifest)


# ------------------------------------------------------------------- export


def test_export_files_and_stability(manifest, trained, tmp_path):
    rec = load_recording(manifest.resolve(manifest.entries[0]))
    files = export_attention(trained, rec, tmp_path / "a")
    cfg = trained.model_config
    C, H = cfg.encoder.leads, cfg.stages.heads
    assert len(files) == sum(cfg.stages.layers_per_stage) * H * C + 1 + C
    names = {f.name for f in files}
    assert "stage3_layer1_head1_lead1.csv" in names and "lead_attribution.csv" in names and "lead1.svg" in names
    for f in files:
        if f.name.startswith("stage"):
            m = np.loadtxt(f, delimiter=",")
            assert m.shape[0] == m.shape[1]
            np.testing.assert_allclose(m.sum(1), 1.0, atol=1e-6)
    att = LeadAttribution.load(tmp_path / "a" / "lead_attribution.csv")
    np.testing.assert_allclose(att.weights.sum(1), 1.0, atol=1e-6)
    again = export_attention(trained, rec, tmp_path / "b")
    for f, g in zip(files, again):
        assert f.read_bytes() == g.read_bytes()

"""Training loop, optimiser, checkpoints and evaluation driver."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .metrics import EvalReport, evaluate_predictions
from .model import VARIANTS, ModelConfig, forward, init_params
from .signals import (
    DatasetManifest,
    PipelineConfig,
    evenly_spaced_crops,
    load_recording,
    preprocess,
    random_window,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STGFCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # or "sgd"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainConfig:
    model: dict = field(default_factory=dict)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    variant: str | None = None
    batch_size: int = 32
    epochs: int = 10
    loss: str = "bce"
    seed: int = 0
    crops_per_recording: int = 1
    val_fold: int | None = None
    stop_at_loss: float | None = None
    checkpoint_every: int = 1
    wide_features: bool = False
    threshold: float = 0.5
    device: str = "cpu"

    def __post_init__(self):
        if isinstance(self.pipeline, Mapping):
            self.pipeline = PipelineConfig(**self.pipeline)
        if isinstance(self.optimizer, Mapping):
            self.optimizer = OptimizerConfig(**self.optimizer)
        self.model = dict(self.model)
        if self.batch_size < 1 or self.epochs < 1 or self.crops_per_recording < 1:
            raise ValueError("batch_size, epochs and crops_per_recording must be positive")
        if self.variant is not None and self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.loss != "bce":
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.device != "cpu":
            raise ValueError("only the cpu device is supported")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**dict(d))

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        o = self.optimizer
        return dict(
            model=self.model, pipeline=self.pipeline.to_dict(),
            optimizer=dict(kind=o.kind, lr=o.lr, betas=list(o.betas), eps=o.eps, weight_decay=o.weight_decay),
            variant=self.variant, batch_size=self.batch_size, epochs=self.epochs, loss=self.loss,
            seed=self.seed, crops_per_recording=self.crops_per_recording, val_fold=self.val_fold,
            stop_at_loss=self.stop_at_loss, checkpoint_every=self.checkpoint_every,
            wide_features=self.wide_features, threshold=self.threshold, device=self.device,
        )

    def model_config(self, n_classes: int, n_wide_features: int = 0) -> ModelConfig:
        d = dict(self.model)
        d.update(n_classes=n_classes, input_length=self.pipeline.segment_samples)
        if self.wide_features:
            d["n_wide_features"] = n_wide_features
        cfg = ModelConfig.from_dict(d)
        return cfg.variant(self.variant) if self.variant else cfg


# ------------------------------------------------------------------------ loss


def loss(logits: DiffArray, targets) -> DiffArray:
    """Mean binary cross-entropy with logits over every (sample, class) pair."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.ndim == 1 and logits.ndim == 2 and logits.shape[1] == 1:
        t = t[:, None]
    return ad.bce_with_logits(logits, t)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ------------------------------------------------------------------- optimiser


class Optimizer:
    """Adam with decoupled weight decay, or plain SGD."""

    def __init__(self, params: Mapping[str, DiffArray], cfg: OptimizerConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self, params: Mapping[str, DiffArray]) -> None:
        c = self.cfg
        self.t += 1
        b1, b2 = c.betas
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            dt = p.values.dtype
            if c.weight_decay:
                p.values -= dt.type(c.lr * c.weight_decay) * p.values
            if c.kind == "sgd":
                p.values -= dt.type(c.lr) * g
                continue
            m, v = self.m[name], self.v[name]
            m *= dt.type(b1)
            m += dt.type(1.0 - b1) * g
            v *= dt.type(b2)
            v += dt.type(1.0 - b2) * g * g
            step = (m / dt.type(corr1)) / (np.sqrt(v / dt.type(corr2)) + dt.type(c.eps))
            p.values -= dt.type(c.lr) * step


# ------------------------------------------------------------------------ data


@dataclass
class PreparedData:
    ids: list[str]
    signals: list[np.ndarray]  # preprocessed [C, L] at the target rate
    targets: np.ndarray  # [n, N] multi-hot
    label_sets: list[tuple[int, ...]]
    features: np.ndarray | None

    def __len__(self) -> int:
        return len(self.ids)


def prepare(manifest: DatasetManifest, pipeline: PipelineConfig, dtype=np.float32) -> PreparedData:
    ids, signals, feats = [], [], []
    for entry in manifest.entries:
        rec = preprocess(load_recording(manifest.resolve(entry)), pipeline)
        ids.append(rec.id)
        signals.append(rec.signal.astype(dtype))
        feats.append(rec.features)
    features = None
    if feats and all(f is not None for f in feats):
        features = np.stack(feats)
    return PreparedData(ids, signals, manifest.multi_hot(), [e.labels for e in manifest.entries], features)


# ------------------------------------------------------------------ checkpoint


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    train_config: TrainConfig | None = None
    epoch: int = 0
    rng_state: dict | None = None
    optimizer_t: int = 0
    optimizer_m: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_v: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def diff_params(self, requires_grad: bool = False) -> dict[str, DiffArray]:
        return {k: DiffArray(v.copy(), requires_grad=requires_grad) for k, v in self.params.items()}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write a versioned container: magic, version, JSON manifest, raw LE tensors."""
    path = Path(path)
    tensors: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"adam_m/{k}", v) for k, v in ckpt.optimizer_m.items()]
    tensors += [(f"adam_v/{k}", v) for k, v in ckpt.optimizer_v.items()]
    entries, blobs, offset = [], [], 0
    for name, arr in tensors:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "epoch": ckpt.epoch,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": None if ckpt.train_config is None else ckpt.train_config.to_dict(),
        "rng_state": ckpt.rng_state,
        "optimizer_t": ckpt.optimizer_t,
        "history": ckpt.history,
        "class_names": ckpt.class_names,
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, n_head = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    manifest = json.loads(data[20:20 + n_head])
    base = 20 + n_head
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for t in manifest["tensors"]:
        kind, name = t["name"].split("/", 1)
        raw = data[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        groups[kind][name] = arr.astype(arr.dtype.newbyteorder("="))
    tc = manifest.get("train_config")
    return Checkpoint(
        params=groups["param"],
        model_config=ModelConfig.from_dict(manifest["model_config"]),
        train_config=None if tc is None else TrainConfig.from_dict(tc),
        epoch=int(manifest["epoch"]),
        rng_state=manifest.get("rng_state"),
        optimizer_t=int(manifest.get("optimizer_t", 0)),
        optimizer_m=groups["adam_m"],
        optimizer_v=groups["adam_v"],
        history=list(manifest.get("history", [])),
        class_names=list(manifest.get("class_names", [])),
    )


# ----------------------------------------------------------------------- train


@dataclass
class TrainResult:
    params: dict[str, DiffArray]
    model_config: ModelConfig
    history: list[dict]
    checkpoint: Checkpoint


def _batch_features(data: PreparedData, idx, cfg: ModelConfig):
    if not cfg.n_wide_features:
        return None
    return data.features[idx]


def predict_logits(
    params: dict[str, DiffArray],
    cfg: ModelConfig,
    data: PreparedData,
    batch_size: int = 64,
) -> np.ndarray:
    """Per-recording logits averaged over ceil(L / segment) evenly spaced crops."""
    crops, owner = [], []
    for r, sig in enumerate(data.signals):
        c = evenly_spaced_crops(sig, cfg.input_length)
        crops.append(c)
        owner.extend([r] * len(c))
    stack = np.concatenate(crops).astype(cfg.np_dtype)
    owner = np.asarray(owner)
    out = np.zeros((len(stack), cfg.n_classes))
    with ad.no_grad():
        for s in range(0, len(stack), batch_size):
            sl = slice(s, s + batch_size)
            feats = _batch_features(data, owner[sl], cfg)
            out[sl] = forward(params, stack[sl], cfg, feats).logits.values
    logits = np.zeros((len(data), cfg.n_classes))
    np.add.at(logits, owner, out)
    return logits / np.bincount(owner, minlength=len(data))[:, None]


def _epoch(params, opt, cfg: ModelConfig, tcfg: TrainConfig, data: PreparedData, rng) -> float:
    n = len(data)
    order = np.repeat(rng.permutation(n), tcfg.crops_per_recording)
    seg = cfg.input_length
    total, count = 0.0, 0
    plist = list(params.values())
    for s in range(0, len(order), tcfg.batch_size):
        idx = order[s:s + tcfg.batch_size]
        x = np.stack([random_window(data.signals[i], seg, rng) for i in idx]).astype(cfg.np_dtype)
        out = forward(params, x, cfg, _batch_features(data, idx, cfg))
        batch_loss = loss(out.logits, data.targets[idx])
        ad.zero_grads(plist)
        ad.backward(batch_loss)
        opt.step(params)
        total += float(batch_loss.values) * len(idx)
        count += len(idx)
    return total / count


def train(
    tcfg: TrainConfig,
    manifest: DatasetManifest,
    out_dir: str | Path | None = None,
    resume: Checkpoint | str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    train_data: PreparedData | None = None,
    val_data: PreparedData | None = None,
) -> TrainResult:
    """Mini-batch training; one random crop per recording per epoch by default.

    With ``out_dir`` set, writes ``log.jsonl``, ``config.json``, per-epoch
    ``epoch_XXXX.ckpt`` files and ``last.ckpt``. Deterministic for a fixed
    seed; resuming from an epoch checkpoint continues the same trajectory.
    """
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    if tcfg.val_fold is not None:
        train_m, val_m = manifest.subset(exclude=[tcfg.val_fold]), manifest.subset(folds=[tcfg.val_fold])
    else:
        train_m, val_m = manifest, None
    if len(train_m) == 0:
        raise ValueError("no training recordings left after holding out the validation fold")
    dtype = np.dtype(tcfg.model.get("dtype", "float32"))
    if train_data is None:
        train_data = prepare(train_m, tcfg.pipeline, dtype)
    if val_data is None and val_m is not None and len(val_m):
        val_data = prepare(val_m, tcfg.pipeline, dtype)
    n_wide = 0 if train_data.features is None else train_data.features.shape[1]
    if tcfg.wide_features and n_wide == 0:
        raise ValueError("wide_features enabled but recordings carry no feature vectors")

    init_seed, loop_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(tcfg.seed).spawn(2))
    rng = np.random.default_rng(loop_seed)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        cfg = ckpt.model_config
        params = ckpt.diff_params(requires_grad=True)
        opt = Optimizer(params, tcfg.optimizer)
        opt.t = ckpt.optimizer_t
        opt.m = {k: v.copy() for k, v in ckpt.optimizer_m.items()} or opt.m
        opt.v = {k: v.copy() for k, v in ckpt.optimizer_v.items()} or opt.v
        rng.bit_generator.state = ckpt.rng_state
        start, history = ckpt.epoch, list(ckpt.history)
    else:
        cfg = tcfg.model_config(manifest.n_classes, n_wide)
        params = init_params(cfg, init_seed)
        opt = Optimizer(params, tcfg.optimizer)
        start, history = 0, []
    if cfg.n_classes != manifest.n_classes:
        raise ValueError(f"model has {cfg.n_classes} classes, manifest {manifest.n_classes}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(tcfg.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(out / "log.jsonl", "w") as fh:
            for row in history:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            params={k: p.values.copy() for k, p in params.items()},
            model_config=cfg, train_config=tcfg, epoch=epoch,
            rng_state=rng.bit_generator.state, optimizer_t=opt.t,
            optimizer_m={k: v.copy() for k, v in opt.m.items()},
            optimizer_v={k: v.copy() for k, v in opt.v.items()},
            history=list(history), class_names=list(manifest.class_names),
        )

    ckpt = snapshot(start)
    for epoch in range(start + 1, tcfg.epochs + 1):
        train_loss = _epoch(params, opt, cfg, tcfg, train_data, rng)
        row = {"epoch": epoch, "train_loss": train_loss}
        if val_data is not None:
            logits = predict_logits(params, cfg, val_data)
            with ad.no_grad():
                row["val_loss"] = float(loss(DiffArray(logits), val_data.targets).values)
            rep = evaluate_predictions(sigmoid(logits), val_data.label_sets, manifest.class_names,
                                       thresholds=tcfg.threshold)
            row["val_macro_auc"] = rep.macro_auc
            row["val_macro_fbeta"] = rep.macro_fbeta
        history.append(row)
        log.info("epoch %d: %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row)
        ckpt = snapshot(epoch)
        if out is not None:
            with open(out / "log.jsonl", "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            if epoch % tcfg.checkpoint_every == 0:
                save_checkpoint(ckpt, out / f"epoch_{epoch:04d}.ckpt")
            save_checkpoint(ckpt, out / "last.ckpt")
        if tcfg.stop_at_loss is not None and train_loss < tcfg.stop_at_loss:
            break
    return TrainResult(params, cfg, history, ckpt)


# -------------------------------------------------------------------- evaluate


@dataclass
class Evaluation:
    report: EvalReport
    ids: list[str]
    scores: np.ndarray  # sigmoid probabilities [n, N]


def evaluate(
    checkpoint: Checkpoint | str | Path,
    manifest: DatasetManifest,
    weights: np.ndarray | None = None,
    thresholds=0.5,
    data: PreparedData | None = None,
    pipeline: PipelineConfig | None = None,
) -> Evaluation:
    """Preprocess, run the model over every recording and score it."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    cfg = ckpt.model_config
    if cfg.n_classes != manifest.n_classes:
        raise ValueError(f"checkpoint has {cfg.n_classes} classes, manifest has {manifest.n_classes}")
    if len(manifest) == 0:
        raise ValueError("evaluation fold is empty")
    if pipeline is None:
        pipeline = ckpt.train_config.pipeline if ckpt.train_config is not None else PipelineConfig()
    if data is None:
        data = prepare(manifest, pipeline, cfg.np_dtype)
    logits = predict_logits(ckpt.diff_params(), cfg, data)
    scores = sigmoid(logits)
    report = evaluate_predictions(scores, data.label_sets, manifest.class_names, weights, thresholds)
    return Evaluation(report, data.ids, scores)

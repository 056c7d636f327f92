"""ECG recordings: container I/O, preprocessing, segmenting, synthesis, folds.

Recording container
-------------------
``<id>.json`` holds ``{id, fs, leads, n_samples, labels, dtype: "f32le"}``
(plus optional ``meta`` and ``features``); ``<id>.f32`` next to it holds the
samples as little-endian float32, lead-major.

Manifest is JSON-lines, one ``{path, labels, fold}`` per line, with paths
relative to the manifest's directory. The class list is plain text, one
name per line; line order defines the label index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.signal import firwin, oaconvolve

from .autodiff.engine import InputTooShortError

HEADER_DTYPE = "f32le"
PAYLOAD_SUFFIX = ".f32"


class RecordingFormatError(ValueError):
    """Header and payload of a stored recording disagree, or data is invalid."""


@dataclass
class Recording:
    signal: np.ndarray  # [leads, samples]
    fs: float
    labels: tuple[int, ...] = ()
    id: str = ""
    source_meta: dict = field(default_factory=dict)
    features: np.ndarray | None = None

    def __post_init__(self):
        self.signal = np.asarray(self.signal)
        if not np.issubdtype(self.signal.dtype, np.floating):
            self.signal = self.signal.astype(np.float64)
        if self.signal.ndim != 2 or self.signal.shape[0] < 1 or self.signal.shape[1] < 1:
            raise RecordingFormatError(f"signal must be [leads>=1, samples>=1], got {self.signal.shape}")
        if not self.fs > 0:
            raise RecordingFormatError(f"sampling rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(self.signal)):
            raise RecordingFormatError(f"recording {self.id!r} contains non-finite samples")
        self.labels = tuple(sorted({int(i) for i in self.labels}))
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)

    @property
    def n_leads(self) -> int:
        return self.signal.shape[0]

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs


@dataclass
class PipelineConfig:
    target_fs: float = 500.0
    segment_seconds: float = 15.0
    bandpass_low: float = 0.5
    bandpass_high: float = 40.0
    fir_taps: int = 1501
    normalize: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.bandpass_low < self.bandpass_high < self.target_fs / 2:
            raise ValueError(
                f"need 0 < low ({self.bandpass_low}) < high ({self.bandpass_high}) < fs/2 ({self.target_fs / 2})"
            )
        if self.fir_taps < 3 or self.fir_taps % 2 == 0:
            raise ValueError(f"fir_taps must be odd and >= 3, got {self.fir_taps}")
        if not self.segment_seconds > 0:
            raise ValueError("segment_seconds must be positive")

    @property
    def segment_samples(self) -> int:
        return int(round(self.segment_seconds * self.target_fs))

    def to_dict(self) -> dict:
        return dict(
            target_fs=self.target_fs,
            segment_seconds=self.segment_seconds,
            bandpass_low=self.bandpass_low,
            bandpass_high=self.bandpass_high,
            fir_taps=self.fir_taps,
            normalize=self.normalize,
        )


# ---------------------------------------------------------------- container io


def write_recording(rec: Recording, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header_path = directory / f"{rec.id}.json"
    header = {
        "id": rec.id,
        "fs": float(rec.fs),
        "leads": rec.n_leads,
        "n_samples": rec.n_samples,
        "labels": list(rec.labels),
        "dtype": HEADER_DTYPE,
    }
    if rec.source_meta:
        header["meta"] = rec.source_meta
    if rec.features is not None:
        header["features"] = [float(v) for v in rec.features]
    header_path.write_text(json.dumps(header, sort_keys=True) + "\n")
    rec.signal.astype("<f4").tofile(header_path.with_suffix(PAYLOAD_SUFFIX))
    return header_path


def load_recording(path: str | Path) -> Recording:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    if not path.exists():
        raise FileNotFoundError(f"recording header {path} not found")
    header = json.loads(path.read_text())
    if header.get("dtype", HEADER_DTYPE) != HEADER_DTYPE:
        raise RecordingFormatError(f"unsupported dtype {header['dtype']!r}")
    payload = path.with_suffix(PAYLOAD_SUFFIX)
    if not payload.exists():
        raise FileNotFoundError(f"recording payload {payload} not found")
    leads, n = int(header["leads"]), int(header["n_samples"])
    data = np.fromfile(payload, dtype="<f4")
    if data.size != leads * n:
        raise RecordingFormatError(
            f"{path.name}: header declares {leads}x{n}={leads * n} samples, payload holds {data.size}"
        )
    return Recording(
        signal=data.reshape(leads, n).astype(np.float32),
        fs=float(header["fs"]),
        labels=tuple(header.get("labels", ())),
        id=str(header.get("id", path.stem)),
        source_meta=dict(header.get("meta", {})),
        features=header.get("features"),
    )


# -------------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    path: str
    labels: tuple[int, ...]
    fold: int = 0

    @property
    def id(self) -> str:
        return Path(self.path).stem


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    root: Path = Path(".")

    def __post_init__(self):
        n = len(self.class_names)
        for e in self.entries:
            e.labels = tuple(sorted({int(i) for i in e.labels}))
            if any(i < 0 or i >= n for i in e.labels):
                raise ValueError(f"{e.path}: label index out of range for {n} classes")
            if e.fold < 0:
                raise ValueError(f"{e.path}: negative fold index {e.fold}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_folds(self) -> int:
        return 1 + max((e.fold for e in self.entries), default=-1)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def subset(self, folds: Sequence[int] | None = None, exclude: Sequence[int] | None = None) -> "DatasetManifest":
        keep = [
            e for e in self.entries
            if (folds is None or e.fold in folds) and (exclude is None or e.fold not in exclude)
        ]
        return DatasetManifest(keep, list(self.class_names), self.root)

    def find(self, recording_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == recording_id:
                return e
        raise KeyError(f"recording {recording_id!r} not in manifest")

    def multi_hot(self) -> np.ndarray:
        y = np.zeros((len(self.entries), self.n_classes))
        for r, e in enumerate(self.entries):
            y[r, list(e.labels)] = 1.0
        return y


def read_class_list(path: str | Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def write_class_list(names: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names))


def classes_path_for(manifest_path: str | Path) -> Path:
    return Path(manifest_path).parent / "classes.txt"


def read_manifest(path: str | Path, classes: str | Path | Sequence[str] | None = None) -> DatasetManifest:
    """Read a JSON-lines manifest; the class list defaults to ``classes.txt`` beside it."""
    path = Path(path)
    if classes is None:
        classes = classes_path_for(path)
    names = read_class_list(classes) if isinstance(classes, (str, Path)) else list(classes)
    entries = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        entries.append(ManifestEntry(row["path"], tuple(row.get("labels", ())), int(row.get("fold", 0))))
    return DatasetManifest(entries, names, path.parent)


def write_manifest(manifest: DatasetManifest, path: str | Path, write_classes: bool = True) -> None:
    path = Path(path)
    lines = [
        json.dumps({"path": e.path, "labels": list(e.labels), "fold": e.fold}, sort_keys=True)
        for e in manifest.entries
    ]
    path.write_text("".join(line + "\n" for line in lines))
    if write_classes:
        write_class_list(manifest.class_names, classes_path_for(path))


def split_folds(manifest: DatasetManifest, n_folds: int, seed: int) -> DatasetManifest:
    """Assign folds, stratified by label set, deterministic per seed.

    Entries are grouped by their exact label set, each group is shuffled and
    the groups are dealt round-robin across folds with one running counter,
    so fold sizes differ by at most one.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    if len(manifest) < n_folds:
        raise ValueError(f"{len(manifest)} recordings cannot fill {n_folds} folds")
    rng = np.random.default_rng(seed)
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, e in enumerate(manifest.entries):
        groups.setdefault(e.labels, []).append(i)
    folds = np.zeros(len(manifest), dtype=int)
    counter = int(rng.integers(n_folds))
    for key in sorted(groups, key=lambda k: (len(k), k)):
        idx = np.asarray(groups[key])
        for i in idx[rng.permutation(len(idx))]:
            folds[i] = counter % n_folds
            counter += 1
    entries = [replace(e, fold=int(f)) for e, f in zip(manifest.entries, folds)]
    return DatasetManifest(entries, list(manifest.class_names), manifest.root)


# --------------------------------------------------------------- preprocessing


def resample_linear(rec: Recording, target_fs: float) -> Recording:
    """Linear interpolation per lead; samples past the last input hold its value."""
    if not target_fs > 0:
        raise ValueError("target_fs must be positive")
    if target_fs == rec.fs:
        return replace(rec, signal=rec.signal.copy())
    n_out = int(round(rec.n_samples * target_fs / rec.fs))
    n_out = max(n_out, 1)
    pos = np.arange(n_out) * (rec.fs / target_fs)
    src = np.arange(rec.n_samples)
    out = np.stack([np.interp(pos, src, lead) for lead in rec.signal]).astype(rec.signal.dtype)
    return replace(rec, signal=out, fs=float(target_fs))


def design_bandpass(fs: float, low: float, high: float, taps: int) -> np.ndarray:
    """Hamming-windowed sinc bandpass, unit gain at the band centre."""
    return firwin(taps, [low, high], pass_zero=False, window="hamming", fs=fs)


def _causal_fir(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    return oaconvolve(x, h[None, :], axes=-1)[:, : x.shape[-1]]


def fir_bandpass(rec: Recording, cfg: PipelineConfig) -> Recording:
    """Zero-phase FIR bandpass: filter, reverse, filter, reverse.

    Edges are handled by reflect-padding ``taps - 1`` samples on each side
    and trimming them afterwards, so the output length equals the input length.
    """
    cfg.validate()
    if rec.n_samples < cfg.fir_taps:
        raise InputTooShortError(f"recording has {rec.n_samples} samples, filter needs >= {cfg.fir_taps}")
    if cfg.bandpass_high >= rec.fs / 2:
        raise ValueError(f"bandpass high edge {cfg.bandpass_high} Hz is not below Nyquist of {rec.fs} Hz")
    h = design_bandpass(rec.fs, cfg.bandpass_low, cfg.bandpass_high, cfg.fir_taps)
    pad = cfg.fir_taps - 1
    x = np.pad(rec.signal.astype(np.float64), ((0, 0), (pad, pad)), mode="reflect")
    y = _causal_fir(h, x)[:, ::-1]
    y = _causal_fir(h, y)[:, ::-1]
    y = y[:, pad: pad + rec.n_samples]
    return replace(rec, signal=np.ascontiguousarray(y, dtype=rec.signal.dtype))


def zscore_normalize(rec: Recording, floor: float = 1e-8) -> Recording:
    x = rec.signal.astype(np.float64)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    out = (x - mu) / np.maximum(sd, floor)
    out[sd[:, 0] < floor] = 0.0
    return replace(rec, signal=out.astype(rec.signal.dtype))


def preprocess(rec: Recording, cfg: PipelineConfig) -> Recording:
    """Resample to ``cfg.target_fs``, bandpass, then per-lead z-score."""
    out = resample_linear(rec, cfg.target_fs)
    out = fir_bandpass(out, cfg)
    if cfg.normalize:
        out = zscore_normalize(out)
    return out


def random_window(signal: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` samples from a uniformly random start; zero-padded at the end if short."""
    L = signal.shape[-1]
    if L > n:
        start = int(rng.integers(0, L - n + 1))
        return signal[:, start:start + n].copy()
    out = np.zeros((signal.shape[0], n), dtype=signal.dtype)
    out[:, :L] = signal
    return out


def crop_or_pad(rec: Recording, seconds: float, rng: np.random.Generator) -> Recording:
    """A random window of ``round(seconds*fs)`` samples, zero-padded at the end if short."""
    if not seconds > 0:
        raise ValueError("segment length must be positive")
    return replace(rec, signal=random_window(rec.signal, int(round(seconds * rec.fs)), rng))


def evenly_spaced_crops(signal: np.ndarray, n: int) -> np.ndarray:
    """``ceil(L/n)`` windows of length ``n`` spread over the signal -> [k, leads, n]."""
    L = signal.shape[-1]
    if L <= n:
        out = np.zeros((1, signal.shape[0], n), dtype=signal.dtype)
        out[0, :, :L] = signal
        return out
    k = math.ceil(L / n)
    starts = np.round(np.linspace(0, L - n, k)).astype(int)
    return np.stack([signal[:, s:s + n] for s in starts])


# ------------------------------------------------------------------- synthesis

# (offset from R in seconds, amplitude in mV, gaussian width in seconds)
BASE_WAVES: dict[str, tuple[float, float, float]] = {
    "P": (-0.20, 0.12, 0.025),
    "Q": (-0.04, -0.12, 0.010),
    "R": (0.00, 1.00, 0.012),
    "S": (0.04, -0.25, 0.012),
    "T": (0.28, 0.30, 0.045),
}


def lead_gains(leads: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed per-lead scale for the whole beat and an extra T-wave scale."""
    ramp = np.linspace(0.0, 1.0, leads) if leads > 1 else np.zeros(1)
    return 0.6 + 0.8 * ramp, 1.4 - 0.8 * ramp


@dataclass
class SyntheticSpec:
    n_recordings: int = 100
    leads: int = 12
    duration: float = 10.0
    fs: float = 500.0
    heart_rate: tuple[float, float] = (50.0, 100.0)
    noise_std: float = 0.05
    amplitude_jitter: float = 0.1
    class_names: list[str] = field(default_factory=lambda: ["normal", "high_potassium"])
    # per class: {wave: {"amplitude": x, "width": y}}
    class_morphologies: list[dict] = field(
        default_factory=lambda: [{}, {"T": {"amplitude": 2.0, "width": 0.6}}]
    )
    rng_seed: int = 0

    def __post_init__(self):
        self.heart_rate = tuple(self.heart_rate)
        if len(self.class_morphologies) != len(self.class_names):
            raise ValueError("need one morphology entry per class")
        if self.n_recordings < 1 or self.leads < 1 or self.duration <= 0 or self.fs <= 0:
            raise ValueError("n_recordings, leads, duration and fs must be positive")
        lo, hi = self.heart_rate
        if not 0 < lo <= hi:
            raise ValueError(f"bad heart-rate range {self.heart_rate}")
        for m in self.class_morphologies:
            unknown = set(m) - set(BASE_WAVES)
            if unknown:
                raise ValueError(f"unknown wavelets {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return dict(
            n_recordings=self.n_recordings, leads=self.leads, duration=self.duration, fs=self.fs,
            heart_rate=list(self.heart_rate), noise_std=self.noise_std,
            amplitude_jitter=self.amplitude_jitter, class_names=list(self.class_names),
            class_morphologies=self.class_morphologies, rng_seed=self.rng_seed,
        )


def beat_waves(morphology: Mapping) -> dict[str, tuple[float, float, float]]:
    waves = {}
    for name, (offset, amp, width) in BASE_WAVES.items():
        over = morphology.get(name, {})
        waves[name] = (offset, amp * over.get("amplitude", 1.0), width * over.get("width", 1.0))
    return waves


def synth_one(spec: SyntheticSpec, label: int, rng: np.random.Generator, rid: str) -> Recording:
    n = int(round(spec.duration * spec.fs))
    t = np.arange(n) / spec.fs
    hr = rng.uniform(*spec.heart_rate)
    rr = 60.0 / hr
    # first R peak on the sample grid, away from the very first sample
    t0 = round(rng.uniform(0.3, 0.7) * rr * spec.fs) / spec.fs
    scale_amp = 1.0 + spec.amplitude_jitter * rng.standard_normal()
    waves = beat_waves(spec.class_morphologies[label])
    beats = t0 + rr * np.arange(-2, int(np.ceil(spec.duration / rr)) + 2)
    beat_gain, t_gain = lead_gains(spec.leads)

    body = np.zeros(n)
    twave = np.zeros(n)
    for name, (offset, amp, width) in waves.items():
        centre = beats[:, None] + offset
        g = np.exp(-0.5 * ((t[None, :] - centre) / width) ** 2).sum(axis=0)
        if name == "T":
            twave += amp * g
        else:
            body += amp * g
    sig = scale_amp * beat_gain[:, None] * (body[None, :] + t_gain[:, None] * twave[None, :])
    if spec.noise_std > 0:
        sig = sig + spec.noise_std * rng.standard_normal(sig.shape)
    meta = {"heart_rate": float(hr), "first_r": float(t0)}
    return Recording(sig.astype(np.float32), spec.fs, (label,), rid, meta)


def synth_generate(spec: SyntheticSpec) -> list[Recording]:
    """Deterministic synthetic ECGs: five gaussian wavelets per beat plus white noise."""
    seeds = np.random.SeedSequence(spec.rng_seed).spawn(spec.n_recordings + 1)
    master = np.random.default_rng(seeds[0])
    n_classes = len(spec.class_names)
    labels = master.permutation(np.arange(spec.n_recordings) % n_classes)
    return [
        synth_one(spec, int(labels[i]), np.random.default_rng(seeds[i + 1]), f"syn{i:05d}")
        for i in range(spec.n_recordings)
    ]


def write_dataset(recordings: Sequence[Recording], class_names: Sequence[str], out_dir: str | Path) -> Path:
    """Write recordings under ``out_dir/records`` plus ``manifest.jsonl`` and ``classes.txt``."""
    out_dir = Path(out_dir)
    rec_dir = out_dir / "records"
    entries = []
    for rec in recordings:
        header = write_recording(rec, rec_dir)
        entries.append(ManifestEntry(str(header.relative_to(out_dir)), rec.labels, 0))
    manifest = DatasetManifest(entries, list(class_names), out_dir)
    path = out_dir / "manifest.jsonl"
    write_manifest(manifest, path)
    return path

"""Dataset ingestion, frame sampling and pluggable frozen encoders.

Raw media decoding is not handled here: records carry pre-decoded per-frame
feature vectors (inline or as SMFT binary files) plus the utterance text.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

MODALITIES = ("text", "audio", "vision")
SPLITS = ("train", "valid", "test")
ENCODER_KINDS = ("synthetic_gaussian", "synthetic_label_correlated", "external_adapter")
TASK_KINDS = ("regression", "classification", "detection")

SMFT_MAGIC = b"SMFT"
MANIFEST_VERSION = "semanticmac-manifest/1"

# A label is a sentiment score, a single class name, or a set of class names.
TaskLabel = Union[float, str, Tuple[str, ...]]


class ManifestError(ValueError):
    pass


class EncoderError(ValueError):
    pass


@dataclass(eq=False)
class UtteranceSample:
    sample_id: str
    text: str
    audio_frames: np.ndarray
    vision_frames: np.ndarray
    label: TaskLabel
    split: str = "train"
    duration_s: float = 0.0
    dialogue_id: Optional[str] = None
    turn_index: Optional[int] = None
    audio_times: Optional[np.ndarray] = None
    vision_times: Optional[np.ndarray] = None

    def frames(self, modality: str) -> np.ndarray:
        if modality == "audio":
            return self.audio_frames
        if modality == "vision":
            return self.vision_frames
        raise ValueError(f"modality {modality!r} has no frames")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, UtteranceSample):
            return NotImplemented
        scalars = ("sample_id", "text", "label", "split", "duration_s", "dialogue_id", "turn_index")
        if any(getattr(self, k) != getattr(other, k) for k in scalars):
            return False
        for name in ("audio_frames", "vision_frames", "audio_times", "vision_times"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or not np.array_equal(a, b)):
                return False
        return True


@dataclass
class ModalityEmbeddings:
    modality: str
    tokens: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise EncoderError(f"{self.modality} tokens must be a matrix, got shape {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise EncoderError(f"{self.modality} tokens contain NaN/Inf")

    @property
    def frame_count(self) -> int:
        return int(self.tokens.shape[0])


@dataclass
class EncoderSpec:
    modality: str
    output_dim: int
    kind: str = "synthetic_gaussian"
    frozen: bool = True
    seed: int = 0
    adapter: Optional[str] = None
    # synthetic_label_correlated knobs
    signal_scale: float = 1.0
    noise_std: float = 0.1
    # text only: fixed token budget, padded with a mask (like max_length padding)
    max_tokens: int = 16

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise EncoderError(f"unknown modality {self.modality!r}")
        if self.kind not in ENCODER_KINDS:
            raise EncoderError(f"unknown encoder kind {self.kind!r}")
        if self.modality in ("audio", "vision") and not self.frozen:
            raise EncoderError("audio/vision encoders are frozen")
        if self.output_dim < 1:
            raise EncoderError("output_dim must be positive")


@dataclass(eq=False)
class DatasetManifest:
    records: List[UtteranceSample]
    task_kind: str = "regression"
    class_names: Optional[List[str]] = None
    multilabel: bool = False
    version: str = MANIFEST_VERSION

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ManifestError(f"unknown task_kind {self.task_kind!r}")
        seen = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {rec.sample_id!r}")
            seen.add(rec.sample_id)

    def split(self, name: str) -> List[UtteranceSample]:
        return [r for r in self.records if r.split == name]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (
            self.task_kind == other.task_kind
            and self.class_names == other.class_names
            and self.multilabel == other.multilabel
            and self.version == other.version
            and len(self.records) == len(other.records)
            and all(a == b for a, b in zip(self.records, other.records))
        )


# ---------------------------------------------------------------------------
# frame sampling


def sample_frames(duration_s: float, rate_hz: float, source_frame_times: Sequence[float]) -> List[int]:
    """Pick the source frames nearest to a uniform ``rate_hz`` grid over the clip.

    Ties between two equally near frames go to the earlier one; repeated
    picks are dropped while keeping order.
    """
    times = [float(t) for t in source_frame_times]
    if not times:
        raise ValueError("no frames")
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("source_frame_times must be sorted ascending")

    if duration_s <= 0:
        grid = [0.0]
    else:
        count = math.floor(duration_s * rate_hz + 1e-9) + 1
        grid = [k / rate_hz for k in range(count)]

    picked: List[int] = []
    seen = set()
    for t in grid:
        idx = _nearest(times, t)
        if idx not in seen:
            seen.add(idx)
            picked.append(idx)
    return picked


def _nearest(times: List[float], t: float) -> int:
    hi = bisect.bisect_left(times, t)
    if hi == 0:
        best = 0
    elif hi == len(times):
        best = len(times) - 1
    else:
        lo = hi - 1
        # earlier frame wins ties
        best = lo if t - times[lo] <= times[hi] - t + 1e-12 else hi
    # duplicated timestamps: the first copy
    return bisect.bisect_left(times, times[best])


def resample_uniform(num_frames: int, target: int) -> np.ndarray:
    """Evenly spaced indices into ``num_frames`` frames; repeats when upsampling."""
    if num_frames < 1 or target < 1:
        raise ValueError("need at least one frame and a positive target")
    return np.round(np.linspace(0, num_frames - 1, target)).astype(np.int64)


def prepare_frames(
    frames: np.ndarray,
    times: Optional[np.ndarray] = None,
    duration_s: float = 0.0,
    rate_hz: float = 2.0,
    max_frames: int = 256,
    fixed_frames: Optional[int] = None,
) -> np.ndarray:
    """Apply grid sampling (when timestamps exist), the frame cap, and the optional fixed-length arm."""
    if len(frames) == 0:
        raise ValueError("no frames")
    if times is not None:
        frames = frames[sample_frames(duration_s, rate_hz, times)]
    if fixed_frames is not None:
        return frames[resample_uniform(len(frames), fixed_frames)]
    if len(frames) > max_frames:
        frames = frames[resample_uniform(len(frames), max_frames)]
    return frames


# ---------------------------------------------------------------------------
# encoders

_ADAPTERS: Dict[str, Callable[[UtteranceSample, EncoderSpec], np.ndarray]] = {}


def register_adapter(name: str, fn: Callable[[UtteranceSample, EncoderSpec], np.ndarray]) -> None:
    _ADAPTERS[name] = fn


def unregister_adapter(name: str) -> None:
    _ADAPTERS.pop(name, None)


def _passthrough(sample: UtteranceSample, spec: EncoderSpec) -> np.ndarray:
    return sample.frames(spec.modality)


register_adapter("passthrough", _passthrough)


def seeded_rng(*key: object) -> np.random.Generator:
    """Process-independent RNG keyed on arbitrary values (Python's hash() is salted)."""
    digest = hashlib.blake2b(repr(key).encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def label_mean(
    label: TaskLabel,
    modality: str,
    dim: int,
    seed: int,
    class_names: Optional[Sequence[str]] = None,
    scale: float = 1.0,
) -> np.ndarray:
    """Label-dependent mean vector; scores +y and -y map to antipodal means."""
    if isinstance(label, (int, float)) and not isinstance(label, bool):
        direction = seeded_rng("direction", modality, seed).standard_normal(dim)
        return scale * (float(label) / 3.0) * direction
    names = (label,) if isinstance(label, str) else tuple(label)
    mean = np.zeros(dim)
    for name in names:
        key = class_names.index(name) if class_names and name in class_names else name
        mean += seeded_rng("class", modality, seed, key).standard_normal(dim)
    return scale * mean


def _text_tokens(text: str, max_tokens: int) -> List[str]:
    return (["[CLS]"] + text.lower().split())[:max_tokens]


def _encode_text(sample: UtteranceSample, spec: EncoderSpec, class_names) -> ModalityEmbeddings:
    words = _text_tokens(sample.text, spec.max_tokens)
    tokens = np.zeros((spec.max_tokens, spec.output_dim), dtype=np.float32)
    mask = np.zeros(spec.max_tokens, dtype=bool)
    mask[: len(words)] = True
    if spec.kind == "synthetic_gaussian":
        for i, w in enumerate(words):
            tokens[i] = seeded_rng("word", spec.seed, w).standard_normal(spec.output_dim)
    elif spec.kind == "synthetic_label_correlated":
        mu = label_mean(sample.label, "text", spec.output_dim, spec.seed, class_names, spec.signal_scale)
        noise = seeded_rng("text", spec.seed, sample.sample_id).standard_normal((len(words), spec.output_dim))
        tokens[: len(words)] = mu + spec.noise_std * noise
    else:
        out = _run_adapter(sample, spec)
        n = min(len(out), spec.max_tokens)
        tokens[:n] = out[:n]
        mask[:] = False
        mask[:n] = True
    return ModalityEmbeddings("text", tokens, mask)


def _run_adapter(sample: UtteranceSample, spec: EncoderSpec) -> np.ndarray:
    if spec.adapter is None or spec.adapter not in _ADAPTERS:
        raise EncoderError(f"adapter {spec.adapter!r} is not registered")
    out = np.asarray(_ADAPTERS[spec.adapter](sample, spec), dtype=np.float32)
    if out.ndim != 2 or out.shape[1] != spec.output_dim:
        raise EncoderError(
            f"adapter {spec.adapter!r} returned shape {out.shape} for {spec.modality}, "
            f"expected (*, {spec.output_dim})"
        )
    return out


def encode_modality(
    sample: UtteranceSample,
    spec: EncoderSpec,
    class_names: Optional[Sequence[str]] = None,
) -> ModalityEmbeddings:
    """Produce the token matrix for one modality of one sample.

    Audio/vision row counts follow the sample's (already sampled) frames.
    Text is padded to ``spec.max_tokens`` rows and comes with a validity mask.
    """
    if spec.modality == "text":
        return _encode_text(sample, spec, class_names)

    frames = sample.frames(spec.modality)
    if len(frames) == 0:
        raise EncoderError(f"sample {sample.sample_id!r} has no {spec.modality} frames")
    f = len(frames)
    if spec.kind == "synthetic_gaussian":
        rng = seeded_rng("gaussian", spec.modality, spec.seed, sample.sample_id)
        tokens = rng.standard_normal((f, spec.output_dim))
    elif spec.kind == "synthetic_label_correlated":
        mu = label_mean(sample.label, spec.modality, spec.output_dim, spec.seed, class_names, spec.signal_scale)
        noise = seeded_rng("noise", spec.modality, spec.seed, sample.sample_id).standard_normal((f, spec.output_dim))
        tokens = mu + spec.noise_std * noise
    else:
        tokens = _run_adapter(sample, spec)
    return ModalityEmbeddings(spec.modality, np.asarray(tokens, dtype=np.float32))


# ---------------------------------------------------------------------------
# SMFT binary matrices


def write_smft(path: Union[str, Path], matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError("SMFT stores 2-D matrices only")
    with open(path, "wb") as fh:
        fh.write(SMFT_MAGIC)
        fh.write(struct.pack("<II", *matrix.shape))
        fh.write(matrix.tobytes())


def read_smft(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != SMFT_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    rows, cols = struct.unpack("<II", data[4:12])
    body = np.frombuffer(data, dtype="<f4", offset=12)
    if body.size != rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} floats, found {body.size}")
    return body.reshape(rows, cols).astype(np.float32)


# ---------------------------------------------------------------------------
# manifest I/O


def _label_to_json(label: TaskLabel):
    return list(label) if isinstance(label, tuple) else label


def _label_from_json(value, where: str) -> TaskLabel:
    if isinstance(value, bool):
        raise ManifestError(f"{where}: field 'label' must be a number, class name or list of class names")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        return value
    if isinstance(value, list) and all(isinstance(v, str) for v in value):
        return tuple(value)
    raise ManifestError(f"{where}: field 'label' must be a number, class name or list of class names")


def _frames_from_json(value, base: Path, where: str, name: str) -> np.ndarray:
    if isinstance(value, dict) and "path" in value:
        try:
            return read_smft(base / value["path"])
        except (OSError, ValueError) as exc:
            raise ManifestError(f"{where}: field {name!r}: {exc}") from exc
    try:
        arr = np.asarray(value, dtype=np.float32)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{where}: field {name!r} is not a numeric matrix") from exc
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ManifestError(f"{where}: field {name!r} must be a non-empty list of equal-length vectors")
    return arr


def _record_from_json(obj: dict, base: Path, line_no: int) -> UtteranceSample:
    sid = obj.get("sample_id")
    where = f"record {line_no} ({sid!r})"
    if not isinstance(sid, str) or not sid:
        raise ManifestError(f"{where}: field 'sample_id' must be a non-empty string")
    for key in ("text", "audio_frames", "vision_frames", "label"):
        if key not in obj:
            raise ManifestError(f"{where}: missing field {key!r}")
    if not isinstance(obj["text"], str):
        raise ManifestError(f"{where}: field 'text' must be a string")
    split = obj.get("split", "train")
    if split not in SPLITS:
        raise ManifestError(f"{where}: field 'split' must be one of {SPLITS}")
    duration = obj.get("duration_s", 0.0)
    if not isinstance(duration, (int, float)) or duration < 0:
        raise ManifestError(f"{where}: field 'duration_s' must be a non-negative number")
    times = {}
    for name in ("audio_times", "vision_times"):
        if obj.get(name) is not None:
            times[name] = np.asarray(obj[name], dtype=np.float64)
    return UtteranceSample(
        sample_id=sid,
        text=obj["text"],
        audio_frames=_frames_from_json(obj["audio_frames"], base, where, "audio_frames"),
        vision_frames=_frames_from_json(obj["vision_frames"], base, where, "vision_frames"),
        label=_label_from_json(obj["label"], where),
        split=split,
        duration_s=float(duration),
        dialogue_id=obj.get("dialogue_id"),
        turn_index=obj.get("turn_index"),
        **times,
    )


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Read a JSON-lines manifest: one header line, then one record per line."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    base = path.parent
    header = None
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"record {line_no}: invalid JSON ({exc})") from exc
            if header is None and "manifest" in obj:
                header = obj["manifest"]
                continue
            records.append(_record_from_json(obj, base, line_no))
    header = header or {}
    return DatasetManifest(
        records=records,
        task_kind=header.get("task_kind", "regression"),
        class_names=header.get("class_names"),
        multilabel=header.get("multilabel", False),
        version=header.get("version", MANIFEST_VERSION),
    )


def save_manifest(manifest: DatasetManifest, path: Union[str, Path], external: bool = False) -> Path:
    """Write ``manifest``; with ``external`` frame matrices go to SMFT files beside it."""
    path = Path(path)
    if path.suffix != ".jsonl":
        path.mkdir(parents=True, exist_ok=True)
        path = path / "manifest.jsonl"
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    if external:
        (path.parent / "features").mkdir(exist_ok=True)
    header = {
        "manifest": {
            "task_kind": manifest.task_kind,
            "class_names": manifest.class_names,
            "multilabel": manifest.multilabel,
            "version": manifest.version,
        }
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i, rec in enumerate(manifest.records):
            obj = {"sample_id": rec.sample_id, "text": rec.text}
            for name in ("audio_frames", "vision_frames"):
                arr = getattr(rec, name)
                if external:
                    rel = f"features/{i:06d}_{name.split('_')[0]}.smft"
                    write_smft(path.parent / rel, arr)
                    obj[name] = {"path": rel}
                else:
                    obj[name] = arr.tolist()
            obj.update(
                label=_label_to_json(rec.label),
                split=rec.split,
                duration_s=rec.duration_s,
                dialogue_id=rec.dialogue_id,
                turn_index=rec.turn_index,
            )
            for name in ("audio_times", "vision_times"):
                if getattr(rec, name) is not None:
                    obj[name] = getattr(rec, name).tolist()
            fh.write(json.dumps(obj) + "\n")
    return path


# ---------------------------------------------------------------------------
# synthetic data

_SENTIMENT_WORDS = [f"senti{k:+d}" for k in range(-6, 7)]
_FILLER_WORDS = ["the", "movie", "was", "really", "i", "think", "it", "and", "so", "just", "a", "plot"]


@dataclass
class SyntheticConfig:
    samples: int = 200
    task_kind: str = "regression"
    seed: int = 0
    frame_range: Tuple[int, int] = (3, 40)
    audio_dim: int = 16
    vision_dim: int = 16
    class_names: Optional[List[str]] = None
    multilabel: bool = False
    # how strongly each modality carries the label (0 = pure noise)
    signal: Dict[str, float] = field(default_factory=lambda: {"text": 1.0, "audio": 1.0, "vision": 1.0})
    noise_std: float = 0.3
    split_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    # every sample is a training sample when False (overfit experiments)
    use_splits: bool = True


def _draw_label(rng: np.random.Generator, cfg: SyntheticConfig, names: List[str]) -> TaskLabel:
    if cfg.task_kind == "regression":
        y = 0.0
        while y == 0.0:
            y = float(np.round(rng.uniform(-3.0, 3.0), 2))
        return y
    if cfg.multilabel:
        k = int(rng.integers(1, min(3, len(names)) + 1))
        picked = sorted(rng.choice(len(names), size=k, replace=False).tolist())
        return tuple(names[i] for i in picked)
    return names[int(rng.integers(len(names)))]


def _synthetic_text(rng: np.random.Generator, label: TaskLabel, strength: float, names: List[str]) -> str:
    fillers = [str(w) for w in rng.choice(_FILLER_WORDS, size=int(rng.integers(2, 6)))]
    if strength <= 0:
        cue = [_SENTIMENT_WORDS[int(rng.integers(len(_SENTIMENT_WORDS)))]]
    elif isinstance(label, float):
        cue = [_SENTIMENT_WORDS[int(np.clip(np.round(label * 2), -6, 6)) + 6]]
    else:
        cue = [f"emo_{x.lower()}" for x in ((label,) if isinstance(label, str) else label)]
    words = fillers[:1] + cue + fillers[1:]
    return " ".join(words)


def synthesize_dataset(config: Optional[SyntheticConfig] = None, **overrides) -> DatasetManifest:
    """Generate a label-correlated synthetic manifest with variable frame counts."""
    cfg = config or SyntheticConfig()
    if overrides:
        cfg = SyntheticConfig(**{**cfg.__dict__, **overrides})
    if cfg.task_kind not in TASK_KINDS:
        raise ManifestError(f"unknown task_kind {cfg.task_kind!r}")
    lo, hi = cfg.frame_range
    if not 1 <= lo <= hi:
        raise ValueError("frame_range must satisfy 1 <= lo <= hi")
    names: List[str] = []
    if cfg.task_kind == "classification":
        names = list(cfg.class_names or ["happy", "sad", "angry", "surprise", "disgust", "fear"])
    elif cfg.task_kind == "detection":
        names = list(cfg.class_names or ["negative", "positive"])

    rng = np.random.default_rng(cfg.seed)
    dims = {"audio": cfg.audio_dim, "vision": cfg.vision_dim}
    n_train = int(round(cfg.split_fractions[0] * cfg.samples))
    n_valid = int(round(cfg.split_fractions[1] * cfg.samples))
    records = []
    for i in range(cfg.samples):
        label = _draw_label(rng, cfg, names)
        if not cfg.use_splits:
            split = "train"
        else:
            split = "train" if i < n_train else "valid" if i < n_train + n_valid else "test"
        frames = {}
        for mod in ("audio", "vision"):
            f = int(rng.integers(lo, hi + 1))
            strength = cfg.signal.get(mod, 0.0)
            mu = label_mean(label, mod, dims[mod], cfg.seed, names or None, strength)
            frames[mod] = (mu + cfg.noise_std * rng.standard_normal((f, dims[mod]))).astype(np.float32)
        text = _synthetic_text(rng, label, cfg.signal.get("text", 0.0), names)
        records.append(
            UtteranceSample(
                sample_id=f"syn{cfg.seed}_{i:05d}",
                text=text,
                audio_frames=frames["audio"],
                vision_frames=frames["vision"],
                label=label,
                split=split,
                duration_s=float(max(len(frames["audio"]), len(frames["vision"])) - 1) / 2.0,
            )
        )
    return DatasetManifest(
        records=records,
        task_kind=cfg.task_kind,
        class_names=names or None,
        multilabel=cfg.multilabel,
    )


def iter_split(manifest: DatasetManifest, splits: Iterable[str]) -> List[UtteranceSample]:
    wanted = set(splits)
    return [r for r in manifest.records if r.split in wanted]

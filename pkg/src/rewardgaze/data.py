"""Gaze datasets: synthetic generation, label corruption, JSONL files and batching.

Synthetic samples follow a linear-plus-noise generative map shared by both
domains::

    features = A @ concat(direction(gaze), z) + noise,   z ~ N(mu_domain, I)

with ``mu = 0`` for the labeled (source) domain and ``mu = delta`` for the
unlabeled (target) domain. An optional ``nonlinearity`` adds a fixed
``tanh`` mixing layer on top for harder variants.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import geometry
from .geometry import SphericalGaze

F32 = np.float32


class DataParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line


class DataValidationError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    features: np.ndarray
    label: SphericalGaze | None = None
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=F32).reshape(-1)
        if self.label is not None:
            self.label = SphericalGaze(float(self.label[0]), float(self.label[1]))

    @property
    def labeled(self) -> bool:
        return self.label is not None

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.id == other.id and self.source == other.source and self.label == other.label
                and self.features.shape == other.features.shape
                and bool(np.array_equal(self.features, other.features)))


@dataclass
class Dataset:
    samples: list[Sample]
    name: str = ""
    spec_hash: str | None = None

    def __post_init__(self):
        self.samples = list(self.samples)
        seen: set[str] = set()
        width = None
        for s in self.samples:
            if s.id in seen:
                raise DataValidationError(f"duplicate sample id {s.id!r} in dataset {self.name!r}")
            seen.add(s.id)
            if width is None:
                width = s.features.shape[0]
            elif s.features.shape[0] != width:
                raise DataValidationError(
                    f"sample {s.id!r} has {s.features.shape[0]} features, expected {width}")
        self._index = {s.id: i for i, s in enumerate(self.samples)}
        self._features: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.samples == other.samples

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def feature_width(self) -> int:
        return self.samples[0].features.shape[0] if self.samples else 0

    @property
    def is_labeled(self) -> bool:
        return bool(self.samples) and all(s.labeled for s in self.samples)

    def index_of(self, sample_id: str) -> int:
        return self._index[sample_id]

    def features(self) -> np.ndarray:
        if self._features is None:
            if not self.samples:
                self._features = np.zeros((0, 0), dtype=F32)
            else:
                self._features = np.stack([s.features for s in self.samples]).astype(F32)
        return self._features

    def labels(self) -> np.ndarray:
        """``(N, 2)`` float64 array of (yaw, pitch); every sample must be labeled."""
        missing = [s.id for s in self.samples if s.label is None]
        if missing:
            raise ValueError(f"dataset {self.name!r} has {len(missing)} unlabeled samples (e.g. {missing[0]!r})")
        return np.array([s.label for s in self.samples], dtype=np.float64).reshape(-1, 2)

    def subset(self, indices: Sequence[int], name: str | None = None) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], name or self.name, self.spec_hash)

    def with_labels(self, labels: Mapping[str, SphericalGaze], name: str | None = None) -> "Dataset":
        """Copy with labels replaced by ``labels[id]`` for every sample."""
        return Dataset([dataclasses.replace(s, label=labels[s.id]) for s in self.samples],
                       name or self.name, self.spec_hash)

    def without_labels(self, name: str | None = None) -> "Dataset":
        return Dataset([dataclasses.replace(s, label=None) for s in self.samples],
                       name or self.name, self.spec_hash)


# Synthetic generation


@dataclass
class SyntheticSpec:
    d_x: int = 24
    d_z: int = 8
    yaw_range: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    pitch_range: tuple[float, float] = (-math.pi / 3, math.pi / 3)
    noise: float = 0.05
    shift: float = 1.0
    shift_vector: tuple[float, ...] | None = None
    corrupt_fraction: float = 0.3
    corrupt_deg: float = 30.0
    nonlinearity: float = 0.0
    label_noise_deg: float = 0.0

    def __post_init__(self):
        self.yaw_range = tuple(float(v) for v in self.yaw_range)
        self.pitch_range = tuple(float(v) for v in self.pitch_range)
        if self.shift_vector is not None:
            self.shift_vector = tuple(float(v) for v in self.shift_vector)
        self.validate()

    def validate(self) -> None:
        if self.d_x < 1 or self.d_z < 0:
            raise ValueError("d_x must be positive and d_z non-negative")
        lo, hi = self.yaw_range
        if not -math.pi <= lo < hi <= math.pi:
            raise ValueError(f"yaw_range {self.yaw_range} must be a non-empty sub-interval of [-pi, pi]")
        lo, hi = self.pitch_range
        if not -math.pi / 2 < lo < hi < math.pi / 2:
            raise ValueError(f"pitch_range {self.pitch_range} must be a non-empty sub-interval of (-pi/2, pi/2)")
        if self.noise < 0 or self.shift < 0 or self.label_noise_deg < 0:
            raise ValueError("noise, shift and label_noise_deg must be non-negative")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ValueError(f"corrupt_fraction {self.corrupt_fraction} not in [0, 1]")
        if not 0.0 <= self.corrupt_deg <= 180.0:
            raise ValueError(f"corrupt_deg {self.corrupt_deg} not in [0, 180]")
        if self.shift_vector is not None and len(self.shift_vector) != self.d_z:
            raise ValueError(f"shift_vector has {len(self.shift_vector)} entries, d_z is {self.d_z}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["yaw_range"] = list(self.yaw_range)
        d["pitch_range"] = list(self.pitch_range)
        d["shift_vector"] = None if self.shift_vector is None else list(self.shift_vector)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown synthetic spec keys: {unknown}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class GenerativeMap:
    mixing: np.ndarray          # (d_x, 3 + d_z)
    shift: np.ndarray           # (d_z,)
    hidden: np.ndarray | None   # (d_x, d_x) tanh layer, when nonlinear


def generative_map(spec: SyntheticSpec, seed: int) -> GenerativeMap:
    rng = np.random.default_rng([seed, 7001])
    cols = 3 + spec.d_z
    mixing = rng.normal(size=(spec.d_x, cols)) / math.sqrt(cols)
    if spec.shift_vector is not None:
        shift = np.asarray(spec.shift_vector, dtype=np.float64)
    else:
        u = rng.normal(size=spec.d_z)
        shift = spec.shift * u / (np.linalg.norm(u) or 1.0)
    hidden = rng.normal(size=(spec.d_x, spec.d_x)) / math.sqrt(spec.d_x) if spec.nonlinearity else None
    return GenerativeMap(mixing, shift, hidden)


def _draw(spec: SyntheticSpec, gmap: GenerativeMap, n: int, shifted: bool,
          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    yaw = rng.uniform(*spec.yaw_range, size=n)
    pitch = rng.uniform(*spec.pitch_range, size=n)
    gaze = np.stack([yaw, pitch], axis=1)
    mu = gmap.shift if shifted else np.zeros(spec.d_z)
    z = rng.normal(size=(n, spec.d_z)) + mu
    latent = np.concatenate([geometry.directions(gaze), z], axis=1) if n else np.zeros((0, 3 + spec.d_z))
    x = latent @ gmap.mixing.T
    if gmap.hidden is not None:
        x = x + spec.nonlinearity * np.tanh(x @ gmap.hidden.T)
    x = x + spec.noise * rng.normal(size=x.shape)
    return x.astype(F32), gaze


def generate_synthetic(spec: SyntheticSpec, n_labeled: int, n_unlabeled: int, seed: int,
                       prefix: str = "") -> tuple[Dataset, Dataset, Dataset]:
    """Draw a labeled source set and an unlabeled shifted-domain set.

    Returns ``(labeled, unlabeled, oracle)`` where ``oracle`` is the unlabeled
    set with its hidden gaze attached; it is meant for evaluation only.
    """
    if n_labeled < 0 or n_unlabeled < 0:
        raise ValueError("sample counts must be non-negative")
    gmap = generative_map(spec, seed)
    h = spec.digest()
    xl, gl = _draw(spec, gmap, n_labeled, False, np.random.default_rng([seed, 7002]))
    xu, gu = _draw(spec, gmap, n_unlabeled, True, np.random.default_rng([seed, 7003]))
    if spec.label_noise_deg > 0:
        # annotation noise on the labeled set only; the oracle stays exact
        jitter = np.random.default_rng([seed, 7004]).normal(size=gl.shape) * math.radians(spec.label_noise_deg)
        gl = gl + jitter
        gl[:, 1] = np.clip(gl[:, 1], -math.pi / 2 + 1e-3, math.pi / 2 - 1e-3)
    labeled = Dataset([Sample(f"{prefix}L{i:06d}", xl[i], SphericalGaze(*gl[i]), "source")
                       for i in range(n_labeled)], "labeled", h)
    oracle = Dataset([Sample(f"{prefix}U{i:06d}", xu[i], SphericalGaze(*gu[i]), "target")
                      for i in range(n_unlabeled)], "unlabeled.oracle", h)
    return labeled, oracle.without_labels("unlabeled"), oracle


# Label corruption


def rotate_about_random_axis(v: np.ndarray, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate unit vector ``v`` by ``angle`` radians about a random axis perpendicular to it."""
    a = rng.normal(size=3)
    a -= a.dot(v) * v
    while np.linalg.norm(a) < 1e-8:
        a = rng.normal(size=3)
        a -= a.dot(v) * v
    a /= np.linalg.norm(a)
    # Rodrigues with a perpendicular axis: v' = v cos + (a x v) sin
    return v * math.cos(angle) + np.cross(a, v) * math.sin(angle)


def corrupt_labels(labels: Mapping[str, SphericalGaze], fraction: float, magnitude_deg: float,
                   seed: int, max_deg: float | None = None) -> tuple[dict[str, SphericalGaze], set[str]]:
    """Rotate exactly ``floor(fraction * N)`` labels by at least ``magnitude_deg``.

    The ids to corrupt are drawn without replacement; each rotation angle is
    uniform in ``[magnitude_deg, max_deg]`` (``max_deg`` defaults to
    ``magnitude_deg + 30``) about a random axis. Returns the new label map
    (same key order) and the set of corrupted ids.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"corruption fraction {fraction} not in [0, 1]")
    ids = list(labels)
    k = int(math.floor(fraction * len(ids) + 1e-9))
    rng = np.random.default_rng([seed, 7100])
    chosen = rng.choice(len(ids), size=k, replace=False) if k else np.zeros(0, dtype=int)
    hi = magnitude_deg + 30.0 if max_deg is None else max_deg
    out = dict(labels)
    mask: set[str] = set()
    for i in sorted(chosen.tolist()):
        key = ids[i]
        v = np.array(geometry.to_direction(labels[key]))
        angle = math.radians(rng.uniform(magnitude_deg, hi))
        w = rotate_about_random_axis(v, angle, rng)
        w /= np.linalg.norm(w)
        out[key] = geometry.to_spherical(geometry.DirectionVector(*w))
        mask.add(key)
    return out, mask


# JSONL I/O


def _f32_repr(v) -> float:
    # float32 -> shortest decimal that round-trips the float32 value.
    return float(np.format_float_positional(F32(v), unique=True, trim="-")) if math.isfinite(v) else v


def sample_to_record(s: Sample) -> dict:
    rec = {"id": s.id, "features": [_f32_repr(v) for v in s.features.tolist()]}
    if s.label is not None:
        rec["yaw"] = s.label.yaw
        rec["pitch"] = s.label.pitch
    rec["source"] = s.source
    return rec


def save_jsonl(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for s in dataset:
            fh.write(json.dumps(sample_to_record(s)) + "\n")


def load_jsonl(path, name: str | None = None) -> Dataset:
    path = Path(path)
    samples: list[Sample] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataParseError(path, lineno, f"invalid JSON: {e.msg}") from None
            if not isinstance(rec, dict):
                raise DataParseError(path, lineno, "record is not a JSON object")
            try:
                sid = rec["id"]
                feats = rec["features"]
            except KeyError as e:
                raise DataParseError(path, lineno, f"missing field {e.args[0]!r}") from None
            if not isinstance(sid, str) or not isinstance(feats, list):
                raise DataParseError(path, lineno, "'id' must be a string and 'features' a list")
            has_yaw, has_pitch = "yaw" in rec, "pitch" in rec
            if has_yaw != has_pitch:
                raise DataValidationError(f"{path}:{lineno}: sample {sid!r} has only one of yaw/pitch")
            if sid in seen:
                raise DataValidationError(f"{path}:{lineno}: duplicate id {sid!r}")
            seen.add(sid)
            label = SphericalGaze(float(rec["yaw"]), float(rec["pitch"])) if has_yaw else None
            try:
                arr = np.asarray(feats, dtype=F32)
            except (TypeError, ValueError):
                raise DataParseError(path, lineno, "features must be numbers") from None
            samples.append(Sample(sid, arr, label, str(rec.get("source", ""))))
    return Dataset(samples, name if name is not None else path.stem)


def save_labels_jsonl(labels: Mapping[str, SphericalGaze], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for sid, g in labels.items():
            fh.write(json.dumps({"id": sid, "yaw": float(g.yaw), "pitch": float(g.pitch)}) + "\n")


def load_labels_jsonl(path) -> dict[str, SphericalGaze]:
    out: dict[str, SphericalGaze] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[rec["id"]] = SphericalGaze(float(rec["yaw"]), float(rec["pitch"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataParseError(path, lineno, f"bad label record: {e}") from None
    return out


# Batching


def epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def balanced_batches(n_labeled: int, n_unlabeled: int, batch_size: int, seed: int,
                     epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(labeled_idx, unlabeled_idx)`` index pairs for one epoch.

    Each step takes ``batch_size // 2`` labeled and the rest unlabeled. The
    larger pool is visited exactly once per epoch; the smaller one is
    reshuffled and recycled as often as needed.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    if n_labeled < 1 or n_unlabeled < 1:
        raise ValueError("balanced_batches needs non-empty labeled and unlabeled pools")
    n_l, n_u = batch_size // 2, batch_size - batch_size // 2
    steps = max(math.ceil(n_labeled / n_l), math.ceil(n_unlabeled / n_u))
    lab = _cycling(n_labeled, seed, epoch, 1)
    unl = _cycling(n_unlabeled, seed, epoch, 2)
    larger_is_labeled = math.ceil(n_labeled / n_l) >= math.ceil(n_unlabeled / n_u)
    for step in range(steps):
        if step == steps - 1:
            # Last step: take what is left of the pool that defines the epoch.
            if larger_is_labeled:
                rest = n_labeled - n_l * step
                yield lab.take(rest), unl.take(n_u)
            else:
                rest = n_unlabeled - n_u * step
                yield lab.take(n_l), unl.take(rest)
        else:
            yield lab.take(n_l), unl.take(n_u)


class _cycling:
    def __init__(self, n: int, seed: int, epoch: int, stream: int):
        self.n = n
        self.rng = epoch_rng(seed, epoch, stream)
        self.order = self.rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            chunk = self.order[self.pos:self.pos + k]
            out.append(chunk)
            self.pos += len(chunk)
            k -= len(chunk)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def shuffled_batches(n: int, batch_size: int, seed: int, epoch: int = 0) -> Iterator[np.ndarray]:
    """Plain per-epoch shuffled minibatches over a single pool."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = epoch_rng(seed, epoch, 3).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]

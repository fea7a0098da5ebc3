"""Visual and text cue providers for the reward model.

Two interchangeable providers implement :class:`CueProvider`:

* :class:`SyntheticCueProvider` derives visual tokens from fixed random
  projections of a sample's features and text tokens from a (possibly wrong)
  3x3 gaze-direction description, standing in for an image encoder and a
  captioning model.
* :class:`RemoteCueProvider` fetches both from an HTTP embedding service
  through :class:`EmbeddingClient`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np
import requests

from .data import Dataset, Sample
from .geometry import SphericalGaze

log = logging.getLogger(__name__)

F32 = np.float32

DEFAULT_PROMPT = (
    "In 3D space, where is the person looking, including details about horizontal "
    "(left/right) direction, vertical (up/down) direction, and forward/backward "
    "relative to the viewer?"
)
ENV_URL = "OMNIGAZE_EMBED_URL"

CLASS_THRESHOLD = 0.2
HORIZONTAL = ("left", "center", "right")
VERTICAL = ("up", "center", "down")
N_CLASSES = 9


class ProviderError(RuntimeError):
    def __init__(self, msg: str, status: int | None = None, retryable: bool = False):
        super().__init__(msg)
        self.status = status
        self.retryable = retryable


class ProtocolError(ProviderError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    text: str = DEFAULT_PROMPT

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("prompt template must be non-empty")


@dataclass
class CueProviderConfig:
    mode: str = "synthetic"
    n_patches: int = 8
    d_visual: int = 16
    n_text: int = 4
    d_text: int = 16
    p_desc: float = 0.15
    jitter: float = 0.05
    endpoint: str | None = None
    timeout: float = 5.0
    max_in_flight: int = 8

    def __post_init__(self):
        if self.mode not in ("synthetic", "remote"):
            raise ValueError(f"cue mode must be 'synthetic' or 'remote', got {self.mode!r}")
        for name in ("n_patches", "d_visual", "n_text", "d_text", "max_in_flight"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.p_desc <= 1.0:
            raise ValueError(f"p_desc {self.p_desc} not in [0, 1]")

    @property
    def n_visual(self) -> int:
        return self.n_patches + 1

    def resolved_endpoint(self) -> str | None:
        return os.environ.get(ENV_URL) or self.endpoint


@dataclass
class VisualCue:
    tokens: np.ndarray  # (M + 1, d_v); row 0 plays the class token


@dataclass
class TextCue:
    tokens: np.ndarray  # (n_t, d_t)


class CueProvider(Protocol):
    config: CueProviderConfig

    def visual_cue(self, sample: Sample) -> VisualCue: ...

    def text_cue(self, sample: Sample, prompt: PromptTemplate = PromptTemplate()) -> TextCue: ...


def visual_batch(provider: CueProvider, samples: Sequence[Sample]) -> np.ndarray:
    fast = getattr(provider, "visual_batch", None)
    if fast is not None:
        return fast(samples)
    return np.stack([provider.visual_cue(s).tokens for s in samples]).astype(F32)


def text_batch(provider: CueProvider, samples: Sequence[Sample],
               prompt: PromptTemplate = PromptTemplate()) -> np.ndarray:
    fast = getattr(provider, "text_batch", None)
    if fast is not None:
        return fast(samples, prompt)
    return np.stack([provider.text_cue(s, prompt).tokens for s in samples]).astype(F32)


# Direction classes and synthetic descriptions


def gaze_class(g: SphericalGaze) -> int:
    """3x3 direction class ``3 * horizontal + vertical``."""
    yaw, pitch = float(g[0]), float(g[1])
    h = 0 if yaw < -CLASS_THRESHOLD else (2 if yaw > CLASS_THRESHOLD else 1)
    v = 0 if pitch > CLASS_THRESHOLD else (2 if pitch < -CLASS_THRESHOLD else 1)
    return 3 * h + v


def class_name(c: int) -> str:
    return f"{HORIZONTAL[c // 3]}-{VERTICAL[c % 3]}"


def describe_text(c: int) -> str:
    h, v = HORIZONTAL[c // 3], VERTICAL[c % 3]
    horiz = "straight ahead horizontally" if h == "center" else f"toward the {h}"
    vert = "level" if v == "center" else f"{v}ward"
    return f"The person is looking {horiz}, with the gaze {vert}, facing forward toward the viewer."


def _id_key(sample_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(sample_id.encode(), digest_size=8).digest(), "little")


def describe(g: SphericalGaze, sample_id: str, seed: int, p_desc: float) -> int:
    """Noisy description class: the true class, or with probability ``p_desc`` a uniform draw."""
    rng = np.random.default_rng([seed, 7200, _id_key(sample_id)])
    c = gaze_class(g)
    if rng.random() < p_desc:
        c = int(rng.integers(N_CLASSES))
    return c


def describe_all(gaze: Mapping[str, SphericalGaze], seed: int, p_desc: float) -> dict[str, int]:
    return {sid: describe(g, sid, seed, p_desc) for sid, g in gaze.items()}


def save_descriptions(desc: Mapping[str, int], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for sid, c in desc.items():
            fh.write(json.dumps({"id": sid, "class": int(c), "text": describe_text(int(c))}) + "\n")


def load_descriptions(path) -> dict[str, int]:
    out = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["id"]] = int(rec["class"])
    return out


class SyntheticCueProvider:
    """Deterministic cue source; a pure function of (seed, sample)."""

    def __init__(self, config: CueProviderConfig, seed: int, descriptions: Mapping[str, int],
                 feature_width: int):
        self.config = config
        self.seed = seed
        self.descriptions = dict(descriptions)
        rng = np.random.default_rng([seed, 7300])
        c = config
        self.proj = (rng.normal(size=(c.n_visual, feature_width, c.d_visual)) / np.sqrt(feature_width)).astype(F32)
        self.offsets = (0.5 * rng.normal(size=(c.n_visual, c.d_visual))).astype(F32)
        self.table = rng.normal(size=(N_CLASSES, c.d_text)).astype(F32)
        self.token_jitter = (c.jitter * rng.normal(size=(c.n_text, c.d_text))).astype(F32)
        self._text_cache: dict[str, np.ndarray] = {}

    @classmethod
    def from_gaze(cls, config: CueProviderConfig, seed: int, gaze: Mapping[str, SphericalGaze],
                  feature_width: int) -> "SyntheticCueProvider":
        return cls(config, seed, describe_all(gaze, seed, config.p_desc), feature_width)

    def add_descriptions(self, descriptions: Mapping[str, int]) -> None:
        self.descriptions.update(descriptions)

    def visual_cue(self, sample: Sample) -> VisualCue:
        return VisualCue(self.visual_batch([sample])[0])

    def visual_batch(self, samples: Sequence[Sample]) -> np.ndarray:
        x = np.stack([s.features for s in samples]).astype(F32)
        if x.shape[1] != self.proj.shape[1]:
            raise ValueError(f"feature width {x.shape[1]} != provider width {self.proj.shape[1]}")
        return (np.einsum("bd,tdv->btv", x, self.proj) + self.offsets).astype(F32)

    def text_cue(self, sample: Sample, prompt: PromptTemplate = PromptTemplate()) -> TextCue:
        cached = self._text_cache.get(sample.id)
        if cached is None:
            try:
                c = self.descriptions[sample.id]
            except KeyError:
                raise ValueError(f"no gaze description for sample {sample.id!r}") from None
            rng = np.random.default_rng([self.seed, 7301, _id_key(sample.id)])
            noise = self.config.jitter * rng.normal(size=self.token_jitter.shape)
            cached = (self.table[c] + self.token_jitter + noise).astype(F32)
            self._text_cache[sample.id] = cached
        return TextCue(cached)

    def text_batch(self, samples: Sequence[Sample], prompt: PromptTemplate = PromptTemplate()) -> np.ndarray:
        return np.stack([self.text_cue(s, prompt).tokens for s in samples])


# Remote embedding service


class EmbeddingClient:
    """JSON-over-HTTP client for ``POST {endpoint}/embed``.

    Transport failures, timeouts and 5xx/429 responses are retried up to
    ``max_retries`` times, sleeping ``backoff[i]`` seconds before retry ``i``.
    """

    def __init__(self, endpoint: str, timeout: float = 5.0, max_retries: int = 3,
                 backoff: Sequence[float] = (0.1, 0.4, 1.6), max_in_flight: int = 8,
                 sleep: Callable[[float], None] = time.sleep, session: requests.Session | None = None):
        self.endpoint = os.environ.get(ENV_URL) or endpoint
        if not self.endpoint:
            raise ValueError("no embedding endpoint configured")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = tuple(backoff)
        self.max_in_flight = max_in_flight
        self.sleep = sleep
        self.session = session or requests.Session()

    @property
    def url(self) -> str:
        return self.endpoint.rstrip("/") + "/embed"

    def _once(self, kind: str, sample_id: str, payload) -> np.ndarray:
        body = {"kind": kind, "id": sample_id, "payload": payload}
        try:
            resp = self.session.post(self.url, json=body, timeout=self.timeout)
        except requests.Timeout as e:
            raise ProviderError(f"embedding request for {sample_id!r} timed out", retryable=True) from e
        except requests.ConnectionError as e:
            raise ProviderError(f"embedding service unreachable: {e}", retryable=True) from e
        if resp.status_code != 200:
            retry = resp.status_code >= 500 or resp.status_code == 429
            raise ProviderError(f"embedding service returned HTTP {resp.status_code}",
                                status=resp.status_code, retryable=retry)
        try:
            data = resp.json()
            emb = data["embedding"]
            rid = data["id"]
        except (ValueError, KeyError, TypeError) as e:
            raise ProtocolError(f"malformed embedding response: {e}") from None
        if rid != sample_id:
            raise ProtocolError(f"response id {rid!r} does not match request id {sample_id!r}")
        try:
            return np.asarray(emb, dtype=F32).reshape(-1)
        except (TypeError, ValueError):
            raise ProtocolError("embedding is not a list of numbers") from None

    def embed(self, kind: str, sample_id: str, payload, expected_len: int | None = None) -> np.ndarray:
        attempt = 0
        while True:
            try:
                vec = self._once(kind, sample_id, payload)
                break
            except ProviderError as e:
                if not e.retryable or attempt >= self.max_retries:
                    raise
                delay = self.backoff[min(attempt, len(self.backoff) - 1)]
                log.warning("embedding %s/%s failed (%s); retrying in %.1fs", kind, sample_id, e, delay)
                self.sleep(delay)
                attempt += 1
        if expected_len is not None and vec.shape[0] != expected_len:
            raise ProtocolError(f"embedding for {sample_id!r} has {vec.shape[0]} values, expected {expected_len}")
        return vec

    def embed_many(self, kind: str, items: Iterable[tuple[str, object]],
                   expected_len: int | None = None) -> dict[str, np.ndarray]:
        """Embed several payloads with at most ``max_in_flight`` concurrent requests."""
        items = list(items)
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            futs = {sid: pool.submit(self.embed, kind, sid, payload, expected_len) for sid, payload in items}
            return {sid: f.result() for sid, f in futs.items()}


def remote_embed(client: EmbeddingClient, kind: str, sample_id: str, payload,
                 expected_len: int | None = None) -> np.ndarray:
    if kind not in ("visual", "text"):
        raise ValueError(f"kind must be 'visual' or 'text', got {kind!r}")
    return client.embed(kind, sample_id, payload, expected_len)


class RemoteCueProvider:
    """Cue provider backed by an embedding service, with a per-run cache by sample id."""

    def __init__(self, config: CueProviderConfig, client: EmbeddingClient | None = None,
                 descriptions: Mapping[str, str] | None = None):
        self.config = config
        endpoint = config.resolved_endpoint()
        self.client = client or EmbeddingClient(endpoint or "", timeout=config.timeout,
                                                max_in_flight=config.max_in_flight)
        self.descriptions = dict(descriptions or {})
        self._visual: dict[str, np.ndarray] = {}
        self._text: dict[str, np.ndarray] = {}

    def _fetch_visual(self, samples: Sequence[Sample]) -> None:
        c = self.config
        todo = [(s.id, s.features.tolist()) for s in samples if s.id not in self._visual]
        if todo:
            got = self.client.embed_many("visual", todo, c.n_visual * c.d_visual)
            for sid, vec in got.items():
                self._visual[sid] = vec.reshape(c.n_visual, c.d_visual)

    def _fetch_text(self, samples: Sequence[Sample], prompt: PromptTemplate) -> None:
        c = self.config
        todo = [(s.id, self.descriptions.get(s.id, prompt.text)) for s in samples if s.id not in self._text]
        if todo:
            got = self.client.embed_many("text", todo, c.n_text * c.d_text)
            for sid, vec in got.items():
                self._text[sid] = vec.reshape(c.n_text, c.d_text)

    def visual_cue(self, sample: Sample) -> VisualCue:
        self._fetch_visual([sample])
        return VisualCue(self._visual[sample.id])

    def text_cue(self, sample: Sample, prompt: PromptTemplate = PromptTemplate()) -> TextCue:
        self._fetch_text([sample], prompt)
        return TextCue(self._text[sample.id])

    def visual_batch(self, samples: Sequence[Sample]) -> np.ndarray:
        self._fetch_visual(samples)
        return np.stack([self._visual[s.id] for s in samples])

    def text_batch(self, samples: Sequence[Sample], prompt: PromptTemplate = PromptTemplate()) -> np.ndarray:
        self._fetch_text(samples, prompt)
        return np.stack([self._text[s.id] for s in samples])


def make_provider(config: CueProviderConfig, seed: int, feature_width: int,
                  descriptions: Mapping[str, int] | None = None) -> CueProvider:
    if config.mode == "synthetic":
        return SyntheticCueProvider(config, seed, descriptions or {}, feature_width)
    texts = {sid: describe_text(c) for sid, c in (descriptions or {}).items()}
    return RemoteCueProvider(config, descriptions=texts)


def descriptions_for(dataset: Dataset, seed: int, p_desc: float) -> dict[str, int]:
    """Descriptions for a dataset whose samples carry (true) gaze labels."""
    return describe_all({s.id: s.label for s in dataset}, seed, p_desc)

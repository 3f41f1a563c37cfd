"""Prompt construction, description/embedding providers, and the on-disk
embedding cache.

Each catalog item carries an ordered list of textual attribute pairs and
an image path. Three prompting routes ask a multimodal language model for
a description (text-only, image-only, and a hybrid route whose template
walks the model through generate/refine/finalize steps); a fourth route
embeds the raw attribute text directly. Descriptions are turned into
vectors by an embedding endpoint. Everything downstream of this module
reads vectors from the cache only, so training never touches the network.

Providers are pluggable: ``remote`` speaks JSON-over-HTTP (credentials
come from the environment), ``synthetic`` derives deterministic
pseudo-descriptions and unit vectors from content hashes so the whole
pipeline runs offline. Cache writes are atomic (temp file + rename) and
each record carries a checksum, so a missing record and a damaged record
are distinct failures.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import urllib.error
import urllib.request
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

ROUTES = ("text_route", "visual_route", "hybrid_route", "original_text")
PROMPTED_ROUTES = ("text_route", "visual_route", "hybrid_route")
DEFAULT_EMBED_DIM = 1536

TEXT_PROMPT_TEMPLATE = (
    "The item has the following attributes: {attributes}. "
    "Summarize the item based on the text above and describe it smoothly "
    "in one paragraph for recommendation."
)

VISUAL_PROMPT_TEMPLATE = (
    "Image data is given via local path {image_path}. Analyze the provided "
    "image carefully, pay close attention to specific visual elements such "
    "as color schemes, main characters, prominent objects, and artistic "
    "style, and explicitly mention them in your description. The "
    "description should accurately reflect the image's theme, mood and "
    "atmosphere. Output only a well-structured and vivid paragraph for "
    "recommandation."
)

HYBRID_PROMPT_TEMPLATE = (
    "The item's text info is: {text_info}. The image is given in "
    "{image_path}. Carefully analyze the provided textual description and "
    "movie poster through the following iterative steps.\n\n"
    "Step 1: Initial Generation. Jointly analyze the item's text and image "
    "information to identify key thematic and visual elements relevant to "
    "recommendation, such as genre, emotional tone, main characters, "
    "setting, and target audience. Generate an initial paragraph that "
    "integrates the original textual content with complementary visual "
    "cues.\n\n"
    "Step 2: Recursive Refinement. Review the generated paragraph and "
    "reanalyze original modalities to detect missing or inconsistent "
    "details. Revise the description by adding omitted but relevant visual "
    "or textual information to improve completeness, coherence, and "
    "recommendation focus.\n\n"
    "Step 3: Final Output. Repeat Step 2 until no new information added, "
    "yielding a unified, recommendation-oriented description."
)


class ProviderError(RuntimeError):
    """Remote provider failed after exhausting its retry budget."""


class TransientProviderError(RuntimeError):
    """A retryable transport failure (timeouts, 5xx, connection resets)."""


class CacheMiss(KeyError):
    """The requested record has never been written."""


class CacheCorrupt(RuntimeError):
    """The record exists on disk but fails structural or checksum validation."""


@dataclass(frozen=True)
class ItemAttributes:
    """Ordered attribute pairs plus an optional image path."""

    pairs: tuple[tuple[str, str], ...]
    image_path: str | None = None

    def __post_init__(self):
        for name, _ in self.pairs:
            if not name:
                raise ValueError("attribute names must be non-empty")

    @property
    def has_text(self) -> bool:
        return len(self.pairs) > 0

    @property
    def has_image(self) -> bool:
        return bool(self.image_path)


@dataclass
class SemanticRecord:
    item_id: str
    route: str
    vector: np.ndarray            # float32, length d0
    description: str | None = None

    def __post_init__(self):
        if self.route not in ROUTES:
            raise ValueError(f"unknown route '{self.route}'")
        self.vector = np.asarray(self.vector, dtype=np.float32)


@dataclass
class ProviderConfig:
    kind: str = "synthetic"                # "remote" | "synthetic"
    endpoint: str = ""
    description_model: str = ""
    embedding_model: str = ""
    timeout: float = 30.0
    retries: int = 3
    d0: int = DEFAULT_EMBED_DIM
    seed: int = 0
    # decoding options forwarded verbatim to the remote endpoint
    decoding: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        payload = json.dumps(
            {
                "kind": self.kind,
                "endpoint": self.endpoint,
                "description_model": self.description_model,
                "embedding_model": self.embedding_model,
                "d0": self.d0,
                "seed": self.seed,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# prompt construction (pure functions of their inputs)


def enumerate_attributes(attrs: ItemAttributes) -> str:
    if not attrs.pairs:
        raise ValueError("item has no textual attributes")
    return "; ".join(f"{name}: {value}" for name, value in attrs.pairs)


def build_text_prompt(attrs: ItemAttributes) -> str:
    return TEXT_PROMPT_TEMPLATE.format(attributes=enumerate_attributes(attrs))


def build_visual_prompt(image_path: str) -> str:
    if not image_path:
        raise ValueError("image path must be non-empty")
    return VISUAL_PROMPT_TEMPLATE.format(image_path=image_path)


def build_hybrid_prompt(attrs: ItemAttributes, image_path: str) -> str:
    if not attrs.pairs:
        raise ValueError("item has no textual attributes")
    if not image_path:
        raise ValueError("image path must be non-empty")
    return HYBRID_PROMPT_TEMPLATE.format(
        text_info=enumerate_attributes(attrs), image_path=image_path
    )


def serialize_original_text(attrs: ItemAttributes) -> str:
    """The raw attribute enumeration, with no instruction sentence."""
    return enumerate_attributes(attrs)


def build_route_prompt(route: str, attrs: ItemAttributes) -> str:
    if route == "text_route":
        return build_text_prompt(attrs)
    if route == "visual_route":
        return build_visual_prompt(attrs.image_path or "")
    if route == "hybrid_route":
        return build_hybrid_prompt(attrs, attrs.image_path or "")
    raise ValueError(f"route '{route}' has no prompt")


# ---------------------------------------------------------------------------
# providers


def _stable_digest(*parts) -> int:
    h = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


class SyntheticProvider:
    """Deterministic offline provider: hash-seeded descriptions and vectors."""

    kind = "synthetic"

    def __init__(self, config: ProviderConfig):
        self.config = config

    def fetch_description(self, prompt: str) -> str:
        digest = hashlib.sha256(
            f"{self.config.seed}:{prompt}".encode("utf-8")
        ).hexdigest()
        return f"synthetic description {digest[:24]}"

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        rng = np.random.default_rng(_stable_digest("embed", self.config.seed, text))
        vec = rng.normal(size=self.config.d0)
        return vec / np.linalg.norm(vec)


def _default_transport(url: str, payload: dict, timeout: float, token: str | None) -> dict:
    body = json.dumps(payload).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    request = urllib.request.Request(url, data=body, headers=headers)
    try:
        with urllib.request.urlopen(request, timeout=timeout) as response:
            return json.loads(response.read().decode("utf-8"))
    except urllib.error.HTTPError as err:
        if err.code >= 500:
            raise TransientProviderError(f"HTTP {err.code}") from err
        raise ProviderError(f"HTTP {err.code}") from err
    except (urllib.error.URLError, TimeoutError) as err:
        raise TransientProviderError(str(err)) from err


CREDENTIALS_ENV_VAR = "DUALREC_API_KEY"


class RemoteProvider:
    """JSON-over-HTTP provider with bounded retry on transient failures.

    ``transport(url, payload, timeout, token) -> dict`` is injectable so
    tests can exercise the retry contract without a network.
    """

    kind = "remote"

    def __init__(self, config: ProviderConfig, transport: Callable | None = None):
        self.config = config
        self.transport = transport or _default_transport
        self.token = os.environ.get(CREDENTIALS_ENV_VAR)

    def _call(self, payload: dict) -> dict:
        last: Exception | None = None
        for _ in range(max(1, self.config.retries)):
            try:
                return self.transport(
                    self.config.endpoint, payload, self.config.timeout, self.token
                )
            except TransientProviderError as err:
                last = err
        raise ProviderError(f"retry budget exhausted; last failure: {last}")

    def fetch_description(self, prompt: str) -> str:
        payload = {
            "task": "describe",
            "model": self.config.description_model,
            "prompt": prompt,
            **self.config.decoding,
        }
        response = self._call(payload)
        text = response.get("text", "")
        if not text:
            raise ProviderError("provider returned an empty description")
        return text

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        payload = {"task": "embed", "model": self.config.embedding_model, "text": text}
        response = self._call(payload)
        vec = np.asarray(response.get("embedding", []), dtype=np.float64)
        if vec.shape != (self.config.d0,):
            raise ProviderError(
                f"embedding length {vec.size} does not match configured d0 {self.config.d0}"
            )
        return vec


def make_provider(config: ProviderConfig, transport: Callable | None = None):
    if config.kind == "synthetic":
        return SyntheticProvider(config)
    if config.kind == "remote":
        return RemoteProvider(config, transport=transport)
    raise ValueError(f"unknown provider kind '{config.kind}'")


# ---------------------------------------------------------------------------
# cache

_RECORD_MAGIC = b"DVEC"
_RECORD_VERSION = 1


class SemanticCache:
    """Per-(dataset, provider, route, item) binary vector records.

    Record layout: magic, version byte, length-prefixed item id and route
    tag, d0 (u32), crc32 of the payload (u32), then d0 float32
    little-endian values. Descriptions live in a UTF-8 sidecar file.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _dir(self, dataset: str, fingerprint: str, route: str) -> Path:
        return self.root / dataset / fingerprint / route

    def _base_name(self, item_id: str) -> str:
        return hashlib.sha1(item_id.encode("utf-8")).hexdigest()

    def record_path(self, dataset: str, fingerprint: str, item_id: str, route: str) -> Path:
        return self._dir(dataset, fingerprint, route) / f"{self._base_name(item_id)}.vec"

    def has(self, dataset: str, fingerprint: str, item_id: str, route: str) -> bool:
        return self.record_path(dataset, fingerprint, item_id, route).exists()

    def count(self, dataset: str, fingerprint: str, route: str) -> int:
        d = self._dir(dataset, fingerprint, route)
        return len(list(d.glob("*.vec"))) if d.exists() else 0

    def put(self, dataset: str, fingerprint: str, record: SemanticRecord) -> None:
        path = self.record_path(dataset, fingerprint, record.item_id, record.route)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = record.vector.astype("<f4").tobytes()
        item_bytes = record.item_id.encode("utf-8")
        route_bytes = record.route.encode("utf-8")
        blob = bytearray()
        blob += _RECORD_MAGIC
        blob += struct.pack("<B", _RECORD_VERSION)
        blob += struct.pack("<H", len(item_bytes)) + item_bytes
        blob += struct.pack("<B", len(route_bytes)) + route_bytes
        blob += struct.pack("<I", record.vector.size)
        blob += struct.pack("<I", zlib.crc32(payload))
        blob += payload
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(bytes(blob))
        tmp.replace(path)
        if record.description is not None:
            side = path.with_suffix(".txt")
            side_tmp = side.with_suffix(".txt.tmp")
            side_tmp.write_text(record.description, encoding="utf-8")
            side_tmp.replace(side)

    def get(self, dataset: str, fingerprint: str, item_id: str, route: str) -> SemanticRecord:
        path = self.record_path(dataset, fingerprint, item_id, route)
        if not path.exists():
            raise CacheMiss(f"no cached record for item '{item_id}' route '{route}'")
        blob = path.read_bytes()
        try:
            if blob[:4] != _RECORD_MAGIC:
                raise CacheCorrupt(f"bad magic in {path}")
            offset = 4
            (version,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            if version != _RECORD_VERSION:
                raise CacheCorrupt(f"unsupported record version {version} in {path}")
            (id_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            stored_id = blob[offset:offset + id_len].decode("utf-8")
            offset += id_len
            (route_len,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            stored_route = blob[offset:offset + route_len].decode("utf-8")
            offset += route_len
            (d0,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            (crc,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            payload = blob[offset:offset + 4 * d0]
            if len(payload) != 4 * d0:
                raise CacheCorrupt(f"truncated payload in {path}")
        except struct.error as err:
            raise CacheCorrupt(f"truncated record {path}: {err}") from None
        if zlib.crc32(payload) != crc:
            raise CacheCorrupt(f"checksum mismatch in {path}")
        if stored_id != item_id or stored_route != route:
            raise CacheCorrupt(
                f"record {path} holds ('{stored_id}', '{stored_route}'), "
                f"expected ('{item_id}', '{route}')"
            )
        vector = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        side = path.with_suffix(".txt")
        description = side.read_text(encoding="utf-8") if side.exists() else None
        return SemanticRecord(item_id, route, vector, description)


# ---------------------------------------------------------------------------
# batch embedding


def embed_items(
    items: Sequence[tuple[str, ItemAttributes]],
    provider,
    cache: SemanticCache,
    dataset: str,
    routes: Sequence[str] = ROUTES,
    resume: bool = True,
) -> dict[str, int]:
    """Populate the cache for every (item, route); returns per-route counts
    of records written in this call. With ``resume`` existing records are
    kept, so an interrupted run picks up where it stopped.
    """
    fingerprint = provider.config.fingerprint()
    written = {route: 0 for route in routes}
    for item_id, attrs in items:
        for route in routes:
            if route not in ROUTES:
                raise ValueError(f"unknown route '{route}'")
            if resume and cache.has(dataset, fingerprint, item_id, route):
                continue
            if route == "original_text":
                description = None
                vector = provider.embed_text(serialize_original_text(attrs))
            else:
                prompt = build_route_prompt(route, attrs)
                description = provider.fetch_description(prompt)
                vector = provider.embed_text(description)
            cache.put(
                dataset,
                fingerprint,
                SemanticRecord(item_id, route, vector, description),
            )
            written[route] += 1
    return written


def load_route_matrix(
    cache: SemanticCache,
    dataset: str,
    fingerprint: str,
    item_ids: Sequence[str],
    route: str,
    d0: int,
) -> np.ndarray:
    """Assemble the [num_items, d0] matrix for one route in dense-id order."""
    out = np.empty((len(item_ids), d0), dtype=np.float64)
    for dense, item_id in enumerate(item_ids):
        try:
            record = cache.get(dataset, fingerprint, item_id, route)
        except CacheMiss:
            raise CacheMiss(
                f"missing semantic record for item '{item_id}' route '{route}'"
            ) from None
        if record.vector.size != d0:
            raise CacheCorrupt(
                f"item '{item_id}' route '{route}': dimension {record.vector.size}, expected {d0}"
            )
        out[dense] = record.vector.astype(np.float64)
    return out


@dataclass
class SemanticMatrices:
    """All four route matrices, aligned with dense item ids."""

    text: np.ndarray
    visual: np.ndarray
    hybrid: np.ndarray
    original: np.ndarray

    @property
    def d0(self) -> int:
        return self.text.shape[1]

    @classmethod
    def from_cache(
        cls,
        cache: SemanticCache,
        dataset: str,
        fingerprint: str,
        item_ids: Sequence[str],
        d0: int,
    ) -> "SemanticMatrices":
        load = lambda route: load_route_matrix(cache, dataset, fingerprint, item_ids, route, d0)
        return cls(
            text=load("text_route"),
            visual=load("visual_route"),
            hybrid=load("hybrid_route"),
            original=load("original_text"),
        )


# ---------------------------------------------------------------------------
# structured synthetic embeddings (offline end-to-end fixture)


def synthesize_structured_embeddings(
    item_ids: Sequence[str],
    clusters: int,
    noise: float,
    seed: int,
    d0: int,
) -> list[SemanticRecord]:
    """Cluster-structured vectors for every item and route.

    Item ``i`` joins cluster ``i % clusters``; all four routes of an item
    share the cluster centroid and differ only by per-route Gaussian noise
    scaled by ``noise``, then unit-normalised. Fully deterministic under
    (seed, d0).
    """
    if clusters < 1:
        raise ValueError("clusters must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = rng.normal(size=(clusters, d0))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    records: list[SemanticRecord] = []
    for index, item_id in enumerate(item_ids):
        centroid = centroids[index % clusters]
        for route in ROUTES:
            vec = centroid + noise * rng.normal(size=d0)
            vec = vec / np.linalg.norm(vec)
            records.append(SemanticRecord(item_id, route, vec))
    return records


def structured_fingerprint(clusters: int, noise: float, seed: int, d0: int) -> str:
    payload = f"structured:{clusters}:{noise}:{seed}:{d0}"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def matrices_from_records(
    records: Iterable[SemanticRecord], item_ids: Sequence[str], d0: int
) -> SemanticMatrices:
    """In-memory counterpart of :meth:`SemanticMatrices.from_cache`."""
    by_key = {(r.item_id, r.route): r for r in records}
    arrays = {}
    for route in ROUTES:
        mat = np.empty((len(item_ids), d0), dtype=np.float64)
        for dense, item_id in enumerate(item_ids):
            record = by_key.get((item_id, route))
            if record is None:
                raise CacheMiss(
                    f"missing semantic record for item '{item_id}' route '{route}'"
                )
            mat[dense] = record.vector.astype(np.float64)
        arrays[route] = mat
    return SemanticMatrices(
        text=arrays["text_route"],
        visual=arrays["visual_route"],
        hybrid=arrays["hybrid_route"],
        original=arrays["original_text"],
    )

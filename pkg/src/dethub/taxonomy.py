"""Category vocabularies, detection prompts and the frozen language embedding.

A dataset's category names are joined into one prompt string, tokenized into a
bounded token sequence with a span per category, and embedded once by a frozen
embedder. The embedding conditions the object queries and the per-token
language features score the object features.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SEPARATOR = ", "
DEFAULT_MAX_LENGTH = 512


@dataclass(frozen=True)
class CategoryVocabulary:
    dataset_name: str
    categories: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if len(set(self.categories)) != len(self.categories):
            raise DataError(f"duplicate category names in vocabulary {self.dataset_name!r}")
        for name in self.categories:
            if not name.strip():
                raise DataError(f"blank category name in vocabulary {self.dataset_name!r}")
            if SEPARATOR.strip() in name:
                raise DataError(f"category name {name!r} contains the prompt separator")

    @property
    def category_count(self) -> int:
        return len(self.categories)

    def index(self, name: str) -> int:
        return self.categories.index(name)

    def __len__(self):
        return len(self.categories)


def read_vocabulary(path: str | Path, dataset_name: str | None = None) -> CategoryVocabulary:
    """Read a vocabulary from a one-name-per-line text file or a COCO JSON file."""
    path = Path(path)
    name = dataset_name or path.stem
    if path.suffix == ".json":
        payload = json.loads(path.read_text(encoding="utf-8"))
        if "categories" not in payload:
            raise DataError(f"{path}: missing 'categories'")
        cats = sorted(payload["categories"], key=lambda c: c["id"])
        return CategoryVocabulary(name, tuple(c["name"] for c in cats))
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    return CategoryVocabulary(name, tuple(ln for ln in lines if ln))


def build_prompt(vocab: CategoryVocabulary | Sequence[str]) -> str:
    categories = vocab.categories if isinstance(vocab, CategoryVocabulary) else tuple(vocab)
    if not categories:
        raise DataError("empty vocabulary")
    return SEPARATOR.join(categories)


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class Tokenizer:
    """Small deterministic sub-word tokenizer.

    Lowercases, splits into alphanumeric words and single punctuation marks,
    and breaks words longer than ``max_word`` characters into ``piece_len``
    chunks where continuation pieces carry a ``##`` prefix. Token ids are a
    stable hash of the token string, so they survive process restarts.
    """

    pad_id = 0

    def __init__(self, vocab_size: int = 30522, piece_len: int = 6, max_word: int = 8):
        self.vocab_size = vocab_size
        self.piece_len = piece_len
        self.max_word = max_word

    @property
    def name(self) -> str:
        return f"stub-wordpiece-v1:{self.vocab_size}:{self.piece_len}:{self.max_word}"

    def tokenize(self, text: str) -> list[str]:
        tokens = []
        for word in _TOKEN_RE.findall(text.lower()):
            if len(word) <= self.max_word or not word.isalnum():
                tokens.append(word)
                continue
            for start in range(0, len(word), self.piece_len):
                piece = word[start:start + self.piece_len]
                tokens.append(piece if start == 0 else "##" + piece)
        return tokens

    def token_id(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return 1 + int.from_bytes(digest, "little") % (self.vocab_size - 1)

    def decode(self, tokens: Sequence[str]) -> str:
        out = ""
        for tok in tokens:
            if tok.startswith("##"):
                out += tok[2:]
            elif not tok.isalnum() or (out and not out[-1].isalnum()):
                out += tok
            else:
                out += (" " if out else "") + tok
        return out

    def normalize(self, name: str) -> str:
        """Canonical form of a category name as `decode` reconstructs it."""
        return self.decode(self.tokenize(name))


DEFAULT_TOKENIZER = Tokenizer()


@dataclass(frozen=True)
class DetectionPrompt:
    text: str
    categories: tuple[str, ...]
    tokens: tuple[str, ...]
    token_ids: tuple[int, ...]
    span_map: Mapping[int, tuple[int, int]]
    max_length: int = DEFAULT_MAX_LENGTH
    truncated_categories: tuple[int, ...] = ()
    tokenizer_name: str = DEFAULT_TOKENIZER.name

    @property
    def token_count(self) -> int:
        """Length of the fixed-size (padded) token sequence."""
        return self.max_length

    @property
    def valid_length(self) -> int:
        return len(self.token_ids)

    @property
    def padded_ids(self) -> np.ndarray:
        ids = np.full(self.max_length, DEFAULT_TOKENIZER.pad_id, dtype=np.int64)
        ids[: len(self.token_ids)] = self.token_ids
        return ids

    @property
    def valid_mask(self) -> np.ndarray:
        mask = np.zeros(self.max_length, dtype=bool)
        mask[: len(self.token_ids)] = True
        return mask

    def category_token_matrix(self) -> np.ndarray:
        """Binary [category_count x token_count] map of category spans.

        Rows of truncated categories are all zero.
        """
        m = np.zeros((len(self.categories), self.max_length), dtype=np.float32)
        for c, (a, b) in self.span_map.items():
            m[c, a:b] = 1.0
        return m

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.tokenizer_name.encode())
        h.update(str(self.max_length).encode())
        h.update(np.asarray(self.token_ids, dtype=np.int64).tobytes())
        h.update("\x1f".join(self.tokens).encode())
        return h.hexdigest()


def tokenize_prompt(
    text: str,
    max_length: int = DEFAULT_MAX_LENGTH,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> DetectionPrompt:
    """Tokenize a joined prompt, dropping whole tail categories that do not fit."""
    if max_length < 2:
        raise ConfigError(f"max_length must be >= 2, got {max_length}")
    categories = tuple(text.split(SEPARATOR)) if text else ()
    sep_tokens = tokenizer.tokenize(SEPARATOR)
    tokens: list[str] = []
    spans: dict[int, tuple[int, int]] = {}
    truncated: list[int] = []
    for idx, name in enumerate(categories):
        name_tokens = tokenizer.tokenize(name)
        lead = sep_tokens if tokens else []
        if truncated or len(tokens) + len(lead) + len(name_tokens) > max_length:
            truncated.append(idx)
            continue
        tokens.extend(lead)
        spans[idx] = (len(tokens), len(tokens) + len(name_tokens))
        tokens.extend(name_tokens)
    if truncated:
        logger.warning(
            "prompt truncated at max_length=%d: %d of %d categories dropped",
            max_length, len(truncated), len(categories),
        )
    return DetectionPrompt(
        text=text,
        categories=categories,
        tokens=tuple(tokens),
        token_ids=tuple(tokenizer.token_id(t) for t in tokens),
        span_map=spans,
        max_length=max_length,
        truncated_categories=tuple(truncated),
        tokenizer_name=tokenizer.name,
    )


def make_target_matrix(
    gt_labels: Sequence[int],
    prompt: DetectionPrompt,
    assignment,
    dataset_name: str = "",
) -> np.ndarray:
    """Binary alignment targets, one row per query.

    ``assignment`` is either a sequence with the matched ground-truth index
    (or None) for every query, or an object exposing ``per_query()``.
    """
    per_query = assignment.per_query() if hasattr(assignment, "per_query") else list(assignment)
    for label in gt_labels:
        if label not in prompt.span_map:
            name = prompt.categories[label] if 0 <= label < len(prompt.categories) else "?"
            raise DataError(
                f"dataset {dataset_name!r}: category {label} ({name!r}) is not in the prompt "
                f"(truncated at max_length={prompt.max_length})"
            )
    target = np.zeros((len(per_query), prompt.max_length), dtype=np.float32)
    for q, gt in enumerate(per_query):
        if gt is None:
            continue
        a, b = prompt.span_map[gt_labels[gt]]
        target[q, a:b] = 1.0
    return target


# ---------------------------------------------------------------------------
# Frozen embedders


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = "stub"
    embed_dim: int = 64
    seed: int = 0
    contextual: bool = True

    def __post_init__(self):
        if self.kind not in ("stub", "external"):
            raise ConfigError(f"unknown embedder kind {self.kind!r}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")

    @property
    def embedder_id(self) -> str:
        if self.kind == "stub":
            return f"stub-v1:dim{self.embed_dim}:seed{self.seed}:ctx{int(self.contextual)}"
        return f"external:dim{self.embed_dim}"


@dataclass(frozen=True, eq=False)
class DatasetEmbedding:
    E: np.ndarray
    F_E: np.ndarray
    valid_mask: np.ndarray
    embedder_id: str = ""

    def __post_init__(self):
        for arr in (self.E, self.F_E, self.valid_mask):
            arr.setflags(write=False)
        if not (len(self.E) == len(self.F_E) == len(self.valid_mask)):
            raise ValueError("embedding row counts disagree")

    @property
    def token_count(self) -> int:
        return self.E.shape[0]


def _token_rng(token: str, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}\x00{token}".encode("utf-8")).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype=np.uint32))


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


class StubEmbedder:
    """Deterministic stand-in for a pretrained text encoder.

    Each token string maps to a seeded random vector; in contextual mode a
    positional code is added and one self-attention layer with frozen random
    weights mixes the valid tokens. A frozen random projection then maps the
    result into the shared ``d``-dimensional space, rows normalized to unit
    length. Everything is float64 numpy, so outputs are bit-stable.
    """

    def __init__(self, spec: EmbedderSpec, d: int = 64):
        if spec.kind != "stub":
            raise ConfigError(f"StubEmbedder cannot serve kind {spec.kind!r}")
        self.spec = spec
        self.d = d
        rng = np.random.default_rng([spec.seed, 0x5EED])
        n = spec.embed_dim
        self.w_q = rng.normal(0.0, n ** -0.5, (n, n))
        self.w_k = rng.normal(0.0, n ** -0.5, (n, n))
        self.w_v = rng.normal(0.0, n ** -0.5, (n, n))
        self.w_proj = rng.normal(0.0, n ** -0.5, (n, d))
        for w in (self.w_q, self.w_k, self.w_v, self.w_proj):
            w.setflags(write=False)

    @property
    def embedder_id(self) -> str:
        return self.spec.embedder_id

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.embedder_id.encode())
        for w in (self.w_q, self.w_k, self.w_v, self.w_proj):
            h.update(w.tobytes())
        return h.hexdigest()

    def token_vectors(self, tokens: Sequence[str]) -> np.ndarray:
        return np.stack([_token_rng(t, self.spec.seed).standard_normal(self.spec.embed_dim)
                         for t in tokens]) if tokens else np.zeros((0, self.spec.embed_dim))

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        x = self.token_vectors(tokens)
        if not self.spec.contextual or len(tokens) == 0:
            return x
        n = self.spec.embed_dim
        pos = np.arange(len(tokens))[:, None]
        freq = np.exp(-np.log(10000.0) * (np.arange(0, n, 2) / n))
        code = np.zeros((len(tokens), n))
        code[:, 0::2] = np.sin(pos * freq)
        code[:, 1::2] = np.cos(pos * freq)[:, : n // 2]
        x = x + code
        logits = (x @ self.w_q) @ (x @ self.w_k).T / np.sqrt(n)
        logits -= logits.max(-1, keepdims=True)
        attn = np.exp(logits)
        attn /= attn.sum(-1, keepdims=True)
        return _layer_norm(x + attn @ (x @ self.w_v))

    def project(self, features: np.ndarray) -> np.ndarray:
        f = features @ self.w_proj
        norm = np.linalg.norm(f, axis=-1, keepdims=True)
        return f / np.maximum(norm, 1e-12)


class ExternalEmbedder:
    """Adapter around a pretrained text encoder.

    ``encode_fn`` maps a token list to a float array of shape
    [len(tokens), embed_dim]. Results go through ``EmbeddingCache`` so the
    same prompt always returns the cached bits.
    """

    def __init__(self, encode_fn: Callable[[Sequence[str]], np.ndarray], spec: EmbedderSpec,
                 d: int = 64, name: str = "external", projection_seed: int = 0):
        self.encode_fn = encode_fn
        self.spec = spec
        self.d = d
        self.name = name
        rng = np.random.default_rng([projection_seed, 0x9E3])
        self.w_proj = rng.normal(0.0, spec.embed_dim ** -0.5, (spec.embed_dim, d))
        self.w_proj.setflags(write=False)

    @property
    def embedder_id(self) -> str:
        return f"external:{self.name}:dim{self.spec.embed_dim}"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.embedder_id.encode() + self.w_proj.tobytes()).hexdigest()

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        out = np.asarray(self.encode_fn(list(tokens)), dtype=np.float64)
        if out.ndim != 2 or out.shape[0] != len(tokens):
            raise ConfigError(f"external embedder returned shape {out.shape} for {len(tokens)} tokens")
        if out.shape[1] != self.spec.embed_dim:
            raise ConfigError(
                f"external embedder width {out.shape[1]} does not match embed_dim {self.spec.embed_dim}"
            )
        return out

    def project(self, features: np.ndarray) -> np.ndarray:
        f = features @ self.w_proj
        return f / np.maximum(np.linalg.norm(f, axis=-1, keepdims=True), 1e-12)


@dataclass
class EmbeddingCache:
    """Content-addressed ``.npz`` store keyed by tokenizer, prompt and embedder."""

    root: Path
    hits: int = field(default=0, init=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(prompt: DetectionPrompt, embedder_id: str, d: int) -> str:
        h = hashlib.sha256()
        for part in (prompt.tokenizer_name, prompt.content_hash(), embedder_id, str(d)):
            h.update(part.encode())
            h.update(b"\x00")
        return h.hexdigest()

    def load(self, key: str) -> DatasetEmbedding | None:
        path = self.root / f"{key}.npz"
        if not path.exists():
            return None
        with np.load(path) as z:
            self.hits += 1
            return DatasetEmbedding(z["E"].copy(), z["F_E"].copy(), z["valid_mask"].copy(),
                                    str(z["embedder_id"]))

    def store(self, key: str, emb: DatasetEmbedding) -> None:
        np.savez(self.root / f"{key}.npz", E=emb.E, F_E=emb.F_E, valid_mask=emb.valid_mask,
                 embedder_id=np.array(emb.embedder_id))


@lru_cache(maxsize=32)
def get_embedder(spec: EmbedderSpec, d: int = 64) -> StubEmbedder:
    return StubEmbedder(spec, d)


def embed_prompt(
    prompt: DetectionPrompt,
    spec: EmbedderSpec | None = None,
    d: int = 64,
    *,
    embedder: StubEmbedder | ExternalEmbedder | None = None,
    cache: EmbeddingCache | None = None,
) -> DatasetEmbedding:
    """Embed a tokenized prompt with a frozen embedder.

    Rows cover the full fixed-length sequence; pad rows are zero and marked
    invalid in ``valid_mask``.
    """
    if embedder is None:
        spec = spec or EmbedderSpec()
        if spec.kind != "stub":
            raise ConfigError("external embedders must be passed explicitly via embedder=")
        embedder = get_embedder(spec, d)
    if embedder.d != d:
        raise ConfigError(f"embedder projects to d={embedder.d}, model expects d={d}")
    if spec is not None and embedder.spec.embed_dim != spec.embed_dim:
        raise ConfigError(
            f"embed_dim mismatch: spec says {spec.embed_dim}, embedder has {embedder.spec.embed_dim}"
        )
    key = None
    if cache is not None:
        key = EmbeddingCache.key(prompt, embedder.embedder_id, d)
        hit = cache.load(key)
        if hit is not None:
            return hit
    n_valid = prompt.valid_length
    E = np.zeros((prompt.max_length, embedder.spec.embed_dim))
    F_E = np.zeros((prompt.max_length, d))
    if n_valid:
        feats = embedder.encode(prompt.tokens)
        E[:n_valid] = feats
        F_E[:n_valid] = embedder.project(feats)
    emb = DatasetEmbedding(E.astype(np.float32), F_E.astype(np.float32), prompt.valid_mask,
                           embedder.embedder_id)
    if cache is not None:
        cache.store(key, emb)
    return emb

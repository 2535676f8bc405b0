"""Conditioning for the inpainter: generic anomaly prompts and perturbed class embeddings."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .transport import ContractError, post_json

TEMPLATE_RESOURCE = "generic_prompts_v1.txt"
TEMPLATE_SHA256 = "e086e45685a5f0081ea0f72201829624d5a9d4a3d7dece4aa3bcc0d7a0894ab0"
N_TEMPLATES = 20
SIGMA_SWEEP = (0.01, 0.1, 1.0, 2.5, 5.0)


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    index: int
    text: str

    def render(self, class_name: str) -> str:
        return self.text.replace("{}", class_name)


@lru_cache(maxsize=None)
def load_templates() -> tuple[PromptTemplate, ...]:
    """Read the shipped templates, refusing to run if the file was altered."""
    raw = resources.files("boxood.resources").joinpath(TEMPLATE_RESOURCE).read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != TEMPLATE_SHA256:
        raise PromptError(f"{TEMPLATE_RESOURCE} checksum mismatch: {digest}")
    lines = raw.decode("utf-8").splitlines()
    if len(lines) != N_TEMPLATES:
        raise PromptError(f"expected {N_TEMPLATES} templates, found {len(lines)}")
    templates = []
    for k, line in enumerate(lines, start=1):
        if line.count("{}") != 1:
            raise PromptError(f"template {k} must hold exactly one placeholder")
        templates.append(PromptTemplate(k, line))
    return tuple(templates)


@dataclass(frozen=True)
class PromptSpec:
    """Either a rendered text prompt or a perturbed embedding, never both."""

    kind: str
    text: str | None = None
    embedding: tuple[float, ...] | None = None
    sigma: float | None = None
    noise_seed: int | None = None
    template_index: int | None = None
    class_name: str | None = None

    def __post_init__(self):
        if self.kind == "generic_text":
            if self.text is None or self.embedding is not None:
                raise PromptError("generic_text prompt needs text and no embedding")
        elif self.kind == "perturbed_embedding":
            if self.embedding is None or self.sigma is None or self.noise_seed is None:
                raise PromptError("perturbed_embedding needs embedding, sigma and noise_seed")
        else:
            raise PromptError(f"unknown prompt kind {self.kind!r}")

    def digest(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        if self.text is not None:
            h.update(self.text.encode("utf-8"))
        if self.embedding is not None:
            h.update(np.asarray(self.embedding, dtype=np.float64).tobytes())
        return h.hexdigest()

    def record(self) -> dict:
        """Compact provenance record for the synthesis manifest."""
        if self.kind == "generic_text":
            return {"kind": self.kind, "template": self.template_index, "text": self.text}
        return {"kind": self.kind, "class_name": self.class_name,
                "sigma": self.sigma, "noise_seed": self.noise_seed}


def render_generic_prompt(template_index: int, class_name: str) -> PromptSpec:
    if not 1 <= template_index <= N_TEMPLATES:
        raise PromptError(f"template index {template_index} outside 1..{N_TEMPLATES}")
    if not class_name:
        raise PromptError("empty class name")
    template = load_templates()[template_index - 1]
    return PromptSpec("generic_text", text=template.render(class_name),
                      template_index=template_index, class_name=class_name)


def random_generic_prompt(class_name: str, seed: int) -> PromptSpec:
    rng = np.random.default_rng(seed)
    return render_generic_prompt(int(rng.integers(1, N_TEMPLATES + 1)), class_name)


@dataclass(frozen=True)
class ClassEmbedding:
    class_name: str
    vector: np.ndarray
    embedder_id: str


class MockEmbedder:
    """Deterministic stand-in for a text encoder.

    Each text maps to a unit-norm Gaussian direction seeded by a SHA-256 of
    the text, so results are stable across processes and platforms.
    """

    max_in_flight = 64

    def __init__(self, dim: int = 64):
        self.dim = dim
        self.embedder_id = f"mock-embedder-d{dim}"

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for k, text in enumerate(texts):
            key = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
            v = np.random.default_rng(key).standard_normal(self.dim)
            out[k] = v / np.linalg.norm(v)
        return out


class HttpEmbedder:
    """Client for an embedding service speaking ``{"texts"} -> {"dim", "vectors"}``."""

    def __init__(self, url: str, embedder_id: str | None = None, timeout: float = 30.0,
                 retries: int = 2, max_in_flight: int = 4, expected_dim: int | None = None):
        self.url = url
        self.embedder_id = embedder_id or url
        self.timeout = timeout
        self.retries = retries
        self.max_in_flight = max_in_flight
        self.dim = expected_dim

    def embed(self, texts: list[str]) -> np.ndarray:
        body = post_json(self.url, {"texts": list(texts)}, timeout=self.timeout, retries=self.retries)
        try:
            dim = int(body["dim"])
            vectors = np.asarray(body["vectors"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(f"malformed embedder response: {exc!r}") from exc
        if vectors.shape != (len(texts), dim):
            raise ContractError(f"expected {len(texts)} vectors of dim {dim}, got shape {vectors.shape}")
        if self.dim is None:
            self.dim = dim
        elif dim != self.dim:
            raise ContractError(f"embedder dimension changed from {self.dim} to {dim}")
        return vectors


def embed_class_name(class_name: str, embedder) -> ClassEmbedding:
    if not class_name:
        raise PromptError("empty class name")
    vectors = embedder.embed([class_name])
    vec = np.asarray(vectors[0], dtype=np.float64)
    if vectors.shape[0] != 1 or (embedder.dim is not None and vec.shape != (embedder.dim,)):
        raise ContractError(f"embedder returned shape {np.shape(vectors)} for one text")
    if not np.all(np.isfinite(vec)):
        raise ContractError("embedder returned non-finite components")
    return ClassEmbedding(class_name, vec, embedder.embedder_id)


def perturb_embedding(zeta: ClassEmbedding, sigma: float, noise_seed: int) -> PromptSpec:
    """Move the class embedding by isotropic Gaussian noise of scale ``sigma``."""
    if not sigma >= 0:
        raise PromptError(f"sigma must be non-negative, got {sigma}")
    eps = np.random.default_rng(noise_seed).standard_normal(zeta.vector.shape[0])
    rho = zeta.vector + sigma * eps
    if not np.all(np.isfinite(rho)):
        raise PromptError("perturbed embedding is not finite")
    return PromptSpec("perturbed_embedding", embedding=tuple(rho.tolist()), sigma=float(sigma),
                      noise_seed=int(noise_seed), class_name=zeta.class_name)

import hashlib
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from app.models.errors import DataFormatError, DimensionError, DomainError
from app.models.graph import SceneObject
from app.services.numerics import (
    ParameterRegistry,
    Tensor,
    add_bias,
    gelu,
    matmul,
    tensor,
)

logger = logging.getLogger(__name__)


class EmbeddingProvider(ABC):
    """
    Total, deterministic map word -> vector of length ``dim``
    """
    def __init__(self, dim: int):
        self.dim = dim

    @abstractmethod
    def __call__(self, word: str) -> np.ndarray:
        ...

    def matrix(self, words: Sequence[str]) -> np.ndarray:
        return np.stack([self(w) for w in words])


class HashEmbeddingProvider(EmbeddingProvider):
    """
    Seeded pseudo-random vectors keyed by a stable hash of the word
    """
    def __init__(self, dim: int = 50, seed: int = 0):
        super().__init__(dim)
        self.seed = seed
        self._cache: Dict[str, np.ndarray] = {}

    def __call__(self, word: str) -> np.ndarray:
        vector = self._cache.get(word)
        if vector is None:
            digest = hashlib.blake2b(f"{self.seed}:{word}".encode('utf-8'), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, 'little'))
            vector = rng.normal(0.0, 1.0 / np.sqrt(self.dim), size=self.dim)
            vector.setflags(write=False)
            self._cache[word] = vector
        return vector


class FileEmbeddingProvider(EmbeddingProvider):
    """
    Word vectors read from a text file ("word v1 v2 ... vd" per line); words
    missing from the file fall back to hash vectors
    """
    def __init__(self, path: str, seed: int = 0):
        vectors: Dict[str, np.ndarray] = {}
        dim: Optional[int] = None
        with open(path, 'r', encoding='utf-8') as handle:
            for line_no, line in enumerate(handle, start=1):
                parts = line.rstrip().split(' ')
                if len(parts) < 2:
                    continue
                try:
                    values = np.array([float(v) for v in parts[1:]])
                except ValueError as e:
                    raise DataFormatError(f"Non-numeric vector entry in {path}", line=line_no) from e
                if dim is None:
                    dim = values.size
                elif values.size != dim:
                    raise DataFormatError(f"Expected {dim} values, found {values.size}", line=line_no)
                values.setflags(write=False)
                vectors[parts[0]] = values
        if dim is None:
            raise DataFormatError(f"No word vectors found in {path}")
        super().__init__(dim)
        self.path = path
        self.seed = seed
        self.vectors = vectors
        self.fallback = HashEmbeddingProvider(dim, seed)
        logger.info(f"Loaded {len(vectors)} word vectors of dimension {dim} from {path}")

    def __call__(self, word: str) -> np.ndarray:
        vector = self.vectors.get(word)
        return vector if vector is not None else self.fallback(word)


def create_provider(kind: str, d_emb: int, seed: int = 0, path: str = '') -> EmbeddingProvider:
    if kind == 'hash':
        return HashEmbeddingProvider(d_emb, seed)
    if kind == 'file':
        if not Path(path).is_file():
            raise DataFormatError(f"Word-vector file not found: {path}")
        provider = FileEmbeddingProvider(path, seed)
        if provider.dim != d_emb:
            raise DimensionError(f"Word vectors have dimension {provider.dim}, configuration says {d_emb}")
        return provider
    raise DomainError(f"Unknown embedding provider '{kind}'")


class LabelMLP:
    """Two affine layers with a GELU in between: d_emb -> hidden -> d_model"""

    def __init__(self, registry: ParameterRegistry, prefix: str, d_in: int, hidden: int, d_out: int):
        self.w1 = registry.glorot(f"{prefix}.w1", d_in, hidden)
        self.b1 = registry.zeros(f"{prefix}.b1", (1, hidden))
        self.w2 = registry.glorot(f"{prefix}.w2", hidden, d_out)
        self.b2 = registry.zeros(f"{prefix}.b2", (1, d_out))

    def __call__(self, x: Tensor) -> Tensor:
        h = gelu(add_bias(matmul(x, self.w1), self.b1))
        return add_bias(matmul(h, self.w2), self.b2)


class AffineProjection:
    def __init__(self, registry: ParameterRegistry, prefix: str, d_in: int, d_out: int):
        self.d_in = d_in
        self.w = registry.glorot(f"{prefix}.w", d_in, d_out)
        self.b = registry.zeros(f"{prefix}.b", (1, d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.d_in:
            raise DimensionError(f"Projection expects {self.d_in} inputs, got {x.shape[1]}")
        return add_bias(matmul(x, self.w), self.b)


def embed_label_node(word: str, provider: EmbeddingProvider, mlp: LabelMLP) -> Tensor:
    return mlp(tensor(provider(word)[None, :]))


def embed_label_nodes(words: Sequence[str], provider: EmbeddingProvider, mlp: LabelMLP) -> Tensor:
    """Row-batched embed_label_node"""
    return mlp(tensor(provider.matrix(words)))


def embed_coordinate_node(xy, projection: AffineProjection) -> Tensor:
    return embed_coordinate_nodes([xy], projection)


def embed_coordinate_nodes(points, projection: AffineProjection) -> Tensor:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if (pts < 0).any() or (pts > 1).any():
        logger.error(f"Coordinate outside [0,1]^2: {pts.tolist()}")
        raise DomainError('Coordinate components must lie in [0, 1]')
    return projection(tensor(pts))


def synthesize_visual_feature(obj: SceneObject, provider: EmbeddingProvider, sigma: float,
                              seed: int, image_id: str = '') -> np.ndarray:
    """
    Stand-in for detector features: the ground-truth label's word vector plus
    Gaussian noise, seeded per (seed, image, box)
    """
    label = obj.ground_truth or obj.top_label
    base = np.array(provider(label), dtype=np.float64)
    if sigma == 0:
        return base
    digest = hashlib.blake2b(f"{seed}:{image_id}:{obj.box_id}".encode('utf-8'), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, 'little'))
    return base + rng.normal(0.0, sigma, size=base.size)


def raw_visual_feature(obj: SceneObject, d_v: int, provider: EmbeddingProvider, sigma: float,
                       seed: int, image_id: str = '') -> np.ndarray:
    if obj.feature is not None:
        feature = np.asarray(obj.feature, dtype=np.float64)
        if feature.size != d_v:
            logger.error(f"Box {obj.box_id}: feature length {feature.size} != d_v {d_v}")
            raise DimensionError(f"Box {obj.box_id} supplies a feature of length {feature.size}, expected {d_v}")
        return feature
    return synthesize_visual_feature(obj, provider, sigma, seed, image_id)


def embed_visual_node(obj: SceneObject, image_id: str, projection: AffineProjection,
                      provider: EmbeddingProvider, sigma: float, seed: int) -> Tensor:
    feature = raw_visual_feature(obj, projection.d_in, provider, sigma, seed, image_id)
    return projection(tensor(feature[None, :]))

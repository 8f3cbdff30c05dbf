"""Synthetic cross-domain retrieval datasets with controllable difficulty.

The generative model, in the exact order the random draws are taken from
a single ``numpy`` PCG64 generator seeded with ``config.seed`` (this
draw order is part of the reference-dataset contract; changing it
changes every downstream frozen number):

1. Category centroids: ``standard_normal((num_tlcs, dim))``, each row
   scaled to unit norm.
2. Domain-shift direction: ``standard_normal(dim)``, scaled to unit
   norm.  One global direction shared by every query image.
3. Confuser anchors: for each category ``t`` in ascending order,
   ``integers(0, num_tlcs - 1, size=n_confusers)`` mapped to skip ``t``
   itself.  The confusers of a category are its first
   ``floor(confuser_fraction * products_per_tlc)`` product slots.
4. Product offsets: ``standard_normal((num_tlcs, products_per_tlc, dim))``.
5. Catalog image noise:
   ``standard_normal((num_tlcs, products_per_tlc, catalog_images_per_product, dim))``.
6. Query image noise:
   ``standard_normal((num_tlcs, products_per_tlc, query_images_per_product, dim))``.

A product centroid is its anchor centroid (its own category's, or for a
confuser a uniformly chosen different category's) plus ``tlc_spread``
times its offset.  Catalog images add ``image_noise`` times their noise
draw; query images additionally add ``domain_shift`` times the global
shift direction and use ``query_noise`` as their noise scale.  Every
emitted vector is scaled to unit norm (in float64, then cast to
float32).

Ids are dense and sequential: catalog-domain images first, then query
images, both in (category, product, image) order.  Product ids are
``t * products_per_tlc + p``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .catalog import (
    Catalog,
    CatalogImage,
    Domain,
    EmbeddingMatrix,
    save_catalog,
    save_embeddings,
    save_ground_truth,
)
from .errors import ConfigError


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    num_tlcs: int = 32
    products_per_tlc: int = 100
    catalog_images_per_product: int = 10
    query_images_per_product: int = 3
    dim: int = 64
    tlc_spread: float = 0.15
    image_noise: float = 0.05
    query_noise: float = 0.12
    domain_shift: float = 2.0
    confuser_fraction: float = 0.05

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError(f"dim must be at least 2, got {self.dim}")
        for name in ("num_tlcs", "products_per_tlc", "catalog_images_per_product",
                     "query_images_per_product"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("tlc_spread", "image_noise", "query_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.confuser_fraction <= 1.0:
            raise ConfigError("confuser_fraction must lie in [0, 1]")
        if self.num_tlcs == 1 and self.confusers_per_tlc >= 1:
            raise ConfigError("confusers need a second category to anchor on")

    @property
    def confusers_per_tlc(self) -> int:
        return math.floor(self.confuser_fraction * self.products_per_tlc)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class SynthDataset:
    config: SynthConfig
    catalog: Catalog
    embeddings: EmbeddingMatrix          # both domains, catalog rows first
    ground_truth: dict[int, tuple[int, int]]   # query image id -> (product, tlc)
    confuser_products: frozenset[int] = field(default_factory=frozenset)

    @property
    def catalog_image_count(self) -> int:
        return sum(1 for i in self.catalog.images if i.domain is Domain.CATALOG)

    @property
    def query_image_count(self) -> int:
        return sum(1 for i in self.catalog.images if i.domain is Domain.QUERY)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if not np.all(norms > 0.0):
        raise ConfigError("degenerate draw produced a zero vector; change the seed")
    return a / norms


def generate(config: SynthConfig) -> SynthDataset:
    """Build the full dataset for ``config``.  Pure function of the config."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    T, P, D = config.num_tlcs, config.products_per_tlc, config.dim
    n_cat = config.catalog_images_per_product
    n_q = config.query_images_per_product
    n_conf = config.confusers_per_tlc

    tlc_centroids = _unit_rows(rng.standard_normal((T, D)))
    shift_dir = _unit_rows(rng.standard_normal(D)[None, :])[0]

    anchor_tlc = np.repeat(np.arange(T)[:, None], P, axis=1)
    for t in range(T):
        if n_conf:
            draws = rng.integers(0, T - 1, size=n_conf)
            anchor_tlc[t, :n_conf] = np.where(draws >= t, draws + 1, draws)

    product_offsets = rng.standard_normal((T, P, D))
    catalog_noise = rng.standard_normal((T, P, n_cat, D))
    query_noise = rng.standard_normal((T, P, n_q, D))

    product_centroids = tlc_centroids[anchor_tlc] + config.tlc_spread * product_offsets
    catalog_vecs = product_centroids[:, :, None, :] + config.image_noise * catalog_noise
    query_vecs = (
        product_centroids[:, :, None, :]
        + config.domain_shift * shift_dir
        + config.query_noise * query_noise
    )
    catalog_vecs = _unit_rows(catalog_vecs.reshape(T * P * n_cat, D)).astype(np.float32)
    query_vecs = _unit_rows(query_vecs.reshape(T * P * n_q, D)).astype(np.float32)

    images: list[CatalogImage] = []
    ground_truth: dict[int, tuple[int, int]] = {}
    next_id = 0
    for t in range(T):
        for p in range(P):
            product_id = t * P + p
            for _ in range(n_cat):
                images.append(CatalogImage(next_id, product_id, t, Domain.CATALOG))
                next_id += 1
    for t in range(T):
        for p in range(P):
            product_id = t * P + p
            for _ in range(n_q):
                images.append(CatalogImage(next_id, product_id, t, Domain.QUERY))
                ground_truth[next_id] = (product_id, t)
                next_id += 1

    ids = np.arange(next_id, dtype=np.uint64)
    vectors = np.concatenate([catalog_vecs, query_vecs], axis=0)
    embeddings = EmbeddingMatrix(dim=D, ids=ids, vectors=vectors)
    confusers = frozenset(t * P + p for t in range(T) for p in range(n_conf))
    return SynthDataset(
        config=config,
        catalog=Catalog.from_images(images),
        embeddings=embeddings,
        ground_truth=ground_truth,
        confuser_products=confusers,
    )


def write_dataset(dataset: SynthDataset, out_dir) -> dict[str, str]:
    """Write embeddings.cemb, catalog.jsonl and ground_truth.jsonl under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "embeddings": str(out / "embeddings.cemb"),
        "catalog": str(out / "catalog.jsonl"),
        "ground_truth": str(out / "ground_truth.jsonl"),
    }
    save_embeddings(dataset.embeddings, paths["embeddings"])
    save_catalog(dataset.catalog, paths["catalog"])
    save_ground_truth(dataset.ground_truth, paths["ground_truth"])
    return paths


# Frozen reference configuration: every regression number in the
# benchmark suite is pinned to this exact config (see cli.REFERENCE_FROZEN).
REFERENCE_CONFIG = SynthConfig()

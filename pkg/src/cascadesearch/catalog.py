"""Gallery data model: the image/product/category hierarchy and its file formats.

Two formats are defined here and used by everything else:

* ``CEMB`` embedding file, little-endian binary: magic ``CEMB``, u16
  version (= 1), u16 reserved (= 0), u32 dim, u64 count, then ``count``
  records of u64 image id followed by ``dim`` float32 components.  No
  padding, no trailing bytes.
* Catalog JSONL: one object per image with exactly the keys ``image_id``,
  ``product_id``, ``tlc_id``, ``domain`` ("catalog" or "query"), UTF-8,
  LF line endings.

Vectors are stored as written; unit-length normalization is an explicit
step (:meth:`EmbeddingMatrix.normalized`) so that save/load round-trips
are bit-exact.  Zero vectors and non-finite components are rejected at
load because they cannot survive that normalization.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    CorruptionError,
    DataError,
    EmptyInputError,
    FormatError,
    HierarchyError,
    MismatchError,
    UniquenessError,
)

CEMB_MAGIC = b"CEMB"
CEMB_VERSION = 1

# magic, version, reserved, dim, count
_CEMB_HEADER = struct.Struct("<4sHHIQ")

_U32_MAX = 2**32 - 1
_U64_MAX = 2**64 - 1

_CATALOG_KEYS = ("image_id", "product_id", "tlc_id", "domain")


class Domain(str, enum.Enum):
    """Which side of the domain gap an image sits on."""

    CATALOG = "catalog"
    QUERY = "query"


@dataclass(frozen=True)
class CatalogImage:
    image_id: int
    product_id: int
    tlc_id: int
    domain: Domain


@dataclass(eq=False)
class Catalog:
    """All images of a dataset plus the product -> category mapping.

    Built through :meth:`from_images`, which enforces id uniqueness and
    the single-category-per-product rule.  Treat instances as immutable.
    """

    images: tuple[CatalogImage, ...]
    product_to_tlc: dict[int, int]
    tlc_ids: tuple[int, ...]

    @classmethod
    def from_images(cls, images) -> "Catalog":
        images = tuple(images)
        seen: set[int] = set()
        product_to_tlc: dict[int, int] = {}
        for img in images:
            if img.image_id in seen:
                raise UniquenessError(f"duplicate image_id {img.image_id}")
            seen.add(img.image_id)
            prior = product_to_tlc.get(img.product_id)
            if prior is None:
                product_to_tlc[img.product_id] = img.tlc_id
            elif prior != img.tlc_id:
                raise HierarchyError(
                    f"product {img.product_id} mapped to tlc {prior} and "
                    f"tlc {img.tlc_id}; each product belongs to exactly one"
                )
        tlc_ids = tuple(sorted({img.tlc_id for img in images}))
        return cls(images=images, product_to_tlc=product_to_tlc, tlc_ids=tlc_ids)

    @cached_property
    def image_ids(self) -> frozenset[int]:
        return frozenset(img.image_id for img in self.images)

    @cached_property
    def image_to_product(self) -> dict[int, int]:
        return {img.image_id: img.product_id for img in self.images}

    @cached_property
    def image_to_tlc(self) -> dict[int, int]:
        return {img.image_id: img.tlc_id for img in self.images}

    def __len__(self) -> int:
        return len(self.images)


@dataclass(eq=False)
class EmbeddingMatrix:
    """Dense float32 vectors keyed by image id, in file order."""

    dim: int
    ids: np.ndarray       # (count,) uint64
    vectors: np.ndarray   # (count, dim) float32

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.dim <= 0:
            raise EmptyInputError("embedding dim must be positive")
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.dim:
            raise ValueError(
                f"vectors shape {self.vectors.shape} does not match dim {self.dim}"
            )
        if self.ids.shape != (self.vectors.shape[0],):
            raise ValueError("ids and vectors row counts differ")

    @property
    def count(self) -> int:
        return int(self.ids.shape[0])

    @cached_property
    def row_of_id(self) -> dict[int, int]:
        return {int(i): row for row, i in enumerate(self.ids)}

    def vector_for(self, image_id: int) -> np.ndarray:
        return self.vectors[self.row_of_id[int(image_id)]]

    def subset(self, image_ids) -> "EmbeddingMatrix":
        """Rows for the given ids, in the order the ids are given."""
        rows = [self.row_of_id[int(i)] for i in image_ids]
        return EmbeddingMatrix(
            dim=self.dim, ids=self.ids[rows], vectors=self.vectors[rows]
        )

    def normalized(self) -> "EmbeddingMatrix":
        """Copy with every row scaled to unit L2 norm."""
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if self.count and not np.all(norms > 0.0):
            bad = int(np.flatnonzero(norms == 0.0)[0])
            raise DataError(f"zero vector at row {bad} (image_id {int(self.ids[bad])})")
        scaled = (self.vectors.astype(np.float64) / norms[:, None]) if self.count else self.vectors
        return EmbeddingMatrix(
            dim=self.dim, ids=self.ids.copy(), vectors=scaled.astype(np.float32)
        )


def save_embeddings(matrix: EmbeddingMatrix, path) -> None:
    """Write a CEMB file.  Empty matrices are not representable on disk."""
    if matrix.count == 0:
        raise EmptyInputError("refusing to write a CEMB file with zero rows")
    record = np.dtype([("id", "<u8"), ("vec", "<f4", (matrix.dim,))])
    out = np.empty(matrix.count, dtype=record)
    out["id"] = matrix.ids
    out["vec"] = matrix.vectors
    header = _CEMB_HEADER.pack(CEMB_MAGIC, CEMB_VERSION, 0, matrix.dim, matrix.count)
    Path(path).write_bytes(header + out.tobytes())


def load_embeddings(path) -> EmbeddingMatrix:
    data = Path(path).read_bytes()
    if len(data) < _CEMB_HEADER.size:
        raise CorruptionError(f"{path}: file shorter than the CEMB header")
    magic, version, _reserved, dim, count = _CEMB_HEADER.unpack_from(data, 0)
    if magic != CEMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CEMB_MAGIC!r}")
    if version != CEMB_VERSION:
        raise FormatError(f"{path}: unsupported CEMB version {version}")
    if dim == 0 or count == 0:
        raise EmptyInputError(f"{path}: CEMB file declares dim={dim} count={count}")
    record = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
    expected = _CEMB_HEADER.size + count * record.itemsize
    if len(data) != expected:
        raise CorruptionError(
            f"{path}: expected {expected} bytes for {count} records of dim {dim}, "
            f"found {len(data)}"
        )
    body = np.frombuffer(data, dtype=record, offset=_CEMB_HEADER.size, count=count)
    ids = body["id"].copy()
    vectors = body["vec"].copy()
    finite = np.isfinite(vectors).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise DataError(
            f"{path}: non-finite component at row {bad} (image_id {int(ids[bad])})"
        )
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    if not np.all(norms > 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise DataError(f"{path}: zero vector at row {bad} (image_id {int(ids[bad])})")
    return EmbeddingMatrix(dim=int(dim), ids=ids, vectors=vectors)


def _require_uint(obj: dict, key: str, bound: int, lineno: int) -> int:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise FormatError(f"line {lineno}: {key} must be an integer")
    if not 0 <= value <= bound:
        raise FormatError(f"line {lineno}: {key}={value} out of range")
    return value


def save_catalog(catalog: Catalog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for img in catalog.images:
            fh.write(
                json.dumps(
                    {
                        "image_id": img.image_id,
                        "product_id": img.product_id,
                        "tlc_id": img.tlc_id,
                        "domain": img.domain.value,
                    }
                )
                + "\n"
            )


def load_catalog(path) -> Catalog:
    images = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                raise FormatError(f"{path}: blank line {lineno}")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
            if not isinstance(obj, dict) or set(obj) != set(_CATALOG_KEYS):
                raise FormatError(
                    f"{path}: line {lineno}: expected exactly keys {_CATALOG_KEYS}"
                )
            image_id = _require_uint(obj, "image_id", _U64_MAX, lineno)
            product_id = _require_uint(obj, "product_id", _U64_MAX, lineno)
            tlc_id = _require_uint(obj, "tlc_id", _U32_MAX, lineno)
            try:
                domain = Domain(obj["domain"])
            except ValueError:
                raise FormatError(
                    f"{path}: line {lineno}: unknown domain {obj['domain']!r}"
                ) from None
            images.append(
                CatalogImage(
                    image_id=image_id,
                    product_id=product_id,
                    tlc_id=tlc_id,
                    domain=domain,
                )
            )
    return Catalog.from_images(images)


def save_ground_truth(truth: dict[int, tuple[int, int]], path) -> None:
    """Write query ground truth as JSONL, one image per line, in id order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for image_id in sorted(truth):
            product_id, tlc_id = truth[image_id]
            fh.write(
                json.dumps(
                    {"image_id": image_id, "product_id": product_id, "tlc_id": tlc_id}
                )
                + "\n"
            )


def load_ground_truth(path) -> dict[int, tuple[int, int]]:
    truth: dict[int, tuple[int, int]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                raise FormatError(f"{path}: blank line {lineno}")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
            if not isinstance(obj, dict) or set(obj) != {"image_id", "product_id", "tlc_id"}:
                raise FormatError(f"{path}: line {lineno}: bad ground-truth record")
            image_id = _require_uint(obj, "image_id", _U64_MAX, lineno)
            if image_id in truth:
                raise UniquenessError(f"{path}: duplicate ground-truth image_id {image_id}")
            truth[image_id] = (
                _require_uint(obj, "product_id", _U64_MAX, lineno),
                _require_uint(obj, "tlc_id", _U32_MAX, lineno),
            )
    return truth


def partition_by_tlc(catalog: Catalog, domain: Domain) -> dict[int, list[int]]:
    """Image ids of the given domain, grouped by category.

    Categories with no images in that domain simply do not appear; no
    empty partitions are created.
    """
    parts: dict[int, list[int]] = {}
    for img in catalog.images:
        if img.domain is domain:
            parts.setdefault(img.tlc_id, []).append(img.image_id)
    return parts


@dataclass(frozen=True)
class ValidationSummary:
    images_total: int
    per_domain: dict[str, int]
    per_tlc: dict[int, int]
    products: int
    tlcs: int

    def as_dict(self) -> dict:
        return {
            "images_total": self.images_total,
            "per_domain": dict(self.per_domain),
            "per_tlc": {str(k): v for k, v in sorted(self.per_tlc.items())},
            "products": self.products,
            "tlcs": self.tlcs,
        }


def validate(catalog: Catalog, embeddings: EmbeddingMatrix) -> ValidationSummary:
    """Check that catalog and embeddings describe the same id set.

    Returns per-category and per-domain counts on success; raises
    :class:`MismatchError` listing the offending ids otherwise.
    """
    catalog_ids = catalog.image_ids
    embedding_ids = frozenset(int(i) for i in embeddings.ids)
    if len(embedding_ids) != embeddings.count:
        raise UniquenessError("embedding file repeats an image_id")
    missing_emb = sorted(catalog_ids - embedding_ids)
    missing_cat = sorted(embedding_ids - catalog_ids)
    if missing_emb or missing_cat:
        raise MismatchError(
            "catalog and embeddings disagree: "
            f"{len(missing_emb)} catalog ids lack embeddings "
            f"(first few: {missing_emb[:5]}), "
            f"{len(missing_cat)} embeddings lack catalog rows "
            f"(first few: {missing_cat[:5]})",
            missing_embeddings=missing_emb,
            missing_catalog=missing_cat,
        )
    if embeddings.count and not np.isfinite(embeddings.vectors).all():
        raise DataError("embedding matrix contains non-finite components")
    per_domain = {d.value: 0 for d in Domain}
    per_tlc: dict[int, int] = {}
    for img in catalog.images:
        per_domain[img.domain.value] += 1
        per_tlc[img.tlc_id] = per_tlc.get(img.tlc_id, 0) + 1
    return ValidationSummary(
        images_total=len(catalog.images),
        per_domain=per_domain,
        per_tlc=per_tlc,
        products=len(catalog.product_to_tlc),
        tlcs=len(catalog.tlc_ids),
    )


def dataset_fingerprint(catalog: Catalog, embeddings: EmbeddingMatrix) -> str:
    """Content hash binding a catalog to its embeddings.

    Reports carry this value so that comparisons across different data
    can be rejected.
    """
    h = hashlib.sha256()
    h.update(b"CSFP1")
    h.update(struct.pack("<IQ", embeddings.dim, embeddings.count))
    h.update(embeddings.ids.tobytes())
    h.update(embeddings.vectors.tobytes())
    for img in catalog.images:
        h.update(
            f"{img.image_id},{img.product_id},{img.tlc_id},{img.domain.value}\n".encode()
        )
    return h.hexdigest()

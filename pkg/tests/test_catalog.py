from __future__ import annotations

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadesearch.catalog import (
    Catalog,
    CatalogImage,
    Domain,
    EmbeddingMatrix,
    dataset_fingerprint,
    load_catalog,
    load_embeddings,
    load_ground_truth,
    partition_by_tlc,
    save_catalog,
    save_embeddings,
    save_ground_truth,
    validate,
)
from cascadesearch.errors import (
    CorruptionError,
    DataError,
    EmptyInputError,
    FormatError,
    HierarchyError,
    MismatchError,
    UniquenessError,
)


def _matrix(seed: int, count: int, dim: int) -> EmbeddingMatrix:
    rng = np.random.default_rng(seed)
    vectors = rng.standard_normal((count, dim)).astype(np.float32)
    ids = np.arange(count, dtype=np.uint64) * 3 + 7
    return EmbeddingMatrix(dim=dim, ids=ids, vectors=vectors)


def _image(image_id, product_id, tlc_id, domain=Domain.CATALOG):
    return CatalogImage(image_id=image_id, product_id=product_id, tlc_id=tlc_id, domain=domain)


class TestEmbeddingFile:
    def test_round_trip_bit_exact(self, tmp_path):
        m = _matrix(0, 23, 5)
        p = tmp_path / "e.cemb"
        save_embeddings(m, p)
        loaded = load_embeddings(p)
        assert loaded.dim == m.dim
        assert loaded.ids.tobytes() == m.ids.tobytes()
        assert loaded.vectors.tobytes() == m.vectors.tobytes()
        # writing the loaded copy reproduces the file byte for byte
        p2 = tmp_path / "e2.cemb"
        save_embeddings(loaded, p2)
        assert p.read_bytes() == p2.read_bytes()

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), count=st.integers(1, 40), dim=st.integers(1, 17))
    def test_round_trip_property(self, tmp_path_factory, seed, count, dim):
        m = _matrix(seed, count, dim)
        p = tmp_path_factory.mktemp("cemb") / "e.cemb"
        save_embeddings(m, p)
        loaded = load_embeddings(p)
        assert loaded.vectors.tobytes() == m.vectors.tobytes()
        assert loaded.ids.tolist() == m.ids.tolist()

    def test_header_layout(self, tmp_path):
        m = _matrix(1, 2, 3)
        p = tmp_path / "e.cemb"
        save_embeddings(m, p)
        raw = p.read_bytes()
        magic, version, reserved, dim, count = struct.unpack_from("<4sHHIQ", raw, 0)
        assert magic == b"CEMB"
        assert (version, reserved) == (1, 0)
        assert (dim, count) == (3, 2)
        assert len(raw) == 20 + 2 * (8 + 4 * 3)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "e.cemb"
        m = _matrix(2, 2, 3)
        save_embeddings(m, p)
        raw = bytearray(p.read_bytes())
        raw[0:4] = b"XEMB"
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_embeddings(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "e.cemb"
        save_embeddings(_matrix(3, 2, 3), p)
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_embeddings(p)

    def test_truncation_is_corruption(self, tmp_path):
        p = tmp_path / "e.cemb"
        save_embeddings(_matrix(4, 5, 4), p)
        raw = p.read_bytes()
        p.write_bytes(raw[:-3])
        with pytest.raises(CorruptionError):
            load_embeddings(p)

    def test_trailing_bytes_are_corruption(self, tmp_path):
        p = tmp_path / "e.cemb"
        save_embeddings(_matrix(5, 5, 4), p)
        p.write_bytes(p.read_bytes() + b"\x00")
        with pytest.raises(CorruptionError):
            load_embeddings(p)

    def test_zero_dim_or_count_is_empty_input(self, tmp_path):
        p = tmp_path / "e.cemb"
        p.write_bytes(struct.pack("<4sHHIQ", b"CEMB", 1, 0, 0, 0))
        with pytest.raises(EmptyInputError):
            load_embeddings(p)
        p.write_bytes(struct.pack("<4sHHIQ", b"CEMB", 1, 0, 8, 0))
        with pytest.raises(EmptyInputError):
            load_embeddings(p)

    def test_non_finite_names_the_row(self, tmp_path):
        m = _matrix(6, 4, 3)
        m.vectors[2, 1] = np.nan
        p = tmp_path / "e.cemb"
        save_embeddings(m, p)
        with pytest.raises(DataError, match="row 2"):
            load_embeddings(p)

    def test_zero_vector_rejected_at_load(self, tmp_path):
        m = _matrix(7, 4, 3)
        m.vectors[1] = 0.0
        p = tmp_path / "e.cemb"
        save_embeddings(m, p)
        with pytest.raises(DataError, match="row 1"):
            load_embeddings(p)

    def test_refuses_to_save_empty(self, tmp_path):
        m = EmbeddingMatrix(dim=3, ids=np.zeros(0, np.uint64), vectors=np.zeros((0, 3), np.float32))
        with pytest.raises(EmptyInputError):
            save_embeddings(m, tmp_path / "e.cemb")


class TestNormalization:
    def test_normalized_rows_unit_norm(self):
        m = _matrix(8, 50, 7)
        n = m.normalized()
        norms = np.linalg.norm(n.vectors.astype(np.float64), axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-5)
        # original untouched
        assert not np.allclose(np.linalg.norm(m.vectors, axis=1), 1.0)

    def test_normalize_rejects_zero_vector(self):
        v = np.ones((3, 4), np.float32)
        v[2] = 0.0
        m = EmbeddingMatrix(dim=4, ids=np.arange(3, dtype=np.uint64), vectors=v)
        with pytest.raises(DataError):
            m.normalized()


class TestCatalogFile:
    def _catalog(self):
        return Catalog.from_images(
            [
                _image(0, 100, 1),
                _image(1, 100, 1),
                _image(2, 101, 2),
                _image(3, 101, 2, Domain.QUERY),
            ]
        )

    def test_round_trip_bit_exact(self, tmp_path):
        c = self._catalog()
        p = tmp_path / "c.jsonl"
        save_catalog(c, p)
        loaded = load_catalog(p)
        assert loaded.images == c.images
        p2 = tmp_path / "c2.jsonl"
        save_catalog(loaded, p2)
        assert p.read_bytes() == p2.read_bytes()

    def test_lines_are_lf_terminated_json(self, tmp_path):
        p = tmp_path / "c.jsonl"
        save_catalog(self._catalog(), p)
        raw = p.read_bytes()
        assert b"\r" not in raw
        lines = raw.decode("utf-8").splitlines()
        assert len(lines) == 4
        rec = json.loads(lines[0])
        assert rec == {"image_id": 0, "product_id": 100, "tlc_id": 1, "domain": "catalog"}

    def test_duplicate_image_id(self, tmp_path):
        p = tmp_path / "c.jsonl"
        rows = [
            {"image_id": 5, "product_id": 1, "tlc_id": 0, "domain": "catalog"},
            {"image_id": 5, "product_id": 2, "tlc_id": 0, "domain": "catalog"},
        ]
        p.write_text("".join(json.dumps(r) + "\n" for r in rows))
        with pytest.raises(UniquenessError, match="5"):
            load_catalog(p)

    def test_product_in_two_tlcs(self, tmp_path):
        p = tmp_path / "c.jsonl"
        rows = [
            {"image_id": 0, "product_id": 9, "tlc_id": 0, "domain": "catalog"},
            {"image_id": 1, "product_id": 9, "tlc_id": 3, "domain": "query"},
        ]
        p.write_text("".join(json.dumps(r) + "\n" for r in rows))
        with pytest.raises(HierarchyError, match="product 9"):
            load_catalog(p)

    def test_unknown_domain(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text('{"image_id": 0, "product_id": 1, "tlc_id": 0, "domain": "mobile"}\n')
        with pytest.raises(FormatError, match="domain"):
            load_catalog(p)

    def test_malformed_json_and_wrong_keys(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text("{not json}\n")
        with pytest.raises(FormatError, match="line 1"):
            load_catalog(p)
        p.write_text('{"image_id": 0, "product_id": 1, "tlc_id": 0}\n')
        with pytest.raises(FormatError):
            load_catalog(p)
        p.write_text(
            '{"image_id": 0, "product_id": 1, "tlc_id": 0, "domain": "query", "extra": 1}\n'
        )
        with pytest.raises(FormatError):
            load_catalog(p)

    def test_type_and_range_checks(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text('{"image_id": -1, "product_id": 1, "tlc_id": 0, "domain": "query"}\n')
        with pytest.raises(FormatError, match="image_id"):
            load_catalog(p)
        p.write_text(
            '{"image_id": 0, "product_id": 1, "tlc_id": %d, "domain": "query"}\n' % 2**32
        )
        with pytest.raises(FormatError, match="tlc_id"):
            load_catalog(p)
        p.write_text('{"image_id": true, "product_id": 1, "tlc_id": 0, "domain": "query"}\n')
        with pytest.raises(FormatError, match="image_id"):
            load_catalog(p)


class TestGroundTruthFile:
    def test_round_trip(self, tmp_path):
        truth = {3: (30, 2), 1: (10, 0), 2: (20, 1)}
        p = tmp_path / "gt.jsonl"
        save_ground_truth(truth, p)
        assert load_ground_truth(p) == truth
        # rows come out sorted by image id
        first = json.loads(p.read_text().splitlines()[0])
        assert first["image_id"] == 1

    def test_duplicate_rejected(self, tmp_path):
        p = tmp_path / "gt.jsonl"
        row = {"image_id": 1, "product_id": 2, "tlc_id": 3}
        p.write_text(json.dumps(row) + "\n" + json.dumps(row) + "\n")
        with pytest.raises(UniquenessError):
            load_ground_truth(p)


class TestPartition:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 3), st.booleans()), max_size=60))
    def test_partitions_cover_domain_exactly(self, rows):
        # product id derived from tlc so the one-category rule holds by construction
        images = [
            _image(i, tlc * 1000 + prod, tlc, Domain.CATALOG if is_cat else Domain.QUERY)
            for i, (prod, tlc, is_cat) in enumerate(rows)
        ]
        catalog = Catalog.from_images(images)
        for domain in (Domain.CATALOG, Domain.QUERY):
            parts = partition_by_tlc(catalog, domain)
            ids = [i for part in parts.values() for i in part]
            expected = [img.image_id for img in images if img.domain is domain]
            assert sorted(ids) == sorted(expected)
            assert len(ids) == len(set(ids))
            for tlc, part in parts.items():
                assert part, "no empty partitions"
                assert all(catalog.image_to_tlc[i] == tlc for i in part)

    def test_empty_partitions_absent(self):
        catalog = Catalog.from_images([_image(0, 1, 5)])
        parts = partition_by_tlc(catalog, Domain.QUERY)
        assert parts == {}


class TestValidate:
    def test_summary_counts(self):
        catalog = Catalog.from_images(
            [
                _image(0, 10, 0),
                _image(1, 10, 0, Domain.QUERY),
                _image(2, 11, 1),
            ]
        )
        m = _matrix(9, 3, 4)
        m.ids = np.array([0, 1, 2], dtype=np.uint64)
        summary = validate(catalog, m)
        assert summary.images_total == 3
        assert summary.per_domain == {"catalog": 2, "query": 1}
        assert summary.per_tlc == {0: 2, 1: 1}
        assert summary.products == 2
        assert summary.tlcs == 2

    def test_empty_catalog_empty_matrix(self):
        catalog = Catalog.from_images([])
        m = EmbeddingMatrix(dim=4, ids=np.zeros(0, np.uint64), vectors=np.zeros((0, 4), np.float32))
        summary = validate(catalog, m)
        assert summary.images_total == 0
        assert summary.per_tlc == {}

    def test_mismatch_lists_offenders(self):
        catalog = Catalog.from_images([_image(0, 10, 0), _image(1, 10, 0)])
        m = _matrix(10, 2, 4)
        m.ids = np.array([1, 2], dtype=np.uint64)
        with pytest.raises(MismatchError) as exc:
            validate(catalog, m)
        assert exc.value.missing_embeddings == (0,)
        assert exc.value.missing_catalog == (2,)


class TestFingerprint:
    def test_stable_and_content_sensitive(self):
        catalog = Catalog.from_images([_image(0, 10, 0)])
        m = _matrix(11, 1, 4)
        m.ids = np.array([0], dtype=np.uint64)
        a = dataset_fingerprint(catalog, m)
        b = dataset_fingerprint(catalog, m)
        assert a == b
        m2 = EmbeddingMatrix(dim=4, ids=m.ids.copy(), vectors=m.vectors + np.float32(1e-3))
        assert dataset_fingerprint(catalog, m2) != a

from __future__ import annotations

import numpy as np
import pytest

from cascadesearch.catalog import Domain, partition_by_tlc
from cascadesearch.errors import ConfigError
from cascadesearch.synthgen import REFERENCE_CONFIG, SynthConfig, generate, write_dataset
from cascadesearch.catalog import load_catalog, load_embeddings, load_ground_truth


SMALL = SynthConfig(
    seed=7,
    num_tlcs=6,
    products_per_tlc=12,
    catalog_images_per_product=4,
    query_images_per_product=2,
    dim=16,
)


def brute_force_recall1(dataset, query_ids=None) -> float:
    """Exact top-1 product-match rate via chunked full matrix scans."""
    emb = dataset.embeddings
    cat_rows = [
        emb.row_of_id[i.image_id]
        for i in dataset.catalog.images
        if i.domain is Domain.CATALOG
    ]
    gallery = emb.vectors[cat_rows].astype(np.float64)
    gallery_ids = emb.ids[cat_rows]
    product_of = dataset.catalog.image_to_product
    if query_ids is None:
        query_ids = sorted(dataset.ground_truth)
    hits = 0
    for start in range(0, len(query_ids), 512):
        block = query_ids[start : start + 512]
        q = np.stack([emb.vector_for(i) for i in block]).astype(np.float64)
        scores = q @ gallery.T
        best = np.argmax(scores, axis=1)  # ids ascend with row, so first max wins ties
        for qi, row in zip(block, best):
            if product_of[int(gallery_ids[row])] == dataset.ground_truth[qi][0]:
                hits += 1
    return hits / len(query_ids)


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            SynthConfig(dim=1)
        with pytest.raises(ConfigError):
            SynthConfig(num_tlcs=0)
        with pytest.raises(ConfigError):
            SynthConfig(tlc_spread=-0.1)
        with pytest.raises(ConfigError):
            SynthConfig(confuser_fraction=1.5)

    def test_single_tlc_with_confusers_rejected(self):
        with pytest.raises(ConfigError):
            SynthConfig(num_tlcs=1, confuser_fraction=1.0)
        # no confusers is fine with one category
        SynthConfig(num_tlcs=1, confuser_fraction=0.0)
        SynthConfig(num_tlcs=1, products_per_tlc=5, confuser_fraction=0.1)


class TestGenerate:
    def test_counts_and_ids_small(self):
        ds = generate(SMALL)
        T, P = SMALL.num_tlcs, SMALL.products_per_tlc
        n_cat = T * P * SMALL.catalog_images_per_product
        n_q = T * P * SMALL.query_images_per_product
        assert ds.catalog_image_count == n_cat
        assert ds.query_image_count == n_q
        assert ds.embeddings.count == n_cat + n_q
        assert ds.embeddings.ids.tolist() == list(range(n_cat + n_q))
        assert len(ds.ground_truth) == n_q
        assert set(ds.ground_truth) == set(range(n_cat, n_cat + n_q))
        # every product has one category and the expected image counts
        assert len(ds.catalog.product_to_tlc) == T * P

    def test_unit_norms(self):
        ds = generate(SMALL)
        norms = np.linalg.norm(ds.embeddings.vectors.astype(np.float64), axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-5)

    def test_deterministic(self):
        a = generate(SMALL)
        b = generate(SMALL)
        assert a.embeddings.vectors.tobytes() == b.embeddings.vectors.tobytes()
        assert a.embeddings.ids.tolist() == b.embeddings.ids.tolist()
        assert a.catalog.images == b.catalog.images
        assert a.ground_truth == b.ground_truth

    def test_seed_changes_content(self):
        a = generate(SMALL)
        b = generate(SynthConfig(**{**SMALL.as_dict(), "seed": 8}))
        assert a.embeddings.vectors.tobytes() != b.embeddings.vectors.tobytes()

    def test_confuser_count_exact(self):
        for frac, expected in ((0.3, 3), (0.25, 3), (0.0, 0), (0.09, 1)):
            cfg = SynthConfig(**{**SMALL.as_dict(), "products_per_tlc": 13,
                                 "confuser_fraction": frac})
            ds = generate(cfg)
            per_tlc: dict[int, int] = {}
            for pid in ds.confuser_products:
                tlc = ds.catalog.product_to_tlc[pid]
                per_tlc[tlc] = per_tlc.get(tlc, 0) + 1
            assert all(v == expected for v in per_tlc.values()) or expected == 0
            assert len(ds.confuser_products) == expected * cfg.num_tlcs

    def test_confusers_sit_near_foreign_centroid(self):
        # with tight spreads, a confuser product's images must be closer to some
        # other category's image mass than to its own
        cfg = SynthConfig(seed=3, num_tlcs=4, products_per_tlc=10,
                          catalog_images_per_product=3, query_images_per_product=1,
                          dim=16, tlc_spread=0.02, image_noise=0.01,
                          query_noise=0.01, domain_shift=0.0, confuser_fraction=0.2)
        ds = generate(cfg)
        parts = partition_by_tlc(ds.catalog, Domain.CATALOG)
        centroid_of = {
            t: np.mean([ds.embeddings.vector_for(i) for i in ids], axis=0)
            for t, ids in parts.items()
        }
        for pid in ds.confuser_products:
            own = ds.catalog.product_to_tlc[pid]
            img = next(i for i in ds.catalog.images if i.product_id == pid)
            v = ds.embeddings.vector_for(img.image_id)
            sims = {t: float(v @ c) for t, c in centroid_of.items()}
            assert max(sims, key=sims.get) != own

    def test_write_dataset_round_trip(self, tmp_path):
        ds = generate(SMALL)
        paths = write_dataset(ds, tmp_path)
        emb = load_embeddings(paths["embeddings"])
        cat = load_catalog(paths["catalog"])
        gt = load_ground_truth(paths["ground_truth"])
        assert emb.vectors.tobytes() == ds.embeddings.vectors.tobytes()
        assert cat.images == ds.catalog.images
        assert gt == ds.ground_truth


class TestReference:
    def test_reference_counts(self, reference_dataset):
        assert reference_dataset.catalog_image_count == 32_000
        assert reference_dataset.query_image_count == 9_600
        assert reference_dataset.embeddings.count == 41_600
        assert len(reference_dataset.catalog.product_to_tlc) == 3_200
        parts = partition_by_tlc(reference_dataset.catalog, Domain.CATALOG)
        assert len(parts) == 32
        assert all(len(v) == 1_000 for v in parts.values())

    def test_easy_regime_recall(self):
        # frozen floor: with no domain shift and no confusers the gallery is
        # nearly noiseless, so exact search must place the right product first
        # almost always
        cfg = SynthConfig(**{**REFERENCE_CONFIG.as_dict(),
                             "domain_shift": 0.0, "confuser_fraction": 0.0})
        ds = generate(cfg)
        r1 = brute_force_recall1(ds)
        assert r1 > 0.95

    def test_domain_shift_hurts_and_routing_recovers(self):
        # averaged over 5 seeds on a scaled-down config: recall drops when the
        # shift turns on, and restricting the scan to the true category claws
        # part of it back when confusers exist
        base = dict(num_tlcs=8, products_per_tlc=24, catalog_images_per_product=4,
                    query_images_per_product=2, dim=32, confuser_fraction=0.3)
        no_shift, shifted, routed = [], [], []
        for seed in range(5):
            ds0 = generate(SynthConfig(**base, seed=seed, domain_shift=0.0))
            ds1 = generate(SynthConfig(**base, seed=seed, domain_shift=0.8))
            no_shift.append(brute_force_recall1(ds0))
            shifted.append(brute_force_recall1(ds1))
            routed.append(_routed_recall1(ds1))
        assert np.mean(shifted) < np.mean(no_shift)
        assert np.mean(routed) > np.mean(shifted)


def _routed_recall1(dataset) -> float:
    """Recall@1 when each query scans only its true category's partition."""
    emb = dataset.embeddings
    parts = partition_by_tlc(dataset.catalog, Domain.CATALOG)
    product_of = dataset.catalog.image_to_product
    hits = 0
    for qid, (product, tlc) in dataset.ground_truth.items():
        ids = parts[tlc]
        gallery = np.stack([emb.vector_for(i) for i in ids]).astype(np.float64)
        scores = gallery @ emb.vector_for(qid).astype(np.float64)
        best = int(np.argmax(scores))
        if product_of[ids[best]] == product:
            hits += 1
    return hits / len(dataset.ground_truth)

"""Reference clustering, the style dictionary and semantic attention."""

import numpy as np
import pytest

from stylefield.core_math import channel_stats
from stylefield.decoder import ContentStats, adain
from stylefield.encoder import semantic_spec, style_spec
from stylefield.style_dict import (
    MIN_CLUSTER_LOCATIONS,
    StyleDictionary,
    StyleEntry,
    _merge_small,
    aligned_features,
    build_dictionary,
    cluster_reference,
    dictionary_bytes,
    dictionary_from_bytes,
    load_dictionary,
    save_dictionary,
)
from stylefield.stylize import local_adain, style_attention, weighted_style_codes
from stylefield.tensor_io import ContainerError


def two_tone(size=32, left=(0.9, 0.2, 0.1), right=(0.1, 0.3, 0.9)):
    img = np.zeros((size, size, 3), np.float32)
    img[:, : size // 2] = left
    img[:, size // 2 :] = right
    lab = np.zeros((size, size), np.int64)
    lab[:, size // 2 :] = 1
    return img, lab


def random_dict(rng, T=4, Cd=5, Cv=6):
    return StyleDictionary([StyleEntry(rng.normal(size=Cd), rng.normal(size=Cv), rng.uniform(0.5, 2, Cv), 0, i, 10)
                            for i in range(T)])


class TestClustering:
    def test_alignment_shapes(self, rng):
        img = rng.random((30, 22, 3)).astype(np.float32)
        sty, sem = aligned_features(img, style_spec(), semantic_spec())
        assert sty.shape == (15 * 11, 32) and sem.shape == (15 * 11, 16)

    def test_two_regions_give_two_entries(self):
        img, lab = two_tone()
        ents = cluster_reference(img, 2, style_spec(), semantic_spec(kind="oracle_semantic"), labels=lab)
        assert len(ents) == 2
        assert sum(e.count for e in ents) == 16 * 16

    def test_entry_statistics_match_cluster_members(self, rng):
        img = rng.random((24, 24, 3)).astype(np.float32)
        sty, sem = aligned_features(img, style_spec(), semantic_spec())
        ents = cluster_reference(img, 3, style_spec(), semantic_spec(), seed=4)
        # recover the members of each cluster by nearest key is not exact; check aggregate instead
        assert sum(e.count for e in ents) == sty.shape[0]
        for e in ents:
            assert e.count >= MIN_CLUSTER_LOCATIONS
            assert np.all(e.sigma > 0)

    def test_merge_small_clusters(self):
        pts = np.array([[0.0], [0.1], [0.2], [0.3], [5.0], [0.05]])
        assign = np.array([0, 0, 0, 0, 1, 2])
        new, alive = _merge_small(pts, assign, 3)
        assert alive == [0]
        np.testing.assert_array_equal(new, 0)

    def test_too_many_clusters_rejected(self):
        with pytest.raises(ValueError):
            cluster_reference(np.zeros((4, 4, 3), np.float32), 10, style_spec(), semantic_spec())
        with pytest.raises(ValueError):
            build_dictionary([], 2, style_spec(), semantic_spec())


class TestDictionary:
    def test_size_bound_and_provenance_order(self, rng):
        refs = [rng.random((32, 32, 3)).astype(np.float32) for _ in range(3)]
        d = build_dictionary(refs, 4, style_spec(), semantic_spec(), seed=0)
        assert 3 <= len(d) <= 12
        assert [e.reference for e in d.entries] == sorted(e.reference for e in d.entries)

    def test_bytes_deterministic_and_round_trip(self, rng, tmp_path):
        refs = [rng.random((32, 32, 3)).astype(np.float32) for _ in range(2)]
        a = build_dictionary(refs, 3, style_spec(), semantic_spec(), seed=1)
        b = build_dictionary(refs, 3, style_spec(), semantic_spec(), seed=1)
        assert dictionary_bytes(a) == dictionary_bytes(b)
        save_dictionary(tmp_path / "d.fprf", a)
        back = load_dictionary(tmp_path / "d.fprf")
        np.testing.assert_array_equal(back.keys, a.keys)
        np.testing.assert_array_equal(back.stds, a.stds)
        assert dictionary_bytes(back) == dictionary_bytes(a)
        assert dictionary_from_bytes(dictionary_bytes(a)).entries[0].count == a.entries[0].count

    def test_wrong_container(self, tmp_path):
        from stylefield.tensor_io import write_container

        write_container(tmp_path / "x.fprf", {"META": ({}, [])})
        with pytest.raises(ContainerError):
            load_dictionary(tmp_path / "x.fprf")

    def test_debug_json(self, rng):
        import json

        d = random_dict(rng, T=2)
        assert json.loads(d.debug_json())["count"] == 2


class TestAttention:
    def test_rows_are_distributions(self, rng):
        R = style_attention(rng.normal(size=(7, 5)), rng.normal(size=(3, 5)))
        np.testing.assert_allclose(R.sum(1), 1.0, atol=1e-12)

    def test_weighted_codes_match_loop(self, rng):
        d = random_dict(rng)
        R = style_attention(rng.normal(size=(9, 5)), d.keys)
        M_w, S_w = weighted_style_codes(R, d)
        for n in range(9):
            m = sum(R[n, t] * d.entries[t].mu for t in range(len(d)))
            s = sum(R[n, t] * d.entries[t].sigma for t in range(len(d)))
            np.testing.assert_allclose(M_w[n], m, atol=1e-12)
            np.testing.assert_allclose(S_w[n], s, atol=1e-12)

    def test_permutation_invariance(self, rng):
        d = random_dict(rng, T=5)
        F = rng.normal(size=(6, 5))
        perm = [3, 0, 4, 1, 2]
        a = weighted_style_codes(style_attention(F, d.keys), d)
        b = weighted_style_codes(style_attention(F, d.permuted(perm).keys), d.permuted(perm))
        np.testing.assert_allclose(a[0], b[0], atol=1e-12)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            style_attention(rng.normal(size=(2, 5)), rng.normal(size=(3, 4)))

    def test_single_entry_local_adain_is_global(self, rng):
        d = random_dict(rng, T=1)
        f = rng.normal(size=(10, 6)).astype(np.float32)
        stats = ContentStats(*channel_stats(f), initialized=True)
        R = style_attention(rng.normal(size=(10, 5)), d.keys)
        M_w, S_w = weighted_style_codes(R, d)
        np.testing.assert_array_equal(local_adain(f, stats, M_w, S_w),
                                      adain(f, stats.mu_c, stats.sigma_c, d.entries[0].mu, d.entries[0].sigma))

"""Retrieval metrics, feature banks, and the multi-trial protocol."""

import numpy as np
import pytest

from mscmnet.errors import DataError, MscmError, ShapeError, VersionError
from mscmnet.evaluation import (
    FeatureBank,
    evaluate,
    load_bank,
    mean_report,
    pairwise_distance,
    run_protocol,
    sample_gallery,
    save_bank,
    write_cmc_csv,
    write_report,
)

import oracles


def _bank(emb, ids, cams=None, mods=None):
    emb = np.asarray(emb, np.float32)
    n = emb.shape[0]
    return FeatureBank(
        emb, np.asarray(ids, np.int32),
        np.zeros(n, np.int32) if cams is None else np.asarray(cams, np.int32),
        np.zeros(n, np.uint8) if mods is None else np.asarray(mods, np.uint8),
    )


def _rand_bank(rng, n, dim, n_ids, n_cams=1):
    return _bank(
        rng.normal(size=(n, dim)), rng.integers(n_ids, size=n), rng.integers(n_cams, size=n)
    )


# -- distances ----------------------------------------------------------------

def test_pairwise_unit_vectors():
    bank = _bank([[1.0, 0.0], [0.0, 1.0]], [0, 1])
    d = pairwise_distance(bank, bank)
    assert d.shape == (2, 2)
    assert d[0, 0] == 0.0 and d[1, 1] == 0.0
    assert d[0, 1] == pytest.approx(np.sqrt(2.0), abs=1e-12)
    assert d[1, 0] == pytest.approx(np.sqrt(2.0), abs=1e-12)


def test_pairwise_matches_double_loop():
    rng = np.random.default_rng(0)
    q = _rand_bank(rng, 17, 9, 5)
    g = _rand_bank(rng, 23, 9, 5)
    d = pairwise_distance(q, g)
    for i in range(17):
        for j in range(23):
            want = np.sqrt(
                ((q.embeddings[i].astype(np.float64) - g.embeddings[j].astype(np.float64)) ** 2).sum()
            )
            assert abs(d[i, j] - want) < 1e-5


def test_pairwise_rejects_dim_mismatch():
    with pytest.raises(ShapeError):
        pairwise_distance(_bank(np.zeros((2, 3)), [0, 1]), _bank(np.zeros((2, 4)), [0, 1]))


# -- single-query metric arithmetic -------------------------------------------

def test_ap_worked_example():
    # matches at ranks 1 and 3: AP = (1/1 + 2/3)/2 = 5/6, the hardest match
    # sits at rank 3 of 2 matches so the negative-penalty metric is 2/3
    query = _bank([[0.0, 0.0]], [7], cams=[0])
    gallery = _bank([[0.0, 0.0]] * 3, [7, 1, 7], cams=[1, 1, 1])
    dist = np.array([[0.1, 0.2, 0.3]])
    rep = evaluate(query, gallery, max_rank=3, distances=dist)
    assert rep.map == pytest.approx(5.0 / 6.0, abs=1e-12)
    assert rep.minp == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert rep.cmc.tolist() == [1.0, 1.0, 1.0]
    assert rep.num_valid_queries == 1


def test_perfect_retrieval():
    query = _bank([[0.0] * 4, [1.0] + [0.0] * 3], [0, 1], cams=[0, 0])
    gallery = _bank([[0.0] * 4, [1.0] + [0.0] * 3], [0, 1], cams=[1, 1])
    rep = evaluate(query, gallery, max_rank=2)
    assert rep.map == 1.0 and rep.minp == 1.0
    assert rep.cmc.tolist() == [1.0, 1.0]


@pytest.mark.parametrize("r", [1, 2, 5, 9])
def test_single_match_at_rank_r(r):
    n = 10
    ids = np.ones(n, np.int32)
    ids[r - 1] = 7
    query = _bank([[0.0, 0.0]], [7], cams=[0])
    gallery = _bank(np.zeros((n, 2)), ids, cams=np.full(n, 1))
    dist = np.arange(n, dtype=np.float64)[None, :]
    rep = evaluate(query, gallery, max_rank=n, distances=dist)
    assert rep.map == pytest.approx(1.0 / r, abs=1e-12)
    assert rep.minp == pytest.approx(1.0 / r, abs=1e-12)
    assert rep.cmc[r - 1] == 1.0
    assert rep.cmc[r - 2] == 0.0 if r > 1 else True


def test_match_beyond_max_rank_misses_cmc_not_map():
    query = _bank([[0.0, 0.0]], [3], cams=[0])
    gallery = _bank(np.zeros((5, 2)), [0, 1, 2, 4, 3], cams=np.full(5, 1))
    dist = np.arange(5, dtype=np.float64)[None, :]
    rep = evaluate(query, gallery, max_rank=3, distances=dist)
    assert rep.cmc.tolist() == [0.0, 0.0, 0.0]
    assert rep.map == pytest.approx(1.0 / 5.0, abs=1e-12)


def test_same_camera_rows_filtered():
    # the gallery twin sharing id and camera is dropped; the cross-camera
    # copy (farther away) becomes the rank-1 match
    query = _bank([[0.0, 0.0]], [5], cams=[2])
    gallery = _bank([[0.0, 0.0], [0.5, 0.0], [0.1, 0.0]], [5, 5, 6], cams=[2, 0, 0])
    rep = evaluate(query, gallery, max_rank=2)
    assert rep.cmc[0] == 0.0  # id 6 at distance 0.1 outranks id 5 at 0.5
    assert rep.cmc[1] == 1.0
    assert rep.map == pytest.approx(0.5, abs=1e-12)


def test_query_without_match_dropped_and_counted():
    query = _bank([[0.0, 0.0], [1.0, 1.0]], [1, 9], cams=[0, 0])
    gallery = _bank([[0.0, 0.1], [2.0, 2.0]], [1, 1], cams=[1, 1])
    rep = evaluate(query, gallery, max_rank=2)
    assert rep.num_valid_queries == 1  # id 9 has no gallery match
    assert rep.cmc[0] == 1.0


def test_all_queries_filtered_is_error():
    query = _bank([[0.0, 0.0]], [1], cams=[0])
    gallery = _bank([[0.0, 0.0]], [1], cams=[0])  # only row shares id+cam
    with pytest.raises(MscmError, match="no query kept a correct match"):
        evaluate(query, gallery)


def test_empty_bank_is_error():
    good = _bank([[0.0, 0.0]], [1])
    empty = _bank(np.zeros((0, 2)), [])
    with pytest.raises(MscmError, match="empty query or gallery"):
        evaluate(good, empty)


# -- oracle agreement with tie-heavy rankings ----------------------------------

def test_evaluate_matches_per_query_oracle_with_ties():
    rng = np.random.default_rng(1)
    for _ in range(100):
        nq = int(rng.integers(3, 12))
        ng = int(rng.integers(5, 25))
        n_ids = int(rng.integers(2, 6))
        max_rank = int(rng.integers(2, ng + 1))
        query = _bank(np.zeros((nq, 2)), rng.integers(n_ids, size=nq),
                      cams=np.zeros(nq, np.int32))
        gallery = _bank(np.zeros((ng, 2)), rng.integers(n_ids, size=ng),
                        cams=np.ones(ng, np.int32))
        # quantized distances force heavy ties; both sides read this matrix
        dist = rng.integers(0, 4, size=(nq, ng)).astype(np.float64)

        cmcs, aps, inps = [], [], []
        for i in range(nq):
            if not np.any(gallery.ids == query.ids[i]):
                continue
            cmc, ap, inp = oracles.naive_query_metrics(
                dist[i], gallery.ids, query.ids[i], max_rank
            )
            cmcs.append(cmc)
            aps.append(ap)
            inps.append(inp)
        if not aps:
            continue
        rep = evaluate(query, gallery, max_rank=max_rank, distances=dist)
        assert rep.num_valid_queries == len(aps)
        assert rep.map == pytest.approx(np.mean(aps), abs=1e-12)
        assert rep.minp == pytest.approx(np.mean(inps), abs=1e-12)
        assert np.allclose(rep.cmc, np.mean(cmcs, axis=0), atol=1e-12)


# -- feature bank file --------------------------------------------------------

def test_bank_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    bank = _bank(rng.normal(size=(9, 5)), rng.integers(4, size=9),
                 cams=rng.integers(3, size=9), mods=rng.integers(2, size=9))
    path = tmp_path / "bank.msfb"
    save_bank(bank, str(path))
    back = load_bank(str(path))
    assert np.array_equal(back.embeddings, bank.embeddings)
    assert np.array_equal(back.ids, bank.ids)
    assert np.array_equal(back.cams, bank.cams)
    assert np.array_equal(back.modalities, bank.modalities)


def test_bank_crc_corruption(tmp_path):
    bank = _bank(np.ones((2, 3)), [0, 1])
    path = tmp_path / "bank.msfb"
    save_bank(bank, str(path))
    raw = bytearray(path.read_bytes())
    raw[25] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="checksum mismatch"):
        load_bank(str(path))


def test_bank_version_rejected(tmp_path):
    import zlib

    bank = _bank(np.ones((2, 3)), [0, 1])
    path = tmp_path / "bank.msfb"
    save_bank(bank, str(path))
    raw = bytearray(path.read_bytes())
    raw[4:8] = np.uint32(9).tobytes()
    raw[-4:] = np.uint32(zlib.crc32(bytes(raw[:-4])) & 0xFFFFFFFF).tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError, match="version 9"):
        load_bank(str(path))


def test_bank_truncation_and_magic(tmp_path):
    bank = _bank(np.ones((2, 3)), [0, 1])
    path = tmp_path / "bank.msfb"
    save_bank(bank, str(path))
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(DataError):
        load_bank(str(path))
    other = tmp_path / "junk.msfb"
    other.write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNKJUNK")
    with pytest.raises(DataError, match="not a feature bank"):
        load_bank(str(other))


def test_bank_validation():
    with pytest.raises(DataError, match="non-finite"):
        _bank([[np.nan, 0.0]], [0])
    with pytest.raises(ShapeError):
        FeatureBank(np.zeros((2, 3), np.float32), np.zeros(1, np.int32),
                    np.zeros(2, np.int32), np.zeros(2, np.uint8))


# -- multi-trial protocol -----------------------------------------------------

@pytest.fixture()
def twin_banks():
    # infrared embeddings are exact copies of the visible ones, so every
    # cross-modal query has a zero-distance match
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(12, 6)).astype(np.float32)
    ids = np.repeat(np.arange(4), 3).astype(np.int32)
    cams = np.tile(np.arange(3), 4).astype(np.int32)
    bank_v = FeatureBank(emb, ids, cams, np.zeros(12, np.uint8))
    bank_t = FeatureBank(emb.copy(), ids, cams + 3, np.ones(12, np.uint8))
    return bank_v, bank_t


def test_protocol_copies_hit_rank_one(twin_banks):
    bank_v, bank_t = twin_banks
    mean, reports = run_protocol(bank_v, bank_t, "v2t", trials=10, seed=0)
    assert mean.cmc[0] == 1.0
    assert all(r.cmc[0] == 1.0 for r in reports)


def test_protocol_deterministic():
    # banks with several rows per (id, cam) so gallery sampling has real choice
    rng = np.random.default_rng(13)
    bank_v = _rand_bank(rng, 60, 4, 4, n_cams=2)
    bank_t = _rand_bank(rng, 60, 4, 4, n_cams=2)
    bank_t.cams += 2
    a, _ = run_protocol(bank_v, bank_t, "t2v", trials=5, seed=11)
    b, _ = run_protocol(bank_v, bank_t, "t2v", trials=5, seed=11)
    assert np.array_equal(a.cmc, b.cmc)
    assert a.map == b.map and a.minp == b.minp
    c, _ = run_protocol(bank_v, bank_t, "t2v", trials=5, seed=12)
    assert not (np.array_equal(a.cmc, c.cmc) and a.map == c.map)


def test_protocol_mean_is_mean_of_trials(twin_banks):
    rng = np.random.default_rng(4)
    bank_v = _rand_bank(rng, 30, 4, 5, n_cams=2)
    bank_t = _rand_bank(rng, 30, 4, 5, n_cams=2)
    bank_t.cams += 2
    mean, reports = run_protocol(bank_v, bank_t, "t2v", trials=10, seed=0)
    assert len(reports) == 10
    assert mean.map == pytest.approx(np.mean([r.map for r in reports]), abs=1e-6)
    assert mean.minp == pytest.approx(np.mean([r.minp for r in reports]), abs=1e-6)
    assert np.allclose(mean.cmc, np.mean([r.cmc for r in reports], axis=0), atol=1e-6)


def test_sample_gallery_one_row_per_identity_camera():
    rng = np.random.default_rng(5)
    bank = _rand_bank(rng, 40, 3, 4, n_cams=3)
    g = sample_gallery(bank, np.random.default_rng(0))
    pairs = {(int(i), int(c)) for i, c in zip(g.ids, g.cams)}
    want = {(int(i), int(c)) for i, c in zip(bank.ids, bank.cams)}
    assert pairs == want
    assert len(g) == len(want)


def test_protocol_rejects_unknown_name(twin_banks):
    with pytest.raises(MscmError, match="t2v or v2t"):
        run_protocol(*twin_banks, protocol="x2y")


def test_report_files(tmp_path, twin_banks):
    mean, _ = run_protocol(*twin_banks, protocol="v2t", trials=2, seed=0, max_rank=20)
    rp = tmp_path / "report.txt"
    write_report(mean, str(rp))
    text = rp.read_text()
    for key in ("rank1", "rank10", "rank20", "map", "minp"):
        assert f"{key} = " in text
    cp = tmp_path / "cmc.csv"
    write_cmc_csv(mean, str(cp))
    lines = cp.read_text().strip().splitlines()
    assert lines[0] == "rank,cmc"
    assert len(lines) == 21


def test_mean_report_shapes():
    r1 = evaluate(_bank([[0.0, 0.0]], [1], cams=[0]),
                  _bank([[0.0, 0.1]], [1], cams=[1]), max_rank=4)
    m = mean_report([r1, r1])
    assert m.map == r1.map and len(m.cmc) == 4


def test_identity_blind_features_score_chance():
    # 16 ids, 2 cams, 8 samples per id per modality, i.i.d. unit embeddings:
    # each trial's gallery holds one row per (id, cam) = 32 candidates with 2
    # positives per query, so rank-1 hits with probability 2/32 = 1/16.
    chance = 1.0 / 16.0
    means = []
    for bank_seed in range(5):
        rng = np.random.default_rng(1000 + bank_seed)

        def blind_bank(cam_base, modality):
            n = 16 * 8
            emb = rng.standard_normal((n, 24))
            emb /= np.linalg.norm(emb, axis=1, keepdims=True)
            ids = np.repeat(np.arange(16), 8)
            cams = cam_base + (np.arange(n) % 2)
            return FeatureBank(emb, ids, cams, np.full(n, modality, np.uint8))

        report, _ = run_protocol(
            blind_bank(0, 0), blind_bank(2, 1),
            protocol="t2v", trials=4, seed=bank_seed, max_rank=20,
        )
        means.append(float(report.cmc[0]))
    mean_rank1 = float(np.mean(means))
    # 5 independent banks x 128 queries: sigma ~ sqrt(p(1-p)/640) ~ 0.0096
    assert abs(mean_rank1 - chance) < 0.05

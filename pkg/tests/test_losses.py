"""Center losses: worked examples, naive-oracle agreement, accounting."""

import numpy as np
import pytest

from mscmnet.errors import ConfigError, MscmError
from mscmnet.losses import (
    LossConfig,
    compute_centers,
    dual_distance,
    negative_margin_loss,
    qct_loss,
    quar_distance,
    total_loss,
)
from mscmnet.model import StreamEmbeddings
from mscmnet.tensor import Tensor

import oracles


def _embs(streams_v, ids_v, streams_t, ids_t, logits=None, grad=False):
    return StreamEmbeddings(
        streams_v=[Tensor(np.asarray(s, np.float64), requires_grad=grad) for s in streams_v],
        streams_t=[Tensor(np.asarray(s, np.float64), requires_grad=grad) for s in streams_t],
        ids_v=np.asarray(ids_v),
        ids_t=np.asarray(ids_t),
        logits=logits,
    )


def _random_embs(rng, p, k_v, k_t, dim, grad=False):
    ids_v = np.repeat(np.arange(p), k_v)
    ids_t = np.repeat(np.arange(p), k_t)
    mk = lambda n: rng.normal(size=(n, dim))
    return _embs(
        [mk(p * k_v), mk(p * k_v)], ids_v, [mk(p * k_t), mk(p * k_t)], ids_t, grad=grad
    )


def _arrays(embs):
    return (
        [s.data for s in embs.streams_v], embs.ids_v,
        [s.data for s in embs.streams_t], embs.ids_t,
    )


# -- centers ------------------------------------------------------------------

def test_centers_degenerate_equality():
    f = np.array([[0.3, -1.2, 0.5]])
    embs = _embs([f, f], [7], [f, f], [7])
    c = compute_centers(embs)
    assert np.allclose(c.c_v.data, f) and np.allclose(c.c_t.data, f)
    assert np.allclose(c.streams_v[0].data, f)


def test_modality_center_is_mean_of_stream_centers():
    embs = _embs([[[2.0, 0.0]], [[0.0, 2.0]]], [0], [[[1.0, 1.0]], [[1.0, 1.0]]], [0])
    c = compute_centers(embs)
    assert np.allclose(c.c_v.data, [[1.0, 1.0]])
    rng = np.random.default_rng(0)
    embs = _random_embs(rng, 3, 2, 2, 4)
    c = compute_centers(embs)
    want = 0.5 * (c.streams_v[0].data + c.streams_v[1].data)
    assert np.allclose(c.c_v.data, want)


def test_centers_reject_uneven_counts():
    with pytest.raises(MscmError, match="uneven"):
        compute_centers(_embs(
            [np.zeros((3, 2))], [0, 0, 1], [np.zeros((2, 2))], [0, 1]
        ))


def test_centers_reject_mismatched_identity_sets():
    with pytest.raises(MscmError, match="different identity sets"):
        compute_centers(_embs(
            [np.zeros((2, 2))], [0, 1], [np.zeros((2, 2))], [0, 2]
        ))


# -- quadruple-center distance ------------------------------------------------

def test_quar_worked_example():
    # K=1 single identity: streams (1,0),(0,1) vs (0,0),(2,0); the global
    # anchors are (0,0) and (1,0), all four distances are exactly 1
    embs = _embs([[[1.0, 0.0]], [[0.0, 1.0]]], [0], [[[0.0, 0.0]], [[2.0, 0.0]]], [0])
    c = compute_centers(embs)
    assert np.allclose(c.streams_t[0].data, [[0.0, 0.0]])
    assert np.allclose(c.streams_v[0].data, [[1.0, 0.0]])
    for mode in ("norm", "squared"):
        assert quar_distance(embs, c, mode).item() == pytest.approx(4.0, abs=1e-12)


def test_quar_zero_when_aligned():
    rng = np.random.default_rng(1)
    per_id = rng.normal(size=(3, 1, 5))
    f = np.concatenate([per_id[i] for i in range(3)])
    embs = _embs([f, f], [0, 1, 2], [f, f], [0, 1, 2])
    c = compute_centers(embs)
    assert quar_distance(embs, c, "norm").item() == pytest.approx(0.0, abs=1e-12)
    # moving any single feature off its anchor makes it strictly positive
    f2 = f.copy()
    f2[1] += 0.5
    embs2 = _embs([f2, f], [0, 1, 2], [f, f], [0, 1, 2])
    assert quar_distance(embs2, compute_centers(embs2), "norm").item() > 0.0


def test_quar_homogeneity():
    rng = np.random.default_rng(2)
    embs = _random_embs(rng, 3, 2, 2, 6)
    doubled = _embs(
        [2 * s.data for s in embs.streams_v], embs.ids_v,
        [2 * s.data for s in embs.streams_t], embs.ids_t,
    )
    c1, c2 = compute_centers(embs), compute_centers(doubled)
    assert quar_distance(doubled, c2, "norm").item() == pytest.approx(
        2 * quar_distance(embs, c1, "norm").item(), rel=1e-10
    )
    assert quar_distance(doubled, c2, "squared").item() == pytest.approx(
        4 * quar_distance(embs, c1, "squared").item(), rel=1e-10
    )


# -- dual-center distance -----------------------------------------------------

def test_dual_worked_example():
    # V pool {(0,0),(2,0)}, T pool {(1,1),(1,-1)}: both modality centers land
    # on (1,0) and every feature sits at distance 1
    embs = _embs([[[0.0, 0.0]], [[2.0, 0.0]]], [0], [[[1.0, 1.0]], [[1.0, -1.0]]], [0])
    c = compute_centers(embs)
    assert np.allclose(c.c_v.data, [[1.0, 0.0]])
    assert np.allclose(c.c_t.data, [[1.0, 0.0]])
    assert dual_distance(embs, c, "norm").item() == pytest.approx(4.0, abs=1e-12)


def test_dual_swap_symmetry():
    rng = np.random.default_rng(3)
    embs = _random_embs(rng, 4, 2, 3, 5)
    swapped = StreamEmbeddings(
        streams_v=embs.streams_t, streams_t=embs.streams_v,
        ids_v=embs.ids_t, ids_t=embs.ids_v,
    )
    a = dual_distance(embs, compute_centers(embs), "norm").item()
    b = dual_distance(swapped, compute_centers(swapped), "norm").item()
    assert a == pytest.approx(b, rel=1e-12)


def test_dual_zero_when_modality_aligned():
    rng = np.random.default_rng(4)
    base = rng.normal(size=(2, 4))
    f = base[np.array([0, 1])]
    embs = _embs([f, f], [0, 1], [f, f], [0, 1])
    c = compute_centers(embs)
    assert dual_distance(embs, c, "norm").item() == pytest.approx(0.0, abs=1e-12)


# -- negative-margin hinge ----------------------------------------------------

def test_nm_hinge_arithmetic():
    # exactly one active pair: feature (4.5, 0) against the foreign modality
    # center (5, 0) under rho=1 contributes 1 - 0.5 = 0.5
    streams_v = [np.array([
        [4.5, 0.0], [4.5, 500.0],      # id 0
        [-495.0, 0.0], [505.0, 0.0],   # id 1, center (5, 0)
    ])]
    ids_v = np.array([0, 0, 1, 1])
    streams_t = [np.array([[2000.0, 0.0], [1000.0, 0.0]])]
    ids_t = np.array([0, 1])
    embs = _embs(streams_v, ids_v, streams_t, ids_t)
    c = compute_centers(embs)
    assert np.allclose(c.c_v.data[1], [5.0, 0.0])
    loss = negative_margin_loss(embs, c, rho=1.0, anchor="modality")
    assert loss.item() == pytest.approx(0.5, abs=1e-9)


def test_nm_pair_accounting():
    # 2 ids, 2+1 features per id, 4 modality anchors: each of the 6 features
    # meets 2 foreign centers, 12 hinge terms in total
    rng = np.random.default_rng(5)
    streams_v = [rng.normal(size=(4, 3))]
    streams_t = [rng.normal(size=(2, 3))]
    ids_v, ids_t = np.array([0, 0, 1, 1]), np.array([0, 1])
    embs = _embs(streams_v, ids_v, streams_t, ids_t)
    want, pairs = oracles.naive_negative_margin(
        [s.data for s in embs.streams_v], ids_v,
        [s.data for s in embs.streams_t], ids_t, rho=5.0,
    )
    assert pairs == 12
    got = negative_margin_loss(embs, compute_centers(embs), rho=5.0).item()
    assert got == pytest.approx(want, abs=1e-6)


def test_nm_inactive_when_spread():
    embs = _embs(
        [np.array([[0.0, 0.0], [100.0, 0.0]])], [0, 1],
        [np.array([[0.0, 0.0], [100.0, 0.0]])], [0, 1],
    )
    c = compute_centers(embs)
    assert negative_margin_loss(embs, c, rho=0.3).item() == 0.0


def test_nm_monotone_in_cross_distance():
    # pushing one identity farther away can only shrink the hinge
    rng = np.random.default_rng(6)
    base = rng.normal(size=(2, 4)) * 0.1
    prev = None
    for gap in (0.0, 0.2, 0.5, 1.0, 3.0):
        shift = np.zeros(4)
        shift[0] = gap
        f = np.vstack([base[0], base[1] + shift])
        embs = _embs([f], [0, 1], [f.copy()], [0, 1])
        val = negative_margin_loss(embs, compute_centers(embs), rho=1.0).item()
        if prev is not None:
            assert val <= prev + 1e-12
        prev = val


def test_nm_requires_two_identities():
    embs = _embs([np.zeros((1, 2))], [0], [np.zeros((1, 2))], [0])
    with pytest.raises(MscmError, match=">= 2 distinct identities"):
        negative_margin_loss(embs, compute_centers(embs), rho=0.3)


# -- composition --------------------------------------------------------------

def test_qct_alpha_boundaries_and_blend():
    rng = np.random.default_rng(7)
    embs = _random_embs(rng, 3, 2, 2, 4)
    c = compute_centers(embs)
    d_quar = quar_distance(embs, c, "norm").item()
    d_dual = dual_distance(embs, c, "norm").item()
    l_nm = negative_margin_loss(embs, c, rho=0.3).item()

    for alpha, want in ((0.0, d_dual), (1.0, d_quar), (0.05, 0.05 * d_quar + 0.95 * d_dual)):
        _, parts = qct_loss(embs, LossConfig(qc_alpha=alpha, margin_rho=0.3))
        assert parts["l_qc"] == pytest.approx(want, rel=1e-9)
        assert parts["l_nm"] == pytest.approx(l_nm, rel=1e-9)


def test_breakdown_sums_exactly():
    rng = np.random.default_rng(8)
    embs = _random_embs(rng, 4, 2, 2, 8)
    logits = Tensor(rng.normal(size=(16, 4)))
    labels = np.repeat(np.arange(4), 4)
    embs.logits = logits
    total, parts = total_loss(embs, labels, LossConfig(id_loss_weight=96.0))
    assert parts["l_qct"] == parts["l_qc"] + parts["l_nm"]
    assert parts["l_total"] == parts["l_id"] + parts["l_qct"]
    assert total.item() == parts["l_total"]


def test_id_loss_weight_scales_ce():
    rng = np.random.default_rng(9)
    embs = _random_embs(rng, 2, 1, 1, 4)
    embs.logits = Tensor(rng.normal(size=(4, 2)))
    labels = np.array([0, 1, 0, 1])
    _, base = total_loss(embs, labels, LossConfig(id_loss_weight=1.0))
    _, scaled = total_loss(embs, labels, LossConfig(id_loss_weight=96.0))
    assert scaled["l_id"] == pytest.approx(96.0 * base["l_id"], rel=1e-12)


def test_losses_match_naive_oracles_on_random_batches():
    rng = np.random.default_rng(10)
    for trial in range(50):
        p = int(rng.integers(2, 7))
        k_v = int(rng.integers(1, 5))
        k_t = int(rng.integers(1, 5))
        dim = int(rng.integers(2, 17))
        mode = ("norm", "squared")[trial % 2]
        embs = _random_embs(rng, p, k_v, k_t, dim)
        c = compute_centers(embs)
        sv, iv, st, it = _arrays(embs)
        assert quar_distance(embs, c, mode).item() == pytest.approx(
            oracles.naive_quar(sv, iv, st, it, mode), abs=1e-6
        )
        assert dual_distance(embs, c, mode).item() == pytest.approx(
            oracles.naive_dual(sv, iv, st, it, mode), abs=1e-6
        )
        rho = float(rng.uniform(0.1, 4.0))
        want, _ = oracles.naive_negative_margin(sv, iv, st, it, rho)
        assert negative_margin_loss(embs, c, rho).item() == pytest.approx(want, abs=1e-6)


def test_losses_invariant_under_relabeling_and_row_order():
    rng = np.random.default_rng(11)
    embs = _random_embs(rng, 3, 2, 2, 5)
    cfg = LossConfig(qc_alpha=0.05, margin_rho=0.5)
    _, ref = qct_loss(embs, cfg)

    # relabel identities and shuffle rows consistently across streams
    relabel = {0: 5, 1: 9, 2: 2}
    perm_v = rng.permutation(6)
    perm_t = rng.permutation(6)
    shuffled = _embs(
        [s.data[perm_v] for s in embs.streams_v],
        np.array([relabel[i] for i in embs.ids_v])[perm_v],
        [s.data[perm_t] for s in embs.streams_t],
        np.array([relabel[i] for i in embs.ids_t])[perm_t],
    )
    _, got = qct_loss(shuffled, cfg)
    for key in ("d_quar", "d_dual", "l_nm", "l_qct"):
        assert got[key] == pytest.approx(ref[key], rel=1e-9), key


def test_center_coupling_routes_gradient_between_members():
    # the pull on one member's feature reaches its identity peers through the
    # shared center, so perturbing member A changes the grad at member B
    def grad_of_b(offset):
        rng = np.random.default_rng(12)
        f = rng.normal(size=(4, 3))
        f[0, 0] += offset  # member A
        embs = _embs([f, f.copy()], [0, 0, 1, 1], [rng.normal(size=(4, 3))] * 2,
                     [0, 0, 1, 1], grad=True)
        loss, _ = qct_loss(embs, LossConfig())
        loss.backward()
        return embs.streams_v[0].grad[1].copy()  # member B of id 0

    assert not np.allclose(grad_of_b(0.0), grad_of_b(0.5))


def test_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(qc_alpha=1.5).validate()
    with pytest.raises(ConfigError):
        LossConfig(margin_rho=-0.1).validate()
    with pytest.raises(ConfigError):
        LossConfig(distance_mode="cosine").validate()
    with pytest.raises(ConfigError):
        LossConfig(nm_anchor="global").validate()

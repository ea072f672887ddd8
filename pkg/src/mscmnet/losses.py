"""Cross-modal center losses and the total training objective.

Centers are differentiable means over the batch (built from constant
averaging matrices, so gradients flow back to every member feature).

quar_distance pulls each stream feature toward the opposite modality's
GLOBAL stream center of its identity. dual_distance pulls each feature
toward the opposite modality-level center. negative_margin_loss hinges the
L2 distance between every feature and every other identity's centers from
below. qct_loss balances the two pulls by qc_alpha and adds the hinge;
total_loss adds softmax cross-entropy over the classifier logits.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, MscmError
from .tensor import Tensor


@dataclass
class LossConfig:
    qc_alpha: float = 0.05
    margin_rho: float = 0.3
    distance_mode: str = "norm"  # norm | squared
    id_loss_weight: float = 1.0
    nm_anchor: str = "modality"  # modality | stream
    normalize: bool = True  # trainer-level: L2-normalize embeddings before the center losses

    def validate(self):
        if not 0.0 <= self.qc_alpha <= 1.0:
            raise ConfigError(f"qc_alpha must be in [0, 1], got {self.qc_alpha}")
        if self.margin_rho < 0:
            raise ConfigError(f"margin_rho must be >= 0, got {self.margin_rho}")
        if self.distance_mode not in ("norm", "squared"):
            raise ConfigError(f"distance_mode must be norm or squared, got {self.distance_mode}")
        if self.nm_anchor not in ("modality", "stream"):
            raise ConfigError(f"nm_anchor must be modality or stream, got {self.nm_anchor}")
        return self


@dataclass
class CenterSet:
    uids: np.ndarray            # distinct identities, first-seen order
    streams_v: list             # per V stream: [P, D] centers
    streams_t: list
    c_v: Tensor                 # modality centers [P, D]
    c_t: Tensor


def _unique_order(ids):
    _, first = np.unique(ids, return_index=True)
    return ids[np.sort(first)]


def _avg_matrix(ids, uids, dtype):
    p, b = len(uids), len(ids)
    a = np.zeros((p, b), dtype=dtype)
    for row, uid in enumerate(uids):
        members = np.flatnonzero(ids == uid)
        if len(members) == 0:
            raise MscmError(f"identity {uid} has no samples in one stream")
        a[row, members] = 1.0 / len(members)
    counts = {len(np.flatnonzero(ids == uid)) for uid in uids}
    if len(counts) != 1:
        raise MscmError(f"uneven per-identity sample counts {sorted(counts)}")
    return a


def _gather_matrix(ids, uids, dtype):
    g = np.zeros((len(ids), len(uids)), dtype=dtype)
    index = {uid: row for row, uid in enumerate(uids)}
    for i, ident in enumerate(ids):
        if ident not in index:
            raise MscmError(f"identity {ident} missing from the center set")
        g[i, index[ident]] = 1.0
    return g


def compute_centers(embs):
    """Differentiable per-identity stream and modality centers."""
    ids_v = np.asarray(embs.ids_v)
    ids_t = np.asarray(embs.ids_t)
    uids = _unique_order(ids_v)
    if set(ids_t.tolist()) != set(uids.tolist()):
        raise MscmError("visible and infrared batches carry different identity sets")
    dtype = embs.streams_v[0].data.dtype

    av = Tensor(_avg_matrix(ids_v, uids, dtype))
    at = Tensor(_avg_matrix(ids_t, uids, dtype))
    streams_v = [ops.matmul(av, f) for f in embs.streams_v]
    streams_t = [ops.matmul(at, f) for f in embs.streams_t]

    def modality(stream_centers):
        acc = stream_centers[0]
        for c in stream_centers[1:]:
            acc = ops.add(acc, c)
        return ops.scale(acc, 1.0 / len(stream_centers))

    return CenterSet(
        uids=uids, streams_v=streams_v, streams_t=streams_t,
        c_v=modality(streams_v), c_t=modality(streams_t),
    )


def _row_distance_sum(features, anchors, mode):
    """Sum over rows of d(f_i, a_i), d per the distance mode."""
    diff = ops.sub(features, anchors)
    sq = ops.sum_axis(ops.mul(diff, diff), 1)
    if mode == "squared":
        return ops.sum_all(sq)
    return ops.sum_all(ops.sqrt(sq))


def quar_distance(embs, centers, mode="norm"):
    """Every stream feature against the opposite modality's global center."""
    dtype = embs.streams_v[0].data.dtype
    gv = Tensor(_gather_matrix(np.asarray(embs.ids_v), centers.uids, dtype))
    gt = Tensor(_gather_matrix(np.asarray(embs.ids_t), centers.uids, dtype))
    anchors_v = ops.matmul(gv, centers.streams_t[0])
    anchors_t = ops.matmul(gt, centers.streams_v[0])
    total = None
    for f in embs.streams_v:
        term = _row_distance_sum(f, anchors_v, mode)
        total = term if total is None else ops.add(total, term)
    for f in embs.streams_t:
        term = _row_distance_sum(f, anchors_t, mode)
        total = ops.add(total, term)
    return total


def dual_distance(embs, centers, mode="norm"):
    """Every feature against the opposite modality-level center."""
    dtype = embs.streams_v[0].data.dtype
    gv = Tensor(_gather_matrix(np.asarray(embs.ids_v), centers.uids, dtype))
    gt = Tensor(_gather_matrix(np.asarray(embs.ids_t), centers.uids, dtype))
    anchors_v = ops.matmul(gv, centers.c_t)
    anchors_t = ops.matmul(gt, centers.c_v)
    total = None
    for f in embs.streams_v:
        term = _row_distance_sum(f, anchors_v, mode)
        total = term if total is None else ops.add(total, term)
    for f in embs.streams_t:
        term = _row_distance_sum(f, anchors_t, mode)
        total = ops.add(total, term)
    return total


def negative_margin_loss(embs, centers, rho, anchor="modality"):
    """Hinge [rho - ||f - c||_2]_+ over all cross-identity (feature, center) pairs."""
    if len(centers.uids) < 2:
        raise MscmError("negative margin loss needs >= 2 distinct identities")
    dtype = embs.streams_v[0].data.dtype

    feats = ops.concat(list(embs.streams_v) + list(embs.streams_t), 0)
    feat_ids = np.concatenate(
        [np.asarray(embs.ids_v)] * len(embs.streams_v)
        + [np.asarray(embs.ids_t)] * len(embs.streams_t)
    )
    if anchor == "modality":
        anchors = ops.concat([centers.c_v, centers.c_t], 0)
        anchor_ids = np.concatenate([centers.uids, centers.uids])
    else:
        anchors = ops.concat(list(centers.streams_v) + list(centers.streams_t), 0)
        anchor_ids = np.concatenate(
            [centers.uids] * (len(centers.streams_v) + len(centers.streams_t))
        )

    m = feats.data.shape[0]
    a = anchors.data.shape[0]
    f2 = ops.matmul(ops.reshape(ops.sum_axis(ops.mul(feats, feats), 1), (m, 1)),
                    Tensor(np.ones((1, a), dtype)))
    c2 = ops.matmul(Tensor(np.ones((m, 1), dtype)),
                    ops.reshape(ops.sum_axis(ops.mul(anchors, anchors), 1), (1, a)))
    cross = ops.matmul(feats, ops.transpose(anchors, (1, 0)))
    sq = ops.relu(ops.add(ops.add(f2, c2), ops.affine(cross, -2.0, 0.0)))
    dist = ops.sqrt(sq)
    hinge = ops.relu(ops.affine(dist, -1.0, float(rho)))
    mask = (feat_ids[:, None] != anchor_ids[None, :]).astype(dtype)
    return ops.sum_all(ops.mul(hinge, Tensor(mask)))


def qct_loss(embs, cfg):
    """Balanced center pulls plus the cross-identity hinge, with breakdown."""
    cfg.validate()
    centers = compute_centers(embs)
    d_quar = quar_distance(embs, centers, cfg.distance_mode)
    d_dual = dual_distance(embs, centers, cfg.distance_mode)
    l_nm = negative_margin_loss(embs, centers, cfg.margin_rho, cfg.nm_anchor)
    l_qc = ops.add(ops.scale(d_quar, cfg.qc_alpha), ops.scale(d_dual, 1.0 - cfg.qc_alpha))
    l_qct = ops.add(l_qc, l_nm)
    breakdown = {
        "d_quar": d_quar.item(), "d_dual": d_dual.item(),
        "l_nm": l_nm.item(), "l_qc": l_qc.item(), "l_qct": l_qct.item(),
    }
    return l_qct, breakdown


def total_loss(embs, labels, cfg):
    """Identity cross-entropy plus the center objective."""
    l_qct, breakdown = qct_loss(embs, cfg)
    l_id = ops.softmax_cross_entropy(embs.logits, np.asarray(labels))
    if cfg.id_loss_weight != 1.0:
        l_id = ops.scale(l_id, cfg.id_loss_weight)
    total = ops.add(l_id, l_qct)
    breakdown["l_id"] = l_id.item()
    breakdown["l_total"] = total.item()
    return total, breakdown

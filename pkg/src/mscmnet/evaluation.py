"""Retrieval evaluation: distance matrix, ranking, CMC, mAP, mINP.

Rankings sort ascending distance with a deterministic tie-break (gallery
index). Gallery rows sharing both identity and camera with the query are
dropped before ranking; queries left without a correct match are dropped
and counted. Per-query sums use math.fsum so results do not depend on
accumulation order.

Feature bank file (little-endian): magic "MSFB", u32 version, u64 row
count, u32 embed dim, then per row id:i32, cam:i32, modality:u8 (0 visible,
1 infrared), dim float32 values; trailing CRC32 over everything before it.
"""

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError, MscmError, ShapeError, VersionError
from .tensor import no_grad

BANK_MAGIC = b"MSFB"
BANK_VERSION = 1


@dataclass
class FeatureBank:
    embeddings: np.ndarray  # [N, dim] float32
    ids: np.ndarray         # [N] int32
    cams: np.ndarray        # [N] int32
    modalities: np.ndarray  # [N] uint8, 0 visible / 1 infrared

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int32)
        self.cams = np.ascontiguousarray(self.cams, dtype=np.int32)
        self.modalities = np.ascontiguousarray(self.modalities, dtype=np.uint8)
        n = self.embeddings.shape[0]
        if self.embeddings.ndim != 2:
            raise ShapeError(f"embeddings must be [N, dim], got {self.embeddings.shape}")
        if not (len(self.ids) == len(self.cams) == len(self.modalities) == n):
            raise ShapeError("feature bank row counts disagree")
        if n and not np.isfinite(self.embeddings).all():
            raise DataError("feature bank contains non-finite embeddings")

    def __len__(self):
        return self.embeddings.shape[0]

    def select(self, row_indices):
        idx = np.asarray(row_indices)
        return FeatureBank(self.embeddings[idx], self.ids[idx],
                           self.cams[idx], self.modalities[idx])


def save_bank(bank, path):
    payload = bytearray()
    payload += BANK_MAGIC
    payload += np.uint32(BANK_VERSION).tobytes()
    payload += np.uint64(len(bank)).tobytes()
    payload += np.uint32(bank.embeddings.shape[1]).tobytes()
    for i in range(len(bank)):
        payload += np.int32(bank.ids[i]).tobytes()
        payload += np.int32(bank.cams[i]).tobytes()
        payload += np.uint8(bank.modalities[i]).tobytes()
        payload += bank.embeddings[i].tobytes()
    payload += np.uint32(zlib.crc32(bytes(payload)) & 0xFFFFFFFF).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(payload))
    except OSError as exc:
        raise DataError(f"cannot write feature bank: {exc}") from exc


def load_bank(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read feature bank: {exc}") from exc
    if len(raw) < 24 or raw[:4] != BANK_MAGIC:
        raise DataError(f"not a feature bank file: {path}")
    stored = int(np.frombuffer(raw[-4:], np.uint32)[0])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored:
        raise DataError(f"feature bank checksum mismatch: {path}")
    version = int(np.frombuffer(raw, np.uint32, 1, 4)[0])
    if version != BANK_VERSION:
        raise VersionError(f"feature bank version {version}, expected {BANK_VERSION}")
    n = int(np.frombuffer(raw, np.uint64, 1, 8)[0])
    dim = int(np.frombuffer(raw, np.uint32, 1, 16)[0])
    row_bytes = 4 + 4 + 1 + 4 * dim
    if len(raw) != 20 + n * row_bytes + 4:
        raise DataError(f"feature bank truncated: {path}")
    ids = np.empty(n, np.int32)
    cams = np.empty(n, np.int32)
    mods = np.empty(n, np.uint8)
    emb = np.empty((n, dim), np.float32)
    off = 20
    for i in range(n):
        ids[i] = np.frombuffer(raw, np.int32, 1, off)[0]
        cams[i] = np.frombuffer(raw, np.int32, 1, off + 4)[0]
        mods[i] = raw[off + 8]
        emb[i] = np.frombuffer(raw, np.float32, dim, off + 9)
        off += row_bytes
    return FeatureBank(emb, ids, cams, mods)


@dataclass
class RetrievalReport:
    cmc: np.ndarray  # [max_rank]
    map: float
    minp: float
    num_valid_queries: int

    def as_dict(self):
        out = {"map": self.map, "minp": self.minp,
               "num_valid_queries": self.num_valid_queries}
        for k in range(len(self.cmc)):
            out[f"rank{k + 1}"] = float(self.cmc[k])
        return out


def pairwise_distance(query, gallery):
    """Euclidean distance matrix [Nq, Ng] in float64, chunked over queries."""
    q = query.embeddings.astype(np.float64)
    g = gallery.embeddings.astype(np.float64)
    if q.shape[1] != g.shape[1]:
        raise ShapeError(f"embed dim mismatch: {q.shape[1]} vs {g.shape[1]}")
    out = np.empty((q.shape[0], g.shape[0]), np.float64)
    # chunk queries so the [chunk, Ng, dim] diff cube stays around 4M floats
    step = max(1, (1 << 22) // max(1, g.shape[0] * g.shape[1]))
    for lo in range(0, q.shape[0], step):
        hi = min(lo + step, q.shape[0])
        diff = q[lo:hi, None, :] - g[None, :, :]
        out[lo:hi] = np.sqrt((diff * diff).sum(axis=2))
    return out


def evaluate(query, gallery, max_rank=20, distances=None):
    """Rank the gallery per query and report CMC curve, mAP, mINP.

    distances may be passed to reuse a precomputed matrix; otherwise
    pairwise_distance(query, gallery) is used.
    """
    if len(query) == 0 or len(gallery) == 0:
        raise MscmError("evaluate: empty query or gallery bank")
    dist = pairwise_distance(query, gallery) if distances is None else distances
    if dist.shape != (len(query), len(gallery)):
        raise ShapeError(f"distance matrix {dist.shape} for {len(query)}x{len(gallery)}")

    cmc_hits = np.zeros(max_rank, np.float64)
    aps = []
    inps = []
    for i in range(len(query)):
        keep = ~((gallery.ids == query.ids[i]) & (gallery.cams == query.cams[i]))
        order = np.argsort(dist[i], kind="stable")  # stable: ties fall back to gallery index
        order = order[keep[order]]
        matches = gallery.ids[order] == query.ids[i]
        ranks = np.flatnonzero(matches) + 1
        if len(ranks) == 0:
            continue
        first = int(ranks[0])
        if first <= max_rank:
            cmc_hits[first - 1:] += 1.0
        aps.append(math.fsum((j + 1) / r for j, r in enumerate(ranks)) / len(ranks))
        inps.append(len(ranks) / float(ranks[-1]))
    if not aps:
        raise MscmError("evaluate: no query kept a correct match after filtering")
    n = len(aps)
    return RetrievalReport(
        cmc=cmc_hits / n,
        map=math.fsum(aps) / n,
        minp=math.fsum(inps) / n,
        num_valid_queries=n,
    )


def build_banks(model, dataset, ids=None, batch_size=64, workers=1):
    """Embed every record of the given identities into per-modality banks.

    Camera ids are offset per modality (modality_index * cams_per_modality +
    camera) so a visible and an infrared record never share a camera id; the
    same-identity same-camera drop rule then never removes a cross-modal match.

    workers > 1 extracts chunks concurrently; eval-mode forward passes are
    per-sample computations, so chunking cannot change the embeddings.
    """
    ids = dataset.identities() if ids is None else list(ids)
    cams = dataset.params.cams_per_modality
    v_recs, t_recs = [], []
    for ident in ids:
        v_recs.extend(dataset.records_of(ident, "V"))
        t_recs.extend(dataset.records_of(ident, "T"))
    if not v_recs or not t_recs:
        raise DataError("both modalities must be present to build feature banks")
    v_pixels = [r.float_chw() for r in v_recs]
    t_pixels = [r.float_chw() for r in t_recs]
    with no_grad():
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            def chunks(seq):
                span = max(batch_size, -(-len(seq) // workers))
                return [seq[lo:lo + span] for lo in range(0, len(seq), span)]

            cv, ct = chunks(v_pixels), chunks(t_pixels)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts_v = list(pool.map(
                    lambda c: model.forward_eval(c, [], batch_size=batch_size)[0], cv))
                parts_t = list(pool.map(
                    lambda c: model.forward_eval([], c, batch_size=batch_size)[1], ct))
            emb_v = np.vstack(parts_v)
            emb_t = np.vstack(parts_t)
        else:
            emb_v, emb_t = model.forward_eval(v_pixels, t_pixels, batch_size=batch_size)
    bank_v = FeatureBank(
        emb_v,
        np.array([r.identity for r in v_recs], np.int32),
        np.array([r.camera for r in v_recs], np.int32),
        np.zeros(len(v_recs), np.uint8),
    )
    bank_t = FeatureBank(
        emb_t,
        np.array([r.identity for r in t_recs], np.int32),
        np.array([cams + r.camera for r in t_recs], np.int32),
        np.ones(len(t_recs), np.uint8),
    )
    return bank_v, bank_t


def sample_gallery(bank, rng):
    """One random row per (identity, camera) pair — the per-trial gallery."""
    rows = []
    for ident in np.unique(bank.ids):
        for cam in np.unique(bank.cams[bank.ids == ident]):
            pool = np.flatnonzero((bank.ids == ident) & (bank.cams == cam))
            rows.append(int(pool[rng.integers(len(pool))]))
    return bank.select(np.array(sorted(rows), np.int64))


def mean_report(reports):
    n = len(reports)
    return RetrievalReport(
        cmc=np.mean([r.cmc for r in reports], axis=0),
        map=math.fsum(r.map for r in reports) / n,
        minp=math.fsum(r.minp for r in reports) / n,
        num_valid_queries=int(round(np.mean([r.num_valid_queries for r in reports]))),
    )


def run_protocol(bank_v, bank_t, protocol="t2v", trials=10, seed=0, max_rank=20):
    """Multi-trial retrieval: full query bank vs per-trial sampled galleries.

    t2v queries infrared against visible galleries; v2t the reverse.
    Returns (averaged report, per-trial reports); deterministic per seed.
    """
    if protocol not in ("t2v", "v2t"):
        raise MscmError(f"protocol must be t2v or v2t, got {protocol}")
    query, gallery_pool = (bank_t, bank_v) if protocol == "t2v" else (bank_v, bank_t)
    if len(query) == 0 or len(gallery_pool) == 0:
        raise DataError("protocol requires both modalities in the test split")
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(trials):
        gallery = sample_gallery(gallery_pool, rng)
        reports.append(evaluate(query, gallery, max_rank=max_rank))
    return mean_report(reports), reports


def write_report(report, path):
    lines = [f"{key} = {value:.6f}" if isinstance(value, float) else f"{key} = {value}"
             for key, value in report.as_dict().items()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_cmc_csv(report, path):
    with open(path, "w") as fh:
        fh.write("rank,cmc\n")
        for k, value in enumerate(report.cmc, start=1):
            fh.write(f"{k},{value:.6f}\n")

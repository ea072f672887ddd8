"""Stream expansion and training-time augmentation.

Every image becomes a (g, c) stream pair: RGB keeps the original as g and a
channel-exchanged copy as c; infrared is expanded to three channels by
per-channel affine maps (near-identity draws for g, full-range draws for c).
Geometric transforms (resize/pad, flip, erase: box position and noise alike)
are drawn once per source image and applied identically to its g/c pair, so
the pair differs only in channel content.
"""

from dataclasses import dataclass

import numpy as np

from .. import interp
from ..errors import ConfigError, MscmError, ShapeError
from ..tensor import Tensor


@dataclass
class AugmentConfig:
    p_flip: float = 0.5
    p_erase: float = 0.5
    erase_area: tuple = (0.02, 0.20)
    exchange_mode: str = "replicate"  # replicate | permute
    tg_jitter: float = 0.25
    tc_jitter: float = 1.0
    enabled: bool = True

    def validate(self):
        for name in ("p_flip", "p_erase"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        lo, hi = self.erase_area
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"erase_area must satisfy 0 <= lo <= hi <= 1, got {self.erase_area}")
        if self.exchange_mode not in ("replicate", "permute"):
            raise ConfigError(f"exchange_mode must be replicate or permute, got {self.exchange_mode}")
        return self


@dataclass
class StreamBatch:
    x_vg: Tensor
    x_vc: Tensor
    x_tg: Tensor
    x_tc: Tensor
    ids: np.ndarray
    cams: np.ndarray


def channel_exchange_rgb(img, rng, mode="replicate"):
    """Replace all channels by copies of one uniformly chosen channel."""
    if img.shape[0] != 3:
        raise ShapeError(f"channel_exchange_rgb needs [3,H,W], got {img.shape}")
    if mode == "replicate":
        src = int(rng.integers(3))
        return np.repeat(img[src:src + 1], 3, axis=0)
    perm = rng.permutation(3)
    return img[perm]


def ir_channel_expand(img, rng, jitter=1.0):
    """[1,H,W] -> [3,H,W] via per-channel clamp(g_k*x + b_k).

    At jitter=1 gains are Uniform(0.8, 1.2) and offsets Uniform(-0.05, 0.05);
    jitter scales both deviations toward the identity map (jitter=0 copies).
    """
    if img.shape[0] != 1:
        raise ShapeError(f"ir_channel_expand needs [1,H,W], got {img.shape}")
    if jitter > 0:
        gains = 1.0 + jitter * rng.uniform(-0.2, 0.2, 3)
        offsets = jitter * rng.uniform(-0.05, 0.05, 3)
    else:
        gains = np.ones(3)
        offsets = np.zeros(3)
    out = gains[:, None, None] * img + offsets[:, None, None]
    return np.clip(out, 0.0, 1.0)


def resize_zero_pad(img, target_h, target_w):
    """Aspect-preserving bilinear fit, centered on a zero canvas."""
    if target_h < 1 or target_w < 1:
        raise ConfigError(f"bad resize target {target_h}x{target_w}")
    c, h, w = img.shape
    scale = min(target_h / h, target_w / w)
    nh = max(1, int(round(h * scale)))
    nw = max(1, int(round(w * scale)))
    if (nh, nw) != (h, w):
        mh = interp.bilinear_matrix(h, nh, img.dtype)
        mw = interp.bilinear_matrix(w, nw, img.dtype)
        img = np.matmul(np.matmul(mh, img), mw.T)
    out = np.zeros((c, target_h, target_w), dtype=img.dtype)
    top = (target_h - nh) // 2
    left = (target_w - nw) // 2
    out[:, top:top + nh, left:left + nw] = img
    return out


def random_hflip(img, p, rng):
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"flip probability {p} outside [0, 1]")
    if p > 0 and rng.random() < p:
        return img[:, :, ::-1].copy()
    return img


def _erase_plan(shape, area_range, rng):
    """Draw an erase region covering an exact stochastically rounded count.

    Target area A = a*H*W with a ~ Uniform(area_range). The pixel count is
    n = floor(A) + [u < frac(A)] (stochastic rounding, so fractional targets
    average out exactly). A box of aspect ratio r ~ log-Uniform(0.3, 1/0.3)
    is sized to cover >= n cells and the first n cells in row-major order are
    replaced, so exactly n pixels change.
    """
    _, h, w = shape
    a = rng.uniform(area_range[0], area_range[1])
    target = a * h * w
    n = int(np.floor(target)) + (1 if rng.random() < target - np.floor(target) else 0)
    if n <= 0:
        return None
    n = min(n, h * w)
    r = np.exp(rng.uniform(np.log(0.3), np.log(1.0 / 0.3)))
    bh = min(max(int(round(np.sqrt(n * r))), 1), h)
    bw = -(-n // bh)
    if bw > w:
        bw = w
        bh = min(h, -(-n // bw))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    noise = 0.1 + 0.8 * rng.random(n)  # per-pixel scalar, shared across channels
    return top, left, bh, bw, n, noise


def _apply_erase(img, plan):
    top, left, bh, bw, n, noise = plan
    cells = np.arange(n)
    rows = top + cells // bw
    cols = left + cells % bw
    img[:, rows, cols] = noise[None, :].astype(img.dtype)
    return img


def random_erase(img, p, area_range, rng):
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"erase probability {p} outside [0, 1]")
    lo, hi = area_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigError(f"erase area range {area_range} invalid")
    if p <= 0 or rng.random() >= p:
        return img
    plan = _erase_plan(img.shape, area_range, rng)
    if plan is None:
        return img
    return _apply_erase(np.ascontiguousarray(img), plan)


def _geom_plan(cfg, shape, rng):
    """One geometric draw per source image, shared by its stream pair."""
    flip = cfg.p_flip > 0 and rng.random() < cfg.p_flip
    erase = None
    if cfg.p_erase > 0 and rng.random() < cfg.p_erase:
        erase = _erase_plan(shape, cfg.erase_area, rng)
    return flip, erase


def _apply_geom(img, plan):
    flip, erase = plan
    if flip:
        img = img[:, :, ::-1]
    img = np.ascontiguousarray(img)
    if erase is not None:
        img = _apply_erase(img, erase)
    return img


def make_stream_batch(v_records, t_records, cfg, rng, target_hw, dtype=np.float32):
    """Expand sampled records into the four aligned stream tensors."""
    if len(v_records) != len(t_records):
        raise MscmError(
            f"stream batch needs equal modality counts, got {len(v_records)} V, {len(t_records)} T"
        )
    cfg.validate()
    th, tw = target_hw
    vg, vc, tg, tc = [], [], [], []

    for rec in v_records:
        img = rec.float_chw(dtype)
        if cfg.enabled:
            g = resize_zero_pad(img, th, tw)
            c = resize_zero_pad(channel_exchange_rgb(img, rng, cfg.exchange_mode), th, tw)
            plan = _geom_plan(cfg, g.shape, rng)
            g = _apply_geom(g, plan)
            c = _apply_geom(c, plan)
        else:
            g = resize_zero_pad(img, th, tw)
            c = g.copy()
        vg.append(g)
        vc.append(c)

    for rec in t_records:
        base = rec.float_chw(dtype)
        if cfg.enabled:
            g = resize_zero_pad(ir_channel_expand(base, rng, cfg.tg_jitter), th, tw)
            c = resize_zero_pad(ir_channel_expand(base, rng, cfg.tc_jitter), th, tw)
            plan = _geom_plan(cfg, g.shape, rng)
            g = _apply_geom(g, plan)
            c = _apply_geom(c, plan)
        else:
            g = resize_zero_pad(np.repeat(base, 3, axis=0), th, tw)
            c = g.copy()
        tg.append(g)
        tc.append(c)

    ids = np.array([r.identity for r in v_records] + [r.identity for r in t_records], np.int64)
    cams = np.array([r.camera for r in v_records] + [r.camera for r in t_records], np.int64)
    return StreamBatch(
        x_vg=Tensor(np.stack(vg).astype(dtype)),
        x_vc=Tensor(np.stack(vc).astype(dtype)),
        x_tg=Tensor(np.stack(tg).astype(dtype)),
        x_tc=Tensor(np.stack(tc).astype(dtype)),
        ids=ids,
        cams=cams,
    )

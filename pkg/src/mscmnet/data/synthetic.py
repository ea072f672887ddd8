"""Synthetic paired visible/infrared identity generator.

Each identity gets a 16-dim latent controlling body geometry (torso ellipse,
head, leg placement, stripe boundaries) and a luminance/hue palette. Hue
components are built on a zero-mean color wheel so they vanish under the
channel mean, while luminance levels and geometry survive it: infrared
renders stay identity-discriminative, color only helps within the visible
modality.

Infrared sample s of an identity is derived from its paired visible sample s:
channel-mean of the stored 8-bit pixels, then a modality_gap-scaled intensity
distortion (gamma, contrast, offset) and integer translation, plus sensor
noise. With modality_gap=0 and noise_std=0 the infrared pixels equal
round(mean(R,G,B)) of the paired visible pixels exactly.

Everything is derived from per-(identity, sample) generators seeded by
namespaced SeedSequences, so generation is order-independent and byte-stable.
"""

import numpy as np

from .store import Dataset, GenParams, SampleRecord

_TWO_PI = 2.0 * np.pi


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence(key))


def _hue_wheel(theta):
    """Zero-mean RGB offsets for a hue angle: collapses to 0 under mean."""
    return np.array([
        np.cos(theta), np.cos(theta - _TWO_PI / 3.0), np.cos(theta + _TWO_PI / 3.0),
    ])


def _color(lum, theta, sat):
    return np.clip(lum + sat * _hue_wheel(theta), 0.12, 0.97)


class _Appearance:
    """Identity attributes decoded from the 16-dim latent."""

    def __init__(self, z):
        self.ry_f = 0.20 + 0.16 * z[0]        # torso half-height, fraction of H
        self.rx_f = 0.17 + 0.14 * z[1]        # torso half-width, fraction of W
        self.head_f = 0.055 + 0.05 * z[2]     # head radius, fraction of H
        self.base_color = _color(0.25 + 0.55 * z[4], _TWO_PI * z[3], 0.28)
        self.split1 = 0.15 + 0.30 * z[6]      # stripe boundaries within torso
        self.split2 = min(self.split1 + 0.20 + 0.30 * z[7], 0.92)
        self.stripe_colors = [
            _color(0.20 + 0.70 * z[8 + k], _TWO_PI * z[11 + k], 0.22) for k in range(3)
        ]
        self.head_color = _color(0.30 + 0.55 * z[14], _TWO_PI * z[5], 0.15)
        self.leg_color = _color(0.18 + 0.55 * z[15], _TWO_PI * z[3], 0.10)


def _render_scene(params, app, cam, sample_rng):
    """Visible render as float [H, W, 3] in [0, 1], before noise."""
    h, w = params.image_h, params.image_w
    img = np.zeros((h, w, 3))

    # camera geometry offset plus per-sample jitter
    cam_center = (params.cams_per_modality - 1) / 2.0
    dx = (cam - cam_center) * 0.05 * w + sample_rng.normal(0.0, 0.015 * w)
    dy = sample_rng.normal(0.0, 0.012 * h)
    scale = 1.0 + sample_rng.normal(0.0, 0.03)

    cy = 0.52 * h + dy
    cx = 0.50 * w + dx
    ry = app.ry_f * h * scale
    rx = app.rx_f * w * scale
    head_r = app.head_f * h * scale

    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]

    # legs below the torso
    leg_top = cy + 0.55 * ry
    leg_bot = min(cy + 1.9 * ry, 0.97 * h)
    leg_w = 0.30 * rx
    for side in (-0.45, 0.45):
        lx = cx + side * 2.0 * rx * 0.5
        mask = (yy >= leg_top) & (yy < leg_bot) & (np.abs(xx - lx) <= leg_w)
        img[mask] = app.leg_color

    # torso ellipse with three horizontal stripe bands
    torso = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    frac = (yy - (cy - ry)) / (2.0 * ry)
    bands = [
        torso & (frac < app.split1),
        torso & (frac >= app.split1) & (frac < app.split2),
        torso & (frac >= app.split2),
    ]
    img[torso] = app.base_color
    for band, color in zip(bands, app.stripe_colors):
        img[band] = color

    # head above the torso
    head_cy = cy - ry - 1.15 * head_r
    head = (yy - head_cy) ** 2 + (xx - cx) ** 2 <= head_r ** 2
    img[head] = app.head_color

    # camera and per-sample brightness
    if params.cams_per_modality > 1:
        cam_bright = 1.0 + 0.06 * (2.0 * cam / (params.cams_per_modality - 1) - 1.0)
    else:
        cam_bright = 1.0
    img *= cam_bright + sample_rng.normal(0.0, 0.03)
    return img


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_visible(params, ident, sample):
    z = _rng(params.seed, 1, ident).random(16)
    cam = sample % params.cams_per_modality
    rng = _rng(params.seed, 2, ident, sample)
    img = _render_scene(params, _Appearance(z), cam, rng)
    if params.noise_std > 0:
        img = img + rng.normal(0.0, params.noise_std, img.shape)
    return _quantize(img), cam


def derive_infrared(params, v_pixels, ident, sample):
    """Infrared pixels [H, W, 1] derived from the paired visible sample."""
    cam = sample % params.cams_per_modality
    gray = v_pixels.astype(np.float64).mean(axis=2)
    gap = params.modality_gap
    if gap > 0:
        rng = _rng(params.seed, 3, ident, sample)
        g01 = gray / 255.0
        gamma = 1.0 + gap * rng.uniform(-0.35, 0.35)
        contrast = 1.0 + gap * rng.uniform(-0.25, 0.25)
        offset = gap * rng.uniform(-0.12, 0.12)
        g01 = np.clip(g01, 0.0, 1.0) ** gamma * contrast + offset
        cam_center = (params.cams_per_modality - 1) / 2.0
        shift = int(round(gap * (cam - cam_center) * 0.04 * params.image_w))
        if shift != 0:
            rolled = np.zeros_like(g01)
            if shift > 0:
                rolled[:, shift:] = g01[:, :-shift]
            else:
                rolled[:, :shift] = g01[:, -shift:]
            g01 = rolled
        if params.noise_std > 0:
            g01 = g01 + rng.normal(0.0, params.noise_std, g01.shape)
        out = _quantize(g01)
    elif params.noise_std > 0:
        rng = _rng(params.seed, 3, ident, sample)
        out = _quantize(gray / 255.0 + rng.normal(0.0, params.noise_std, gray.shape))
    else:
        out = np.round(gray).astype(np.uint8)
    return out[:, :, None], cam


def _identity_records(args):
    """All records of one identity: its V block followed by its T block."""
    params, ident = args
    records = []
    v_pixels = []
    for s in range(params.samples_per_id):
        pixels, cam = render_visible(params, ident, s)
        v_pixels.append(pixels)
        records.append(SampleRecord(ident, "V", cam, pixels))
    for s in range(params.samples_per_id):
        pixels, cam = derive_infrared(params, v_pixels[s], ident, s)
        records.append(SampleRecord(ident, "T", cam, pixels))
    return records


def generate_dataset(params, workers=1):
    """All records for params, grouped per identity (V block then T block).

    Every record derives from its own seeded generator, so rendering
    identities in a worker pool yields byte-identical output.
    """
    params.validate()
    jobs = [(params, ident) for ident in range(params.num_identities)]
    if workers > 1:
        import multiprocessing

        with multiprocessing.Pool(workers) as pool:
            blocks = pool.map(_identity_records, jobs)
    else:
        blocks = [_identity_records(job) for job in jobs]
    records = [rec for block in blocks for rec in block]
    return Dataset(params, records)

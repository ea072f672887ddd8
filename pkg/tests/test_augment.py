"""Stream expansion and augmentation transforms."""

import collections

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mscmnet.data.augment import (
    AugmentConfig,
    channel_exchange_rgb,
    ir_channel_expand,
    make_stream_batch,
    random_erase,
    random_hflip,
    resize_zero_pad,
)
from mscmnet.errors import ConfigError, MscmError, ShapeError

from conftest import TINY_GEN


def _img(rng, c=3, h=8, w=6):
    return rng.random((c, h, w))


# -- channel exchange ---------------------------------------------------------

def test_exchange_replicate_copies_one_channel():
    rng = np.random.default_rng(0)
    img = np.stack([np.full((4, 4), v) for v in (0.1, 0.5, 0.9)])
    out = channel_exchange_rgb(img, rng, "replicate")
    assert out.shape == (3, 4, 4)
    # all three channels equal, and equal to one of the originals
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])
    assert out[0, 0, 0] in (0.1, 0.5, 0.9)


def test_exchange_permute_keeps_channel_content():
    rng = np.random.default_rng(1)
    img = _img(np.random.default_rng(2))
    out = channel_exchange_rgb(img, rng, "permute")
    got = {out[k].tobytes() for k in range(3)}
    want = {img[k].tobytes() for k in range(3)}
    assert got == want


def test_exchange_grayscale_invariant():
    # replicate mode is a no-op when the channels already agree
    rng = np.random.default_rng(3)
    gray = np.repeat(np.random.default_rng(4).random((1, 5, 5)), 3, axis=0)
    assert np.array_equal(channel_exchange_rgb(gray, rng, "replicate"), gray)


def test_exchange_channel_choice_uniform():
    img = np.stack([np.full((2, 2), v) for v in (0.0, 0.5, 1.0)])
    rng = np.random.default_rng(5)
    counts = collections.Counter(
        float(channel_exchange_rgb(img, rng, "replicate")[0, 0, 0]) for _ in range(3000)
    )
    for v in (0.0, 0.5, 1.0):
        assert abs(counts[v] / 3000 - 1 / 3) < 0.03


def test_exchange_rejects_non_rgb():
    with pytest.raises(ShapeError):
        channel_exchange_rgb(np.zeros((1, 4, 4)), np.random.default_rng(0))


# -- infrared expansion -------------------------------------------------------

def test_ir_expand_identity_at_zero_jitter():
    base = np.random.default_rng(6).random((1, 6, 4))
    out = ir_channel_expand(base, np.random.default_rng(7), jitter=0.0)
    assert out.shape == (3, 6, 4)
    for k in range(3):
        assert np.array_equal(out[k], base[0])


def test_ir_expand_draw_ranges():
    # gains land in 1 +- 0.2*jitter, offsets in +-0.05*jitter; with a constant
    # mid-gray input the output per channel is gain*0.5 + offset
    base = np.full((1, 4, 4), 0.5)
    rng = np.random.default_rng(8)
    vals = np.array([ir_channel_expand(base, rng, jitter=1.0)[:, 0, 0] for _ in range(500)])
    assert vals.min() >= 0.5 * 0.8 - 0.05
    assert vals.max() <= 0.5 * 1.2 + 0.05
    assert vals.std() > 0.01  # actually varies


def test_ir_expand_stays_in_unit_range():
    base = np.random.default_rng(9).random((1, 8, 8))
    rng = np.random.default_rng(10)
    for _ in range(20):
        out = ir_channel_expand(base, rng, jitter=1.0)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_ir_expand_channels_strongly_correlated():
    # affine maps preserve structure: away from the [0, 1] clamp (inputs in
    # [0.1, 0.75] cannot saturate at jitter=1) channels correlate perfectly
    base = 0.1 + 0.65 * np.random.default_rng(11).random((1, 16, 12))
    out = ir_channel_expand(base, np.random.default_rng(12), jitter=1.0)
    flat = out.reshape(3, -1)
    for a in range(3):
        for b in range(a + 1, 3):
            r = np.corrcoef(flat[a], flat[b])[0, 1]
            assert r >= 0.999


def test_ir_expand_rejects_multichannel():
    with pytest.raises(ShapeError):
        ir_channel_expand(np.zeros((3, 4, 4)), np.random.default_rng(0))


# -- resize / flip / erase ----------------------------------------------------

def test_resize_identity():
    img = _img(np.random.default_rng(13), 3, 8, 6)
    assert np.array_equal(resize_zero_pad(img, 8, 6), img)


def test_resize_square_to_tall_pads_rows():
    # 48x48 into 96x48: scale=1, content centered at rows 24..71
    img = np.ones((3, 48, 48))
    out = resize_zero_pad(img, 96, 48)
    assert out.shape == (3, 96, 48)
    assert np.all(out[:, :24] == 0.0)
    assert np.all(out[:, 72:] == 0.0)
    assert np.all(out[:, 24:72] == 1.0)


def test_resize_preserves_aspect():
    img = np.ones((1, 10, 10))
    out = resize_zero_pad(img, 20, 40)
    # limited by height: 10x10 -> 20x20, centered horizontally
    assert np.all(out[:, :, 10:30] > 0.99)
    assert np.all(out[:, :, :10] == 0.0) and np.all(out[:, :, 30:] == 0.0)


def test_flip_is_involution_and_probabilistic():
    img = _img(np.random.default_rng(14))
    assert np.array_equal(random_hflip(img, 0.0, np.random.default_rng(0)), img)
    flipped = random_hflip(img, 1.0, np.random.default_rng(0))
    assert np.array_equal(flipped, img[:, :, ::-1])
    assert np.array_equal(random_hflip(flipped, 1.0, np.random.default_rng(0)), img)


def test_erase_exact_pixel_count():
    # area range pinned to [0.1, 0.1] on 96x48: target 460.8 pixels, so the
    # stochastic rounding changes exactly 460 or 461 of them
    rng = np.random.default_rng(15)
    base = np.full((3, 96, 48), 0.5)
    counts = set()
    for _ in range(50):
        out = random_erase(base.copy(), 1.0, (0.1, 0.1), rng)
        changed = int((out != base).any(axis=0).sum())
        counts.add(changed)
    assert counts <= {460, 461}
    assert len(counts) == 2  # both roundings occur in 50 draws


def test_erase_noise_shared_across_channels():
    rng = np.random.default_rng(16)
    out = random_erase(np.zeros((3, 32, 16)), 1.0, (0.2, 0.2), rng)
    changed = (out != 0).any(axis=0)
    region = out[:, changed]
    assert np.array_equal(region[0], region[1]) and np.array_equal(region[1], region[2])
    assert region.min() >= 0.1 and region.max() <= 0.9


def test_erase_zero_probability_is_identity():
    img = _img(np.random.default_rng(17))
    assert random_erase(img, 0.0, (0.1, 0.3), np.random.default_rng(0)) is img


# -- stream batches -----------------------------------------------------------

def test_stream_batch_shapes_and_ids(tiny_dataset):
    v = tiny_dataset.records_of(0, "V")[:2] + tiny_dataset.records_of(1, "V")[:2]
    t = tiny_dataset.records_of(0, "T")[:2] + tiny_dataset.records_of(1, "T")[:2]
    batch = make_stream_batch(v, t, AugmentConfig(), np.random.default_rng(0), (96, 48))
    for x in (batch.x_vg, batch.x_vc, batch.x_tg, batch.x_tc):
        assert x.data.shape == (4, 3, 96, 48)
        assert x.data.dtype == np.float32
        assert x.data.min() >= 0.0 and x.data.max() <= 1.0
    assert batch.ids.tolist() == [0, 0, 1, 1, 0, 0, 1, 1]
    assert batch.cams.tolist() == [r.camera for r in v] + [r.camera for r in t]


def test_stream_batch_disabled_passthrough(tiny_dataset):
    # augmentation off: g stream is the raw resize, c == g, T expanded by copy
    v = tiny_dataset.records_of(2, "V")[:2]
    t = tiny_dataset.records_of(2, "T")[:2]
    cfg = AugmentConfig(enabled=False)
    batch = make_stream_batch(v, t, cfg, np.random.default_rng(0), (96, 48))
    assert np.array_equal(batch.x_vg.data, batch.x_vc.data)
    assert np.array_equal(batch.x_tg.data, batch.x_tc.data)
    want = resize_zero_pad(v[0].float_chw(np.float32), 96, 48)
    assert np.allclose(batch.x_vg.data[0], want, atol=1e-7)
    t_want = resize_zero_pad(np.repeat(t[0].float_chw(np.float32), 3, axis=0), 96, 48)
    assert np.allclose(batch.x_tg.data[0], t_want, atol=1e-7)


def test_stream_batch_geometry_shared_within_pair(tiny_dataset):
    # the g/c pair shares one flip/erase draw and differs only in channel
    # content; under permute exchange the channel-sorted stacks are equal
    v = tiny_dataset.records_of(3, "V")[:4]
    t = tiny_dataset.records_of(3, "T")[:4]
    cfg = AugmentConfig(p_flip=1.0, p_erase=1.0, erase_area=(0.2, 0.2), exchange_mode="permute")
    batch = make_stream_batch(v, t, cfg, np.random.default_rng(1), (64, 32))
    # tolerance wide enough for resize matmul rounding, far below any
    # mismatch a divergent flip (~0.5) or erase (>=0.1) would produce
    assert np.allclose(
        np.sort(batch.x_vg.data, axis=1), np.sort(batch.x_vc.data, axis=1), atol=1e-6
    )


def test_stream_batch_t_pair_shares_geometry(tiny_dataset):
    # with both jitters zero the T streams match channel-wise, so any flip or
    # erase divergence between g and c would surface as inequality
    v = tiny_dataset.records_of(4, "V")[:4]
    t = tiny_dataset.records_of(4, "T")[:4]
    cfg = AugmentConfig(p_flip=0.5, p_erase=1.0, erase_area=(0.2, 0.2),
                        tg_jitter=0.0, tc_jitter=0.0)
    batch = make_stream_batch(v, t, cfg, np.random.default_rng(2), (64, 32))
    assert np.array_equal(batch.x_tg.data, batch.x_tc.data)


def test_stream_batch_rejects_unbalanced(tiny_dataset):
    v = tiny_dataset.records_of(0, "V")[:2]
    t = tiny_dataset.records_of(0, "T")[:1]
    with pytest.raises(MscmError, match="equal modality counts"):
        make_stream_batch(v, t, AugmentConfig(), np.random.default_rng(0), (32, 16))


def test_augment_config_validation():
    with pytest.raises(ConfigError):
        AugmentConfig(p_flip=1.5).validate()
    with pytest.raises(ConfigError):
        AugmentConfig(erase_area=(0.5, 0.2)).validate()
    with pytest.raises(ConfigError):
        AugmentConfig(exchange_mode="swap").validate()


@settings(max_examples=20, deadline=None)
@given(st.integers(8, 40), st.integers(8, 40), st.integers(8, 40), st.integers(8, 40))
def test_resize_fills_canvas_along_one_axis(h, w, th, tw):
    img = np.ones((1, h, w))
    out = resize_zero_pad(img, th, tw)
    assert out.shape == (1, th, tw)
    nh = int(round(h * min(th / h, tw / w)))
    nw = int(round(w * min(th / h, tw / w)))
    # scaled content touches the target box along its binding axis
    assert max(nh, 1) == th or max(nw, 1) == tw or (nh >= th - 1 or nw >= tw - 1)
    assert out.sum() > 0

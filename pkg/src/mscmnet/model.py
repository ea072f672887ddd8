"""The cross-modal re-identification network.

Four independent stem networks (one per input stream) feed a shared stack of
strided stages. Stage outputs are retained; a chain of attention link blocks
mines them back into the deepest feature map. Pooled features pass a
batch-norm neck into per-stream embeddings and a shared identity classifier.

Training processes the visible pair and the infrared pair as two 2B-row
stacks through the shared trunk (in that order). Evaluation fuses each
modality's two stem outputs into one stack and L2-normalizes the embeddings.
"""

from dataclasses import dataclass

import numpy as np

from . import interp, ops
from .errors import ConfigError, MscmError, ShapeError
from .nn import Attention, BatchNorm, Conv2d, Linear, Module
from .tensor import Tensor


@dataclass
class ModelConfig:
    stage_channels: tuple = (8, 16, 32, 64, 64)  # stem + stages 1..4
    stage_strides: tuple = (2, 2, 2, 1)
    num_alb: int = 4
    attn_dim: int = 32
    attn_heads: int = 2
    token_grid: tuple = (6, 3)
    fusion_alpha: float = 0.5
    alb_mix_alpha: float = 0.1
    num_classes: int = 32
    embed_dim: int = 64
    qfe_mode: str = "quad"  # quad | dual
    mimb: bool = True
    multiscale: bool = True
    final_stage: bool = True
    alb_injection_order: str = "shallow_first"  # shallow_first | deep_first

    def validate(self):
        if len(self.stage_channels) != 5:
            raise ConfigError(f"stage_channels needs 5 entries, got {self.stage_channels}")
        if len(self.stage_strides) != 4:
            raise ConfigError(f"stage_strides needs 4 entries, got {self.stage_strides}")
        if not 0 <= self.num_alb <= 5:
            raise ConfigError(f"num_alb must be in [0, 5], got {self.num_alb}")
        if not 0.0 <= self.fusion_alpha <= 1.0:
            raise ConfigError(f"fusion_alpha must be in [0, 1], got {self.fusion_alpha}")
        if not 0.0 <= self.alb_mix_alpha <= 1.0:
            raise ConfigError(f"alb_mix_alpha must be in [0, 1], got {self.alb_mix_alpha}")
        if self.attn_dim % self.attn_heads != 0:
            raise ConfigError(f"attn_dim {self.attn_dim} not divisible by {self.attn_heads} heads")
        if self.qfe_mode not in ("quad", "dual"):
            raise ConfigError(f"qfe_mode must be quad or dual, got {self.qfe_mode}")
        if self.alb_injection_order not in ("shallow_first", "deep_first"):
            raise ConfigError(f"bad alb_injection_order {self.alb_injection_order}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        return self


@dataclass
class StreamEmbeddings:
    """Per-stream embeddings plus classifier logits, row-aligned with ids."""

    streams_v: list
    streams_t: list
    ids_v: np.ndarray
    ids_t: np.ndarray
    logits: Tensor = None

    @property
    def f_vg(self):
        return self.streams_v[0]

    @property
    def f_tg(self):
        return self.streams_t[0]


class Stem(Module):
    """Per-stream front end: conv3x3 + norm + relu + 2x2 max pool."""

    def __init__(self, name, cin, cout, rng, dtype):
        self.conv = Conv2d(f"{name}.conv", cin, cout, 3, stride=1, pad=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm(f"{name}.bn", cout, rng, dtype)

    def forward(self, x, training):
        return ops.max_pool2d(ops.relu(self.bn.forward(self.conv.forward(x), training)), 2, 2)


class Stage(Module):
    """Shared trunk stage: strided conv3x3 + norm + relu."""

    def __init__(self, name, cin, cout, stride, rng, dtype):
        self.conv = Conv2d(f"{name}.conv", cin, cout, 3, stride=stride, pad=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm(f"{name}.bn", cout, rng, dtype)

    def forward(self, x, training):
        return ops.relu(self.bn.forward(self.conv.forward(x), training))


def _to_tokens(x, token_grid):
    # [B, d, H, W] -> [B, N, d] by adaptive average pooling to the token grid.
    b, d, h, w = x.data.shape
    th, tw = token_grid
    mh = interp.avg_pool_matrix(h, th, x.data.dtype)
    mw = interp.avg_pool_matrix(w, tw, x.data.dtype)
    pooled = ops.spatial_remap(x, mh, mw)
    return ops.transpose(ops.reshape(pooled, (b, d, th * tw)), (0, 2, 1))


def _tokens_to_map(x, token_grid, out_hw, dtype):
    # [B, N, d] -> [B, d, out_h, out_w] by bilinear resize from the token grid.
    b, n, d = x.data.shape
    th, tw = token_grid
    grid = ops.reshape(ops.transpose(x, (0, 2, 1)), (b, d, th, tw))
    mh = interp.bilinear_matrix(th, out_hw[0], dtype)
    mw = interp.bilinear_matrix(tw, out_hw[1], dtype)
    return ops.spatial_remap(grid, mh, mw)


class Reduce(Module):
    """1x1 conv + norm mapping a feature map to the attention width."""

    def __init__(self, name, cin, d, rng, dtype):
        self.conv = Conv2d(f"{name}.conv", cin, d, 1, stride=1, pad=0, rng=rng, dtype=dtype)
        self.bn = BatchNorm(f"{name}.bn", d, rng, dtype)

    def forward(self, x, training):
        return self.bn.forward(self.conv.forward(x), training)


class AttentionLink(Module):
    """One attention block mining a shallow feature map into a deep one.

    Query and key come from independent reductions of the shallow map; the
    value mixes reduced shallow and reduced deep maps (mix_alpha weighting).
    All three are pooled to a fixed token grid. The attention output plus the
    reduced deep tokens (inner residual) is lifted back to the deep map's
    channel count and spatial size, then added to the deep input (outer
    residual), so a zeroed output branch is an exact identity.
    """

    def __init__(self, deep_ch, shallow_ch, attn_dim, heads, token_grid,
                 mix_alpha, rng, dtype, name="alb"):
        self.token_grid = tuple(token_grid)
        self.mix_alpha = float(mix_alpha)
        d = attn_dim
        self.q_red = Reduce(f"{name}.q_red", shallow_ch, d, rng, dtype)
        self.k_red = Reduce(f"{name}.k_red", shallow_ch, d, rng, dtype)
        self.v_shallow_red = Reduce(f"{name}.v_shallow_red", shallow_ch, d, rng, dtype)
        self.v_deep_red = Reduce(f"{name}.v_deep_red", deep_ch, d, rng, dtype)
        self.attn = Attention(f"{name}.attn", d, heads, rng, dtype)
        self.out_conv = Conv2d(f"{name}.out_conv", d, deep_ch, 1, stride=1, pad=0, rng=rng, dtype=dtype)
        self.out_bn = BatchNorm(f"{name}.out_bn", deep_ch, rng, dtype)
        # Zero-scale output BN: each link starts as an exact identity, so a
        # freshly built model matches the MIMB-free pipeline and the branch
        # only engages once its scale receives gradient.
        self.out_bn.gamma.data[...] = 0.0

    def forward(self, f_deep, g_shallow, training):
        if f_deep.data.shape[0] != g_shallow.data.shape[0]:
            raise ShapeError(
                f"attention link: batch {f_deep.data.shape[0]} vs {g_shallow.data.shape[0]}"
            )
        q = _to_tokens(self.q_red.forward(g_shallow, training), self.token_grid)
        k = _to_tokens(self.k_red.forward(g_shallow, training), self.token_grid)
        v_sh = _to_tokens(self.v_shallow_red.forward(g_shallow, training), self.token_grid)
        v_dp = _to_tokens(self.v_deep_red.forward(f_deep, training), self.token_grid)
        v = ops.add(ops.scale(v_sh, self.mix_alpha), ops.scale(v_dp, 1.0 - self.mix_alpha))

        a = self.attn.forward(q, k, v)
        a = ops.add(a, v_dp)  # inner residual in the reduced space

        out_hw = f_deep.data.shape[2:]
        lifted = _tokens_to_map(a, self.token_grid, out_hw, f_deep.data.dtype)
        branch = self.out_bn.forward(self.out_conv.forward(lifted), training)
        return ops.add(f_deep, branch)

    def zero_branch(self):
        """Zero the output path so forward becomes an exact identity."""
        self.out_conv.weight.data[...] = 0.0
        self.out_bn.gamma.data[...] = 0.0
        self.out_bn.beta.data[...] = 0.0


class Mimb(Module):
    """Chain of attention links injecting retained stage outputs.

    Link k receives the retained output sigma(k) where sigma cycles through
    the injection order; with multiscale off every link receives the deepest
    retained output.
    """

    def __init__(self, cfg, stage_chs, rng, dtype, name="mimb"):
        order = (0, 1, 2, 3) if cfg.alb_injection_order == "shallow_first" else (3, 2, 1, 0)
        self.injection = [order[k % 4] for k in range(cfg.num_alb)]
        deep_ch = stage_chs[3]
        self.albs = []
        for k in range(cfg.num_alb):
            shallow_ch = stage_chs[self.injection[k]] if cfg.multiscale else deep_ch
            self.albs.append(AttentionLink(
                deep_ch, shallow_ch, cfg.attn_dim, cfg.attn_heads, cfg.token_grid,
                cfg.alb_mix_alpha, rng, dtype, name=f"{name}.alb{k}",
            ))
        self.multiscale = cfg.multiscale

    def forward(self, g_list, training):
        f = g_list[3]
        for k, alb in enumerate(self.albs):
            shallow = g_list[self.injection[k]] if self.multiscale else g_list[3]
            f = alb.forward(f, shallow, training)
        return f


class Model(Module):
    def __init__(self, cfg, rng, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        chs = cfg.stage_channels

        if cfg.qfe_mode == "quad":
            stream_names = ("vg", "vc", "tg", "tc")
        else:
            stream_names = ("vg", "tg")
        self.stems = {s: Stem(f"stem.{s}", 3, chs[0], rng, dtype) for s in stream_names}
        self._check_stems_independent()

        self.stages = [
            Stage(f"stage{i + 1}", chs[i], chs[i + 1], cfg.stage_strides[i], rng, dtype)
            for i in range(3)
        ]
        self.mimb = Mimb(cfg, chs[:4], rng, dtype) if cfg.mimb else None
        self.stage4 = (
            Stage("stage4", chs[3], chs[4], cfg.stage_strides[3], rng, dtype)
            if cfg.final_stage else None
        )
        feat_dim = chs[4] if cfg.final_stage else chs[3]
        self.proj = (
            Linear("proj", feat_dim, cfg.embed_dim, rng, dtype, bias=False)
            if feat_dim != cfg.embed_dim else None
        )
        self.neck = BatchNorm("neck", cfg.embed_dim, rng, dtype)
        self.classifier = Linear(
            "classifier", cfg.embed_dim, cfg.num_classes, rng, dtype,
            bias=False, weight_scale=0.01,
        )

    # -- structure -----------------------------------------------------------

    def _check_stems_independent(self):
        buffers = []
        for stem in self.stems.values():
            buffers.extend(id(p.tensor.data) for p in stem.parameters())
        if len(buffers) != len(set(buffers)):
            raise MscmError("stem parameter sets must not share buffers")

    def named_parameters(self):
        out = []
        for stem in self.stems.values():
            out.extend(stem.named_parameters())
        for stage in self.stages:
            out.extend(stage.named_parameters())
        if self.mimb is not None:
            out.extend(self.mimb.named_parameters())
        if self.stage4 is not None:
            out.extend(self.stage4.named_parameters())
        if self.proj is not None:
            out.extend(self.proj.named_parameters())
        out.extend(self.neck.named_parameters())
        out.extend(self.classifier.named_parameters())
        names = [n for n, _ in out]
        if len(names) != len(set(names)):
            raise MscmError("duplicate parameter names in model")
        return out

    def named_buffers(self):
        out = []
        for stem in self.stems.values():
            out.extend(stem.named_buffers())
        for stage in self.stages:
            out.extend(stage.named_buffers())
        if self.mimb is not None:
            out.extend(self.mimb.named_buffers())
        if self.stage4 is not None:
            out.extend(self.stage4.named_buffers())
        out.extend(self.neck.named_buffers())
        return out

    def num_parameters(self):
        return sum(p.tensor.data.size for p in self.parameters())

    def state_tensors(self):
        """All persistent arrays by name: parameters then buffers."""
        out = [(name, p.tensor.data) for name, p in self.named_parameters()]
        out.extend((name, mod.state[key]) for name, mod, key in self.named_buffers())
        return out

    def load_state(self, mapping):
        for name, p in self.named_parameters():
            if name not in mapping:
                raise MscmError(f"checkpoint missing parameter {name}")
            arr = mapping[name]
            if arr.shape != p.tensor.data.shape:
                raise ShapeError(f"checkpoint {name}: shape {arr.shape} vs {p.tensor.data.shape}")
            p.tensor.data[...] = arr
        for name, mod, key in self.named_buffers():
            if name not in mapping:
                raise MscmError(f"checkpoint missing buffer {name}")
            mod.state[key] = mapping[name].astype(self.dtype).copy()

    # -- forward paths -------------------------------------------------------

    def qfe_forward(self, x_vg, x_vc, x_tg, x_tc, training=True):
        """Per-stream stem outputs [G_vg, G_vc, G_tg, G_tc] (quad mode)."""
        if self.cfg.qfe_mode != "quad":
            raise MscmError("qfe_forward with four streams needs quad mode")
        shapes = {t.data.shape for t in (x_vg, x_vc, x_tg, x_tc)}
        if len(shapes) != 1:
            raise ShapeError(f"stream shapes differ: {sorted(shapes)}")
        return [
            self.stems["vg"].forward(x_vg, training),
            self.stems["vc"].forward(x_vc, training),
            self.stems["tg"].forward(x_tg, training),
            self.stems["tc"].forward(x_tc, training),
        ]

    def _trunk(self, g0, training):
        """Shared stages with retained outputs, link chain, final stage, pool."""
        g_list = [g0]
        x = g0
        for stage in self.stages:
            x = stage.forward(x, training)
            g_list.append(x)
        f = self.mimb.forward(g_list, training) if self.mimb is not None else g_list[3]
        if self.stage4 is not None:
            f = self.stage4.forward(f, training)
        pooled = ops.global_avg_pool(f)
        if self.proj is not None:
            pooled = self.proj.forward(pooled)
        return pooled

    def forward_train(self, batch):
        """StreamBatch -> StreamEmbeddings (train mode, batch statistics)."""
        cfg = self.cfg
        b = batch.x_vg.data.shape[0]
        if cfg.qfe_mode == "quad":
            g = self.qfe_forward(batch.x_vg, batch.x_vc, batch.x_tg, batch.x_tc, training=True)
            g0_v = ops.concat([g[0], g[1]], 0)
            g0_t = ops.concat([g[2], g[3]], 0)
        else:
            g0_v = self.stems["vg"].forward(batch.x_vg, True)
            g0_t = self.stems["tg"].forward(batch.x_tg, True)

        pooled_v = self._trunk(g0_v, True)
        pooled_t = self._trunk(g0_t, True)
        feats = ops.concat([pooled_v, pooled_t], 0)
        emb = self.neck.forward(feats, True)
        logits = self.classifier.forward(emb)

        if cfg.qfe_mode == "quad":
            streams_v = [ops.narrow(emb, 0, 0, b), ops.narrow(emb, 0, b, b)]
            streams_t = [ops.narrow(emb, 0, 2 * b, b), ops.narrow(emb, 0, 3 * b, b)]
        else:
            streams_v = [ops.narrow(emb, 0, 0, b)]
            streams_t = [ops.narrow(emb, 0, b, b)]
        return StreamEmbeddings(
            streams_v=streams_v, streams_t=streams_t,
            ids_v=batch.ids[:b], ids_t=batch.ids[b:], logits=logits,
        )

    def train_labels(self, batch):
        """Classifier labels for the logits rows of forward_train."""
        b = batch.x_vg.data.shape[0]
        ids_v, ids_t = batch.ids[:b], batch.ids[b:]
        if self.cfg.qfe_mode == "quad":
            return np.concatenate([ids_v, ids_v, ids_t, ids_t])
        return np.concatenate([ids_v, ids_t])

    def _eval_expand_rgb(self, imgs):
        """Deterministic eval streams for RGB pixels [N,3,H,W] in [0,1]."""
        g = imgs.astype(self.dtype, copy=True)
        mean = imgs.mean(axis=1, keepdims=True).astype(self.dtype)
        c = np.repeat(mean, 3, axis=1)
        return Tensor(g), Tensor(c)

    def _eval_expand_ir(self, imgs):
        """Deterministic eval streams for IR pixels [N,1,H,W]: plain copies."""
        rep = np.repeat(imgs.astype(self.dtype), 3, axis=1)
        return Tensor(rep), Tensor(rep.copy())

    def fuse_streams(self, g_g, g_c):
        alpha = self.cfg.fusion_alpha
        if g_g.data.shape != g_c.data.shape:
            raise ShapeError(f"fuse_streams: {g_g.shape} vs {g_c.shape}")
        return ops.add(ops.scale(g_g, alpha), ops.scale(g_c, 1.0 - alpha))

    def _eval_embed_v(self, v_pixels):
        vg, vc = self._eval_expand_rgb(v_pixels)
        if self.cfg.qfe_mode == "quad":
            g0 = self.fuse_streams(
                self.stems["vg"].forward(vg, False), self.stems["vc"].forward(vc, False)
            )
        else:
            g0 = self.stems["vg"].forward(vg, False)
        return self._embed_from_stack(g0)

    def _eval_embed_t(self, t_pixels):
        tg, tc = self._eval_expand_ir(t_pixels)
        if self.cfg.qfe_mode == "quad":
            g0 = self.fuse_streams(
                self.stems["tg"].forward(tg, False), self.stems["tc"].forward(tc, False)
            )
        else:
            g0 = self.stems["tg"].forward(tg, False)
        return self._embed_from_stack(g0)

    def _embed_from_stack(self, g0):
        pooled = self._trunk(g0, False)
        emb = self.neck.forward(pooled, False)
        return ops.l2_normalize(emb)

    def forward_eval(self, v_pixels, t_pixels, batch_size=64):
        """Raw pixels -> L2-normalized embedding matrices (emb_v, emb_t)."""
        from .tensor import no_grad

        outs = []
        with no_grad():
            for pixels, embed in ((v_pixels, self._eval_embed_v), (t_pixels, self._eval_embed_t)):
                rows = []
                for start in range(0, len(pixels), batch_size):
                    rows.append(embed(np.stack(pixels[start:start + batch_size])).data)
                outs.append(np.concatenate(rows, axis=0) if rows else np.zeros((0, self.cfg.embed_dim), self.dtype))
        return outs[0], outs[1]

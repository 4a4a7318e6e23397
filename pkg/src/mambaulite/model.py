"""Full network assembly, shape plan enforcement and budget accounting."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import blocks
from .config import ModelConfig
from .errors import ShapePlanError
from .params import ParamStore, add_conv
from .ssm import dt_rank_for
from .tensor import Tensor
from .tensor import ops

DECODERS = ("dec4", "dec3", "dec2", "dec1")


def channel_plan(cfg: ModelConfig) -> dict:
    c = cfg.init_channels
    return {
        "init": c,
        "enc1": c,            # PE  c -> 2c
        "enc2": 2 * c,        # PE 2c -> 4c
        "enc3": 2 * c,        # PE ∥ AE on halves of 4c: 2c -> 4c each
        "enc4": 4 * c,        # PE ∥ AE: 4c -> 8c each
        "bottleneck": 16 * c,
        "skips": (c, 2 * c, 4 * c, 8 * c),
        "head": c + 2 * c + 4 * c + 8 * c,
    }


def shape_plan(cfg: ModelConfig, n: int, h: int, w: int) -> "OrderedDict[str, tuple]":
    """Expected (n, c, h, w) for every instrumented stage of the forward pass."""
    c = cfg.init_channels
    s = lambda ch, f: (n, ch, h // f, w // f)  # noqa: E731
    return OrderedDict([
        ("init", s(c, 1)),
        ("enc1.out", s(2 * c, 2)), ("enc1.skip", s(c, 1)),
        ("enc2.out", s(4 * c, 4)), ("enc2.skip", s(2 * c, 2)),
        ("enc3_pe.out", s(4 * c, 8)), ("enc3_ae.out", s(4 * c, 8)),
        ("enc3_pe.skip", s(2 * c, 4)), ("enc3_ae.skip", s(2 * c, 4)),
        ("enc4_pe.out", s(8 * c, 16)), ("enc4_ae.out", s(8 * c, 16)),
        ("enc4_pe.skip", s(4 * c, 8)), ("enc4_ae.skip", s(4 * c, 8)),
        ("fused", s(16 * c, 16)), ("bottleneck", s(16 * c, 16)),
        ("skip1", s(c, 1)), ("skip2", s(2 * c, 2)), ("skip3", s(4 * c, 4)), ("skip4", s(8 * c, 8)),
        ("dec4", s(8 * c, 8)), ("dec3", s(4 * c, 4)), ("dec2", s(2 * c, 2)), ("dec1", s(c, 1)),
        ("head", s(15 * c, 1)), ("logits", s(1, 1)),
    ])


class MambaULite:
    """Parameters plus configuration; ``forward`` runs the U-shaped dataflow."""

    def __init__(self, config: ModelConfig, params: ParamStore):
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return self.params.dtype

    def __call__(self, images, training: bool = False) -> Tensor:
        return self.forward(images, training=training)

    def forward(self, images, training: bool = False, trace: dict | None = None) -> Tensor:
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapePlanError("input", (x.shape[0] if x.ndim else 0, 3, "h", "w"), x.shape)
        n, _, h, w = x.shape
        if h % 16 or w % 16 or h == 0 or w == 0:
            raise ShapePlanError("input (h, w must be divisible by 16)", (n, 3, 16 * (h // 16), 16 * (w // 16)), x.shape)
        plan = shape_plan(cfg, n, h, w)

        def check(stage: str, t: Tensor) -> Tensor:
            if t.shape != plan[stage]:
                raise ShapePlanError(stage, plan[stage], t.shape)
            if trace is not None:
                trace[stage] = t.shape
            return t

        P = self.params.view()
        fusion = cfg.pmamba_fusion
        k = cfg.init_kernel
        x0 = check("init", ops.conv2d(x, P["init.w"], P["init.b"], padding=k // 2))

        def enc(stage, fn, inp, *args):
            io = fn(inp, P.sub(stage), training, *args)
            check(f"{stage}.out", io.out)
            check(f"{stage}.skip", io.skip)
            return io

        e1 = enc("enc1", blocks.pe_block, x0, fusion)
        e2 = enc("enc2", blocks.pe_block, e1.out, fusion)
        half_pe, half_ae = ops.split_channels(e2.out, 2)
        e3p = enc("enc3_pe", blocks.pe_block, half_pe, fusion)
        e3a = enc("enc3_ae", blocks.ae_block, half_ae)
        e4p = enc("enc4_pe", blocks.pe_block, e3p.out, fusion)
        e4a = enc("enc4_ae", blocks.ae_block, e3a.out)
        fused = check("fused", ops.concat_channels([e4p.out, e4a.out]))
        bott = check("bottleneck", att.icsa(fused, P.sub("bottleneck")))

        raw_skips = [e1.skip, e2.skip,
                     ops.concat_channels([e3p.skip, e3a.skip]),
                     ops.concat_channels([e4p.skip, e4a.skip])]
        skips = [check(f"skip{i + 1}", att.cbam(s, P.sub(f"skip{i + 1}"))) for i, s in enumerate(raw_skips)]

        prev = bott
        outs = []
        for name, skip in zip(DECODERS, reversed(skips)):
            prev = check(name, blocks.decoder_block(prev, skip, P.sub(name), training))
            outs.append(prev)
        head = check("head", ops.concat_channels([ops.resize_bilinear(o, h, w) for o in outs]))
        return check("logits", ops.pointwise_conv(head, P["final.w"], P["final.b"]))

    def predict_proba(self, images) -> np.ndarray:
        return ops.sigmoid(self.forward(images, training=False)).data


def build(config: ModelConfig | None = None, seed: int = 0) -> MambaULite:
    """Deterministically initialize a model from ``config`` and ``seed``."""
    cfg = config or ModelConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore(cfg.dtype)
    P = store.view()
    plan = channel_plan(cfg)
    c = cfg.init_channels
    add_conv(P, "init", rng, c, 3, cfg.init_kernel)
    blocks.init_pe_block(P.sub("enc1"), rng, plan["enc1"], cfg)
    blocks.init_pe_block(P.sub("enc2"), rng, plan["enc2"], cfg)
    blocks.init_pe_block(P.sub("enc3_pe"), rng, plan["enc3"], cfg)
    blocks.init_ae_block(P.sub("enc3_ae"), rng, plan["enc3"])
    blocks.init_pe_block(P.sub("enc4_pe"), rng, plan["enc4"], cfg)
    blocks.init_ae_block(P.sub("enc4_ae"), rng, plan["enc4"])
    att.init_icsa(P.sub("bottleneck"), rng, plan["bottleneck"])
    for i, ch in enumerate(plan["skips"]):
        att.init_cbam(P.sub(f"skip{i + 1}"), rng, ch, cfg.cbam_reduction)
    c_prev = plan["bottleneck"]
    for name, ch in zip(DECODERS, reversed(plan["skips"])):
        blocks.init_decoder_block(P.sub(name), rng, c_prev, ch, cfg)
        c_prev = ch
    add_conv(P, "final", rng, 1, plan["head"])
    for rs in store.stats.values():
        rs.momentum = cfg.bn_momentum
    return MambaULite(cfg, store)


# ---------------------------------------------------------------------------
# budgets


def param_count(model: MambaULite) -> tuple[int, "OrderedDict[str, int]"]:
    """Total trainable parameters and a per-top-level-module breakdown."""
    table: "OrderedDict[str, int]" = OrderedDict()
    for name, t in model.params.named_trainable():
        key = name.split(".", 1)[0]
        table[key] = table.get(key, 0) + t.size
    return sum(table.values()), table


# MACs per (step, scan channel, state element): h*a, (delta*B)*x folded into the
# update, and the C contraction.
SCAN_MACS_PER_STATE = 3


@dataclass
class FlopsReport:
    macs: int
    table: "OrderedDict[str, int]"

    @property
    def flops_2x(self) -> int:
        return 2 * self.macs


class _Counter:
    def __init__(self):
        self.table: "OrderedDict[str, int]" = OrderedDict()

    def add(self, name: str, macs: int) -> None:
        self.table[name] = self.table.get(name, 0) + int(macs)

    def conv(self, name, c_out, c_in_per_group, kh, kw, h, w):
        self.add(name, c_out * c_in_per_group * kh * kw * h * w)


def _count_vss(cnt: _Counter, name: str, c: int, h: int, w: int, cfg: ModelConfig) -> None:
    d = cfg.expand * c
    N = cfg.d_state
    r = dt_rank_for(d, cfg.dt_rank_rule)
    L = h * w
    cnt.conv(f"{name}.in_proj", 2 * d, c, 1, 1, h, w)
    cnt.conv(f"{name}.dw", d, 1, 3, 3, h, w)
    # per direction: B and C projections, low-rank delta projection
    cnt.add(f"{name}.ss2d.proj", 4 * L * d * (2 * N + 2 * r))
    cnt.add(f"{name}.ss2d.scan", 4 * L * d * (N * SCAN_MACS_PER_STATE + 1))
    cnt.conv(f"{name}.out_proj", c, d, 1, 1, h, w)


def _count_encoder(cnt, name, c, h, w, cfg, kind):
    if kind == "pe":
        cnt.conv(f"{name}.pmamba.dw", c, 1, 3, 3, h, w)
        for i in range(2):
            _count_vss(cnt, f"{name}.pmamba.vss{i}", c // 2, h, w, cfg)
        cnt.conv(f"{name}.pmamba.pool_conv", c, 2 * c, 3, 3, h, w)
        k = 3
    else:
        k = 7
    cnt.add(f"{name}.axial", 2 * c * k * h * w)
    cnt.conv(f"{name}.pw", 2 * c, c, 1, 1, h, w)


def flops_estimate(model_or_config, h: int, w: int) -> FlopsReport:
    """Analytic multiply-accumulate count of one forward pass at (h, w).

    Convolutions and linear projections count c_out * c_in/groups * kh * kw
    per output pixel; scans count per-step state updates; elementwise work,
    normalization and pooling are excluded.
    """
    cfg = model_or_config.config if isinstance(model_or_config, MambaULite) else model_or_config
    cnt = _Counter()
    if h <= 0 or w <= 0:
        return FlopsReport(0, cnt.table)
    plan = channel_plan(cfg)
    c = cfg.init_channels
    k = cfg.init_kernel
    cnt.conv("init", c, 3, k, k, h, w)
    _count_encoder(cnt, "enc1", plan["enc1"], h, w, cfg, "pe")
    _count_encoder(cnt, "enc2", plan["enc2"], h // 2, w // 2, cfg, "pe")
    _count_encoder(cnt, "enc3_pe", plan["enc3"], h // 4, w // 4, cfg, "pe")
    _count_encoder(cnt, "enc3_ae", plan["enc3"], h // 4, w // 4, cfg, "ae")
    _count_encoder(cnt, "enc4_pe", plan["enc4"], h // 8, w // 8, cfg, "pe")
    _count_encoder(cnt, "enc4_ae", plan["enc4"], h // 8, w // 8, cfg, "ae")
    cb = plan["bottleneck"]
    hb, wb = h // 16, w // 16
    for i in (1, 2):
        cnt.conv(f"bottleneck.pca{i}", cb, 1, 3, 3, hb, wb)
    cnt.conv("bottleneck.psa", 1, cb, 1, 1, hb, wb)
    for i, ch in enumerate(plan["skips"]):
        f = 2 ** i
        hs, ws = h // f, w // f
        hid = ch // cfg.cbam_reduction
        cnt.add(f"skip{i + 1}.mlp", 2 * 2 * ch * hid)
        cnt.conv(f"skip{i + 1}.spatial", 1, 2, 7, 7, hs, ws)
    c_prev = cb
    for j, (name, ch) in enumerate(zip(DECODERS, reversed(plan["skips"]))):
        f = 2 ** (3 - j)
        hs, ws = h // f, w // f
        f_int = max(1, ch // cfg.ag_width_divisor)
        cnt.conv(f"{name}.ag", f_int, c_prev + ch, 1, 1, hs, ws)
        cnt.conv(f"{name}.ag.head", 1, f_int, 1, 1, hs, ws)
        cnt.conv(f"{name}.pw1", ch, ch + c_prev, 1, 1, hs, ws)
        cnt.conv(f"{name}.pw2", ch, ch, 1, 1, hs, ws)
        cnt.add(f"{name}.axial", 2 * ch * 7 * hs * ws)
        c_prev = ch
    cnt.conv("final", 1, plan["head"], 1, 1, h, w)
    return FlopsReport(sum(cnt.table.values()), cnt.table)

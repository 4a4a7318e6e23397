"""Finite-difference gradient checks for every differentiable building block.

Each check builds a small 64-bit instance, reduces the block output to a
scalar through a fixed random projection, and compares tape gradients (with
respect to the input and all block parameters) against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as att
from . import blocks
from .config import ModelConfig
from .losses import MaskPair, composite_loss
from .model import build
from .params import ParamStore
from .ssm import ScanParams, init_scan_params, init_vss, inverse_softplus, selective_scan, ss2d, vss_block
from .tensor import Tensor, grad_check
from .tensor import ops

BLOCK_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
SMALL = ModelConfig(d_state=4, expand=1, precision="float64", input_size=32)


@dataclass
class Check:
    name: str
    group: str
    run: Callable[[int], float]
    tolerance: float = BLOCK_TOLERANCE


def _projected(out: Tensor, rng: np.random.Generator) -> Tensor:
    weights = rng.standard_normal(out.shape)
    return ops.sum_all(ops.mul(out, weights))


def _widen_steps(store: ParamStore, rng: np.random.Generator) -> None:
    """Redraw every scan step size from [0.1, 1].

    With the default [1e-3, 1e-1] init, gradients with respect to ``a_log`` are
    around 1e-8 and central differences cannot resolve them to 1e-4 relative
    accuracy; larger steps give the same code path a well-conditioned probe.
    """
    for name, t in store.tensors.items():
        if name.endswith("dt_bias"):
            t.data = inverse_softplus(rng.uniform(0.1, 1.0, size=t.shape))


def _block_check(make: Callable[[ParamStore, np.random.Generator], Callable[[], Tensor]],
                 inputs: list[tuple], n_coords: int = 48) -> Callable[[int], float]:
    def run(seed: int) -> float:
        rng = np.random.default_rng(seed)
        store = ParamStore(np.float64)
        xs = [Tensor(rng.standard_normal(s), requires_grad=True) for s in inputs]
        fn = make(store, rng, *xs)
        _widen_steps(store, rng)
        proj_rng_seed = int(rng.integers(1 << 31))

        def objective():
            return _projected(fn(), np.random.default_rng(proj_rng_seed))

        res = grad_check(objective, xs + store.trainable(), n_coords=n_coords, rng=rng)
        return res.max_rel_error
    return run


def _op(fn, *param_shapes):
    def make(store, rng, *xs):
        ps = [store.add(f"p{i}", rng.standard_normal(s) * 0.5) for i, s in enumerate(param_shapes)]
        return lambda: fn(*xs, *ps)
    return make


def _norm_train(x, g, b):
    return ops.normalize(x, "batch", g, b, mode="train")


def _scan_make(store, rng, x):
    init_scan_params(store.view("s"), rng, x.shape[0], 4, 2, directions=1)

    def fn():
        stacked = ScanParams.from_view(store.view("s")).tensors()
        return selective_scan(x, ScanParams(*(ops.reshape(t, t.shape[1:]) for t in stacked)))
    return fn


def _ss2d_make(store, rng, x):
    init_scan_params(store.view("s"), rng, x.shape[1], 4, 2)
    return lambda: ss2d(x, ScanParams.from_view(store.view("s")))


def _vss_make(store, rng, x):
    init_vss(store.view("v"), rng, x.shape[1], 4, 2)
    return lambda: vss_block(x, store.view("v"))


def _cbam_make(store, rng, x):
    att.init_cbam(store.view("c"), rng, x.shape[1], 4)
    return lambda: att.cbam(x, store.view("c"))


def _ag_make(store, rng, g, x):
    att.init_attention_gate(store.view("a"), rng, g.shape[1], x.shape[1], x.shape[1] // 2)
    return lambda: att.attention_gate(g, x, store.view("a"))


def _icsa_make(store, rng, x):
    att.init_icsa(store.view("i"), rng, x.shape[1])
    return lambda: att.icsa(x, store.view("i"))


def _axial_make(store, rng, x):
    blocks.init_axial(store.view("a"), rng, x.shape[1], 7)
    return lambda: blocks.axial_dw(x, store.view("a"))


def _pmamba_make(store, rng, x):
    blocks.init_pmamba(store.view("p"), rng, x.shape[1], SMALL)
    return lambda: blocks.p_mamba(x, store.view("p"))


def _pe_make(store, rng, x):
    blocks.init_pe_block(store.view("p"), rng, x.shape[1], SMALL)

    def fn():
        io = blocks.pe_block(x, store.view("p"), training=True)
        n = io.out.size
        return ops.concat([ops.reshape(io.out, (n,)), ops.reshape(io.skip, (io.skip.size,))], axis=0)
    return fn


def _ae_make(store, rng, x):
    blocks.init_ae_block(store.view("a"), rng, x.shape[1])

    def fn():
        io = blocks.ae_block(x, store.view("a"), training=True)
        return ops.concat([ops.reshape(io.out, (io.out.size,)), ops.reshape(io.skip, (io.skip.size,))], axis=0)
    return fn


def _decoder_make(store, rng, prev, skip):
    blocks.init_decoder_block(store.view("d"), rng, prev.shape[1], skip.shape[1], SMALL)
    return lambda: blocks.decoder_block(prev, skip, store.view("d"), training=True)


def _model_check(seed: int) -> float:
    """Composite loss of the full network on one 32x32 image, 64 sampled coordinates."""
    rng = np.random.default_rng(seed)
    model = build(SMALL, seed=seed)
    images = rng.uniform(0, 1, size=(1, 3, 32, 32))
    masks = (rng.uniform(size=(1, 1, 32, 32)) > 0.5).astype(np.uint8)

    def objective():
        return composite_loss(MaskPair.from_logits(model.forward(images, training=True), masks))

    return grad_check(objective, model.params.trainable(), n_coords=64, rng=rng).max_rel_error


CHECKS: list[Check] = [
    Check("conv2d", "tensor_core", _block_check(
        _op(lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1, groups=2), (4, 2, 3, 3), (4,)),
        [(2, 4, 5, 5)])),
    Check("depthwise_conv2d", "tensor_core", _block_check(
        _op(lambda x, w, b: ops.depthwise_conv2d(x, w, b), (3, 1, 3, 3), (3,)), [(2, 3, 5, 4)])),
    Check("pointwise_conv", "tensor_core", _block_check(
        _op(lambda x, w, b: ops.pointwise_conv(x, w, b), (5, 3), (5,)), [(2, 3, 4, 4)])),
    Check("pool2d", "tensor_core", _block_check(
        _op(lambda x: ops.add(ops.pool2d(x, "max", 3, 1, 1), ops.pool2d(x, "avg", 3, 1, 1))), [(2, 3, 5, 5)])),
    Check("resize_bilinear", "tensor_core", _block_check(
        _op(lambda x: ops.resize_bilinear(x, 7, 6)), [(1, 2, 3, 4)])),
    Check("normalize", "tensor_core", _block_check(
        _op(_norm_train, (3,), (3,)), [(4, 3, 3, 3)])),
    Check("activation", "tensor_core", _block_check(
        _op(lambda x: ops.add(ops.silu(x), ops.add(ops.softplus(x), ops.sigmoid(x)))), [(2, 3, 3, 3)])),
    Check("selective_scan", "ssm_scan", _block_check(_scan_make, [(3, 8)])),
    Check("ss2d", "ssm_scan", _block_check(_ss2d_make, [(1, 3, 3, 4)])),
    Check("vss_block", "ssm_scan", _block_check(_vss_make, [(1, 4, 4, 4)])),
    Check("cbam", "attention_blocks", _block_check(_cbam_make, [(1, 8, 6, 6)])),
    Check("attention_gate", "attention_blocks", _block_check(_ag_make, [(1, 8, 6, 6), (1, 8, 6, 6)])),
    Check("icsa", "attention_blocks", _block_check(_icsa_make, [(1, 8, 6, 6)])),
    Check("axial_dw", "net_blocks", _block_check(_axial_make, [(2, 3, 5, 6)])),
    Check("p_mamba", "net_blocks", _block_check(_pmamba_make, [(1, 8, 6, 6)])),
    Check("pe_block", "net_blocks", _block_check(_pe_make, [(2, 4, 4, 4)])),
    Check("ae_block", "net_blocks", _block_check(_ae_make, [(2, 4, 4, 4)])),
    Check("decoder_block", "net_blocks", _block_check(_decoder_make, [(2, 8, 2, 2), (2, 4, 4, 4)])),
    Check("model", "model", _model_check, MODEL_TOLERANCE),
]

GROUPS = tuple(dict.fromkeys(c.group for c in CHECKS))


def select(names: list[str] | None) -> list[Check]:
    """Checks matching block or group names; all checks when ``names`` is empty."""
    if not names:
        return list(CHECKS)
    known = {c.name for c in CHECKS} | set(GROUPS)
    unknown = [n for n in names if n not in known]
    if unknown:
        raise KeyError(f"unknown block(s) {unknown}; choose from {sorted(known)}")
    return [c for c in CHECKS if c.name in names or c.group in names]

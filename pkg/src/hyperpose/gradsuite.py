"""The 64-bit gradient-check suite: every differentiable op plus the desk model end to end."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .config import desk_model
from .geometry import (LossParams, orientation_loss_quat, pose_loss, position_loss, quat_to_rotmat,
                       rotation_loss, sixd_to_rotmat)
from .gradcheck import GradReport, gradcheck
from .model import GeneratedHeadWeights, HeadSpec, HyperPoseModel, WeightGenerator, apply_adaptive_head
from .nn import Conv2d, EncoderBlock, Linear, MultiHeadAttention, TransformerEncoder, build_sequence, encode
from .tensor import Tensor

OP_TOL = 1e-4
MODEL_TOL = 1e-3

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _probe(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    """A fixed random linear functional, so every output entry matters."""
    w = Tensor(rng.normal(size=shape))
    return lambda out: T.sum(out * w)


def _unary(op, positive=False, shape=(3, 4)):
    def case(rng):
        x = _t(rng.uniform(0.5, 2.0, shape) if positive else rng.normal(size=shape))
        probe = _probe(rng, np.shape(op(Tensor(x.data)).data))
        return (lambda: probe(op(x))), [x]
    return case


def _binary(op, b_shape=(4,), b_positive=False):
    def case(rng):
        a = _t(rng.normal(size=(3, 4)))
        b = _t(rng.uniform(0.5, 2.0, b_shape) if b_positive else rng.normal(size=b_shape))
        probe = _probe(rng, (3, 4))
        return (lambda: probe(op(a, b))), [a, b]
    return case


def _conv(stride, padding, k):
    def case(rng):
        x = _t(rng.normal(size=(2, 3, 6, 6)))
        w = _t(rng.normal(size=(4, 3, k, k)) * 0.3)
        shape = T.conv2d(Tensor(x.data), Tensor(w.data), stride, padding).shape
        probe = _probe(rng, shape)
        return (lambda: probe(T.conv2d(x, w, stride, padding))), [x, w]
    return case


def _layernorm(rng):
    x, g, b = _t(rng.normal(size=(2, 3, 5))), _t(rng.normal(size=5)), _t(rng.normal(size=5))
    probe = _probe(rng, (2, 3, 5))
    return (lambda: probe(T.layernorm(x, g, b))), [x, g, b]


def _dropout(rng):
    x = _t(rng.normal(size=(4, 5)))
    seed = int(rng.integers(2**31))
    probe = _probe(rng, (4, 5))
    return (lambda: probe(T.dropout(x, 0.3, True, np.random.default_rng(seed)))), [x]


def _concat(rng):
    a, b = _t(rng.normal(size=(2, 3))), _t(rng.normal(size=(2, 2)))
    probe = _probe(rng, (2, 5))
    return (lambda: probe(T.concat([a, b], axis=1))), [a, b]


def _stack(rng):
    a, b = _t(rng.normal(size=(2, 3))), _t(rng.normal(size=(2, 3)))
    probe = _probe(rng, (2, 2, 3))
    return (lambda: probe(T.stack([a, b], axis=1))), [a, b]


def _matmul(rng):
    a, b = _t(rng.normal(size=(2, 3, 4))), _t(rng.normal(size=(4, 5)))
    probe = _probe(rng, (2, 3, 5))
    return (lambda: probe(T.matmul(a, b))), [a, b]


def _quat(rng, n=3):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _position_loss(rng):
    x = _t(rng.normal(size=(3, 3)))
    gt = rng.normal(size=(3, 3))
    return (lambda: T.sum(position_loss(x, gt))), [x]


def _quat_loss(rng):
    q = _t(rng.normal(size=(3, 4)))
    gt = _quat(rng)
    return (lambda: T.sum(orientation_loss_quat(q, gt))), [q]


def _pose_loss(rng):
    lx, lq = _t(rng.uniform(0.5, 2.0)), _t(rng.uniform(0.5, 2.0))
    params = LossParams(rng.normal(), rng.normal())
    params.astype(np.float64)
    return (lambda: pose_loss(lx, lq, params)), [lx, lq, params.s_x, params.s_q]


def _rotmat(rng):
    q = _t(rng.normal(size=(3, 4)))
    probe = _probe(rng, (3, 3, 3))
    return (lambda: probe(quat_to_rotmat(q))), [q]


def _sixd(rng):
    r = _t(rng.normal(size=(3, 6)))
    probe = _probe(rng, (3, 3, 3))
    return (lambda: probe(sixd_to_rotmat(r))), [r]


def _rotation(repr_, width):
    def case(rng):
        raw = _t(rng.normal(size=(3, width)))
        gt = _quat(rng)
        return (lambda: T.sum(rotation_loss(repr_, raw, gt))), [raw]
    return case


def _module_case(build, x_shape, call=None):
    def case(rng):
        mod = build(rng)
        mod.astype(np.float64)
        x = _t(rng.normal(size=x_shape))
        fn = call or (lambda m, x: m(x))
        probe = _probe(rng, fn(mod, Tensor(x.data)).shape)
        return (lambda: probe(fn(mod, x))), [x] + mod.parameters()
    return case


def _encoder_case(pe_mode):
    def build(rng):
        return EncoderBlock(8, 2, rng, dropout=0.0, pe_mode=pe_mode)

    def case(rng):
        block = build(rng)
        block.astype(np.float64)
        x = _t(rng.normal(size=(2, 5, 8)))
        pe = _t(rng.normal(size=(5, 8)) * 0.1)
        probe = _probe(rng, (2, 5, 8))
        return (lambda: probe(block(x, pe, False))), [x, pe] + block.parameters()
    return case


def _sequence_encoder(rng):
    proj = Conv2d(6, 8, 1, rng, std=0.3)
    enc = TransformerEncoder(8, 5, rng, layers=2, heads=2, dropout=0.0)
    proj.astype(np.float64)
    enc.astype(np.float64)
    fmap = _t(rng.normal(size=(2, 6, 2, 2)))
    probe = _probe(rng, (2, 8))
    return (lambda: probe(encode(build_sequence(fmap, proj, enc.token), enc))), \
        [fmap] + proj.parameters() + enc.parameters()


def _adaptive_head(rng):
    spec = HeadSpec(6, (8, 5, 3))
    gens = [WeightGenerator(10, 10, c_in, c_out, True, rng) for c_in, c_out in spec.layer_shapes]
    for g in gens:
        g.astype(np.float64)
    latent = _t(rng.normal(size=(2, 6)))
    latent_h = _t(rng.normal(size=(2, 10)))

    def f():
        pairs = [g(latent_h) for g in gens]
        w = GeneratedHeadWeights(spec, [0, 1, 2], [p[0] for p in pairs], [p[1] for p in pairs])
        return T.sum(apply_adaptive_head(latent, w) * Tensor(np.linspace(-1, 1, 6).reshape(2, 3)))

    params = [p for g in gens for p in g.parameters()]
    return f, [latent, latent_h] + params


OP_CASES: dict[str, Case] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub, (3, 1)),
    "mul": _binary(T.mul, (3, 4)),
    "div": _binary(T.div, (4,), b_positive=True),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "sqrt": _unary(T.sqrt, positive=True),
    "sigmoid": _unary(T.sigmoid),
    "swish": _unary(T.swish),
    "sum": _unary(lambda x: T.sum(x, axis=1, keepdims=True)),
    "mean": _unary(lambda x: T.mean(x, axis=0)),
    "reshape": _unary(lambda x: T.reshape(x, (2, 6))),
    "transpose": _unary(lambda x: T.transpose(x, (1, 0))),
    "swapaxes": _unary(lambda x: T.swapaxes(x, 0, 2), shape=(2, 3, 4)),
    "getitem_basic": _unary(lambda x: x[1:, ::2]),
    "getitem_fancy": _unary(lambda x: x[[0, 2, 0]]),
    "concat": _concat,
    "stack": _stack,
    "broadcast_to": _unary(lambda x: T.broadcast_to(x, (2, 3, 4))),
    "matmul": _matmul,
    "norm2": _unary(lambda x: T.norm2(x, axis=-1)),
    "softmax": _unary(lambda x: T.softmax(x, axis=-1)),
    "layernorm": _layernorm,
    "dropout": _dropout,
    "conv2d_3x3": _conv(1, 1, 3),
    "conv2d_stride2": _conv(2, 1, 4),
    "conv2d_1x1": _conv(1, 0, 1),
    "position_loss": _position_loss,
    "orientation_loss_quat": _quat_loss,
    "pose_loss": _pose_loss,
    "quat_to_rotmat": _rotmat,
    "sixd_to_rotmat": _sixd,
    "rotation_loss_4dnorm": _rotation("4dnorm", 4),
    "rotation_loss_6d": _rotation("6d", 6),
    "linear": _module_case(lambda rng: Linear(5, 4, rng, std=0.5), (3, 5)),
    "attention": _module_case(lambda rng: MultiHeadAttention(8, 2, rng), (2, 4, 8)),
    "encoder_block": _encoder_case("input"),
    "encoder_block_qk": _encoder_case("qk"),
    "sequence_encoder": _sequence_encoder,
    "adaptive_head": _adaptive_head,
}


def desk_gradcheck_model(seed: int) -> HyperPoseModel:
    """The end-to-end check model: 32x32 input, C_M=16, C_H=32, two encoder blocks, no dropout."""
    cfg = desk_model(main_dim=16, hyper_dim=32, encoder_layers=2, dropout=0.0)
    model = HyperPoseModel(cfg, np.random.default_rng(seed))
    model.astype(np.float64)
    return model


def _model_case(seed: int, batch: int = 2):
    rng = np.random.default_rng([seed, 7])
    model = desk_gradcheck_model(seed)
    size = model.config.input_size
    images = rng.uniform(0.0, 1.0, (batch, 3, size, size))
    x_gt = rng.uniform(-1.0, 1.0, (batch, 3))
    q_gt = _quat(rng, batch)

    def f():
        out = model.forward(images, training=False)
        l_x = T.mean(position_loss(out.position, x_gt))
        l_q = T.mean(rotation_loss(model.rotation_repr, out.orientation, q_gt))
        return pose_loss(l_x, l_q, model.loss)

    names, params = zip(*model.named_parameters())
    return f, list(params), list(names)


@dataclass
class CaseResult:
    name: str
    seed: int
    report: GradReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def run_case(name: str, seed: int, tol: float = OP_TOL, max_entries: int | None = 24) -> CaseResult:
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        f, inputs = OP_CASES[name](rng)
        report = gradcheck(f, inputs, tol=tol, max_entries=max_entries, rng=rng)
    return CaseResult(name, seed, report)


def run_model_case(seed: int, tol: float = MODEL_TOL, max_entries: int = 2) -> CaseResult:
    with T.precision(np.float64):
        f, params, names = _model_case(seed)
        report = gradcheck(f, params, tol=tol, max_entries=max_entries, rng=np.random.default_rng(seed), names=names)
    return CaseResult("end_to_end", seed, report)


def run_suite(seeds: Iterable[int] = range(10), ops: Iterable[str] | None = None, model: bool = True,
              on_result: Callable[[CaseResult], None] | None = None) -> list[CaseResult]:
    """Run every op case (and the end-to-end model) once per seed."""
    names = list(OP_CASES) if ops is None else list(ops)
    results = []
    for seed in seeds:
        for name in names:
            results.append(run_case(name, seed))
            if on_result:
                on_result(results[-1])
        if model:
            results.append(run_model_case(seed))
            if on_result:
                on_result(results[-1])
    return results


def summarize(results: list[CaseResult]) -> str:
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.report.max_error)
    failed = sorted({r.name for r in results if not r.passed})
    lines = [f"{name:24s} worst {err:.2e}" for name, err in worst.items()]
    lines.append(f"{len(results)} checks, {len(failed)} failing" + (f": {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)


if __name__ == "__main__":  # pragma: no cover
    t0 = time.perf_counter()
    res = run_suite()
    print(summarize(res))
    print(f"{time.perf_counter() - t0:.1f}s")

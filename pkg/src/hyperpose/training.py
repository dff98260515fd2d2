"""Adam, the learning-rate schedule and the three-phase training protocol."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import Config, DataConfig, TrainConfig
from .data import PoseSample, augment
from .geometry import angular_error_deg, pose_loss, pose_loss_value, position_loss, rotation_loss
from .model import BRANCHES, HyperPoseModel
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "phase", "loss", "L_x", "L_q", "s_x", "s_q", "lr", "median_pos", "median_deg")
EVAL_BATCH = 32


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, names: list[str]):
        self.names = names
        super().__init__(f"non-finite gradient in {', '.join(names[:5])}")


class NumericalAbort(RuntimeError):
    """Training produced a NaN/Inf loss or gradient; carries the last good parameters."""

    def __init__(self, message: str, last_good: dict[str, np.ndarray], epoch: int, step: int):
        self.last_good = last_good
        self.epoch = epoch
        self.step = step
        super().__init__(message)


# ---------------------------------------------------------------------------
# Optimiser


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig,
              lr: float | None = None) -> AdamState:
    """One bias-corrected Adam update, in place.

    Weight decay is added to the gradient (L2, coupled) unless
    ``cfg.decoupled_weight_decay`` is set.  Nothing is modified if any
    gradient is non-finite.
    """
    bad = [n for n, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NonFiniteGradientError(bad)
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    wd = cfg.weight_decay
    for name, g in grads.items():
        p = params[name]
        if p.data.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        if wd and not cfg.decoupled_weight_decay:
            g = g + wd * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if wd and cfg.decoupled_weight_decay:
            p.data -= (lr * wd) * p.data
        p.data -= (lr * update).astype(p.data.dtype)
    return state


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr * factor ** floor(epoch / every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


# ---------------------------------------------------------------------------
# Phases


@dataclass
class PhasePlan:
    phase: int
    trainable: list[str]
    loss: str  # "pose" | "position" | "orientation"

    @classmethod
    def for_phase(cls, model: HyperPoseModel, phase: int, scope: str = "branch") -> "PhasePlan":
        if phase == 1:
            return cls(1, [n for n, _ in model.named_parameters()], "pose")
        if phase in (2, 3):
            branch = BRANCHES[phase - 2]
            names = model.branch_parameter_names(branch, scope)
            if not names:
                raise ValueError(f"phase {phase} has no trainable parameters (scope {scope!r})")
            return cls(phase, names, branch)
        raise ValueError(f"phase must be 1, 2 or 3, got {phase}")


def rng_streams(seed: int, phase: int) -> dict[str, np.random.Generator]:
    """Independent generators for one phase; each can be replayed on its own."""
    ss = np.random.SeedSequence(seed, spawn_key=(phase,))
    dropout, aug, order = ss.spawn(3)
    return {
        "dropout": np.random.default_rng(dropout),
        "augment": np.random.default_rng(aug),
        "order": np.random.default_rng(order),
    }


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))


def prepare_batch(samples: Sequence[PoseSample], model: HyperPoseModel, data_cfg: DataConfig | None,
                  training: bool, rng: np.random.Generator | None = None):
    size = model.config.input_size
    imgs = []
    for s in samples:
        img = s.load_image()
        if data_cfg is not None and data_cfg.preprocess == "posenet":
            edge = max(size, int(round(data_cfg.resize_edge * size / 224)))
            img = augment(img, training, rng, crop=size, resize_edge=edge, jitter=data_cfg.jitter)
        imgs.append(img)
    dtype = model.backbone.stem.weight.dtype
    images = np.stack(imgs).astype(dtype)
    x = np.stack([s.pose.x for s in samples]).astype(dtype)
    q = np.stack([s.pose.q for s in samples]).astype(dtype)
    return images, x, q


def batch_losses(model: HyperPoseModel, out, x_gt: np.ndarray, q_gt: np.ndarray):
    l_x = position_loss(out.position, x_gt).mean()
    l_q = rotation_loss(model.rotation_repr, out.orientation, q_gt).mean()
    return l_x, l_q


@dataclass
class EvalResult:
    pos_err: np.ndarray
    ang_err: np.ndarray
    l_x: float
    l_q: float

    @property
    def median_pos(self) -> float:
        return float(np.median(self.pos_err))

    @property
    def median_deg(self) -> float:
        return float(np.median(self.ang_err))


def evaluate(model: HyperPoseModel, samples: Sequence[PoseSample], data_cfg: DataConfig | None = None,
             batch_size: int = EVAL_BATCH) -> EvalResult:
    """Eval-mode pass: per-sample errors and the mean training losses."""
    if not samples:
        raise ValueError("evaluate: empty dataset")
    pos, ang, lx, lq = [], [], [], []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            images, x, q = prepare_batch(chunk, model, data_cfg, training=False)
            out = model.forward(images, training=False)
            lx.append(position_loss(out.position, x).data.astype(np.float64))
            lq.append(rotation_loss(model.rotation_repr, out.orientation, q).data.astype(np.float64))
            pos.append(np.linalg.norm(out.position.data.astype(np.float64) - x.astype(np.float64), axis=-1))
            ang.append(np.atleast_1d(angular_error_deg(out.quaternions(), q.astype(np.float64))))
    lx, lq = np.concatenate(lx), np.concatenate(lq)
    return EvalResult(np.concatenate(pos), np.concatenate(ang), float(lx.mean()), float(lq.mean()))


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)


def format_row(row: dict) -> list[str]:
    out = []
    for k in METRIC_COLUMNS:
        v = row[k]
        out.append(str(v) if isinstance(v, (int, np.integer)) else format(float(v), ".17g"))
    return out


def append_metrics(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow(format_row(row))


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "phase") else float(v)) for k, v in r.items()} for r in rows]


def train_phase(model: HyperPoseModel, samples: Sequence[PoseSample], cfg: Config, plan: PhasePlan,
                epochs: int | None = None, metrics_path=None,
                on_epoch: Callable[[dict], None] | None = None) -> TrainLog:
    """Train the parameters named by ``plan`` for ``epochs`` epochs.

    Every epoch ends with an eval-mode pass over ``samples`` whose losses and
    median errors are logged.  The logged ``loss`` is the aggregated pose loss
    recomputed from the logged L_x, L_q, s_x and s_q.
    """
    tcfg = cfg.train
    if not samples:
        raise ValueError("train_phase: empty dataset")
    epochs = epochs if epochs is not None else (tcfg.max_epochs if plan.phase == 1 else tcfg.finetune_epochs)
    params = dict(model.named_parameters())
    trainable = {n: params[n] for n in plan.trainable}
    streams = rng_streams(tcfg.seed, plan.phase)
    T.seed_dropout(streams["dropout"])
    state = AdamState()
    history = TrainLog()
    last_good = model.state_dict()
    frozen = [p for name, p in params.items() if name not in trainable]
    for p in frozen:
        p.requires_grad = False
    try:
        _run_epochs(model, samples, cfg, plan, epochs, trainable, streams, state, history, last_good,
                    metrics_path, on_epoch)
    finally:
        for p in frozen:
            p.requires_grad = True
    return history


def _run_epochs(model, samples, cfg, plan, epochs, trainable, streams, state, history, last_good,
                metrics_path, on_epoch):
    tcfg = cfg.train
    n = len(samples)
    for epoch in range(epochs):
        lr = lr_at(epoch, tcfg)
        order = streams["order"].permutation(n)
        for step, start in enumerate(range(0, n, tcfg.batch_size)):
            batch = [samples[i] for i in order[start : start + tcfg.batch_size]]
            images, x, q = prepare_batch(batch, model, cfg.data, training=True, rng=streams["augment"])
            out = model.forward(images, training=True)
            l_x, l_q = batch_losses(model, out, x, q)
            if plan.loss == "pose":
                loss = pose_loss(l_x, l_q, model.loss)
            elif plan.loss == "position":
                loss = l_x
            else:
                loss = l_q
            if not np.isfinite(loss.data).all():
                raise NumericalAbort(f"non-finite loss at epoch {epoch} step {step}", last_good, epoch, step)
            for p in trainable.values():
                p.grad = None
            loss.backward()
            grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in trainable.items()}
            try:
                adam_step(trainable, grads, state, tcfg, lr)
            except NonFiniteGradientError as exc:
                raise NumericalAbort(str(exc), last_good, epoch, step) from exc
        ev = evaluate(model, samples, cfg.data)
        s_x, s_q = float(model.loss.s_x.data[0]), float(model.loss.s_q.data[0])
        row = {
            "epoch": epoch,
            "phase": plan.phase,
            "loss": pose_loss_value(ev.l_x, ev.l_q, s_x, s_q),
            "L_x": ev.l_x,
            "L_q": ev.l_q,
            "s_x": s_x,
            "s_q": s_q,
            "lr": lr,
            "median_pos": ev.median_pos,
            "median_deg": ev.median_deg,
        }
        if not np.isfinite([row["loss"], ev.median_pos, ev.median_deg]).all():
            raise NumericalAbort(f"non-finite evaluation at epoch {epoch}", last_good, epoch, -1)
        last_good = model.state_dict()
        history.append(row)
        if metrics_path is not None:
            append_metrics(metrics_path, [row])
        log.info("phase %d epoch %d loss %.4f pos %.4f deg %.3f", plan.phase, epoch, row["loss"],
                 row["median_pos"], row["median_deg"])
        if on_epoch is not None:
            on_epoch(row)


def build_model(cfg: Config) -> HyperPoseModel:
    return HyperPoseModel(cfg.model, init_rng(cfg.train.seed), cfg.train.s_x_init, cfg.train.s_q_init)

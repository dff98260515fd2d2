"""Run directories: manifest, dataset resolution and the phase driver used by the CLI."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, DataConfig
from .data import PoseSample, SyntheticScene, load_pose_list, make_overfit_set
from .model import HyperPoseModel
from .training import PhasePlan, TrainLog, build_model, train_phase

MANIFEST = "manifest.json"
METRICS = "metrics.csv"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def git_hash(payload: bytes) -> str:
    """SHA-1 of ``payload`` framed the way git hashes a blob."""
    return hashlib.sha1(b"blob %d\x00" % len(payload) + payload).hexdigest()


@dataclass
class RunManifest:
    config: dict
    seed: int
    content_hash: str
    command: str
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None
    status: str = "running"
    outputs: list[str] = field(default_factory=list)

    def write(self, out_dir: str | Path) -> Path:
        """Replace ``out_dir/manifest.json`` atomically."""
        path = Path(out_dir) / MANIFEST
        tmp = path.with_name(MANIFEST + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, out_dir: str | Path) -> "RunManifest":
        return cls(**json.loads((Path(out_dir) / MANIFEST).read_text(encoding="utf-8")))


def dataset_digest(samples: Sequence[PoseSample]) -> str:
    h = hashlib.sha1()
    for s in samples:
        h.update(s.ref.encode("utf-8"))
        h.update(s.pose.x.tobytes())
        h.update(s.pose.q.tobytes())
        if s.image is not None:
            h.update(s.image.tobytes())
    return h.hexdigest()


def input_hash(cfg: Config, samples: Sequence[PoseSample], resume: str | Path | None = None) -> str:
    """Content hash over everything a run's checkpoints depend on."""
    parts = {
        "config": cfg.to_dict(),
        "dataset": dataset_digest(samples),
        "resume": git_hash(Path(resume).read_bytes()) if resume else None,
    }
    return git_hash(json.dumps(parts, sort_keys=True).encode("utf-8"))


def load_samples(data: DataConfig, image_size: int, source: str | None = None) -> list[PoseSample]:
    """Resolve a dataset: the synthetic overfit set, or a pose list under a directory."""
    source = data.source if source is None else source
    if source == "synthetic":
        scene = SyntheticScene.generate(data.synthetic_seed, n_blobs=data.synthetic_blobs)
        train, _ = make_overfit_set(data.synthetic_seed, data.synthetic_n, scene, size=image_size)
        return train
    if not source:
        raise FileNotFoundError("no dataset given (data.source is empty)")
    return load_pose_list(source, data.split_file)


def phases_for(spec: str | int) -> list[int]:
    if str(spec) == "all":
        return [1, 2, 3]
    phase = int(spec)
    if phase not in (1, 2, 3):
        raise ValueError(f"phase must be 1, 2, 3 or 'all', got {spec!r}")
    return [phase]


@dataclass
class TrainRun:
    model: HyperPoseModel
    logs: dict[int, TrainLog]
    checkpoints: dict[int, Path]


def run_training(cfg: Config, out_dir: str | Path, phases: Sequence[int] = (1, 2, 3),
                 resume: str | Path | None = None, samples: Sequence[PoseSample] | None = None,
                 command: str = "train") -> TrainRun:
    """Train the requested phases, writing a manifest, ``phase{n}.ckpt`` files and ``metrics.csv``.

    A fresh run starts a new metrics file; a resumed run appends to it.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if samples is None:
        samples = load_samples(cfg.data, cfg.model.input_size)
    manifest = RunManifest(cfg.to_dict(), cfg.train.seed, input_hash(cfg, samples, resume), command)
    manifest.write(out)
    metrics = out / METRICS
    if resume is None and metrics.exists():
        metrics.unlink()
    model = load_checkpoint(resume, cfg) if resume else build_model(cfg)
    logs, ckpts = {}, {}
    try:
        for phase in phases:
            plan = PhasePlan.for_phase(model, phase, cfg.train.finetune_scope)
            logs[phase] = train_phase(model, samples, cfg, plan, metrics_path=metrics)
            ckpts[phase] = save_checkpoint(model, out / f"phase{phase}.ckpt", cfg,
                                           meta={"phase": phase, "epochs": len(logs[phase].rows)})
            manifest.outputs.append(ckpts[phase].name)
    except BaseException:
        manifest.status = "failed"
        manifest.finished_at = _now()
        manifest.write(out)
        raise
    manifest.outputs.append(METRICS)
    manifest.status = "ok"
    manifest.finished_at = _now()
    manifest.write(out)
    return TrainRun(model, logs, ckpts)

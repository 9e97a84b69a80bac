"""Pinned desk-scale setup: dataset, schedule, trained denoiser and joint encoder.

``load_or_train`` trains once and caches the checkpoints under
``$ZEROCON_CACHE_DIR`` (default ``<cwd>/.zerocon-cache``), keyed by a hash of
the pinned configuration.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from zerocon.data import make_toy_dataset
from zerocon.denoiser.training import TrainConfig, load_denoiser, save_denoiser, train_toy
from zerocon.eval import JointEncoder, ToyContext, train_joint_encoder
from zerocon.schedule import make_schedule

log = logging.getLogger(__name__)

CACHE_ENV = "ZEROCON_CACHE_DIR"


@dataclass
class ToySetup:
    dataset_size: int = 4096 + 256
    dataset_seed: int = 0
    jitter: float = 4.0
    schedule_kind: str = "linear"
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.1
    substeps: int = 50
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1500))
    joint_steps: int = 600

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "train"}
        d["train"] = self.train.to_dict()
        return d

    def key(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def schedule(self, substeps: int | None = None):
        return make_schedule(self.schedule_kind, self.T, self.beta_start, self.beta_end, substeps or self.substeps)

    def dataset(self):
        return make_toy_dataset(self.dataset_size, self.dataset_seed, self.jitter)


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.cwd() / ".zerocon-cache")


def train_setup(setup: ToySetup, out_dir: str | Path, dataset=None) -> dict:
    """Train denoiser and joint encoder, write both checkpoints and a summary to ``out_dir``.

    ``dataset`` replaces the generated grammar dataset when given.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = dataset if dataset is not None else setup.dataset()
    sched = setup.schedule()
    result = train_toy(ds, sched, setup.train)
    save_denoiser(out / "denoiser.zckp", result.model, {"schedule": sched.params(), "setup": setup.to_dict()})
    joint = train_joint_encoder(ds, result.model.text_encoder, steps=setup.joint_steps, seed=setup.train.seed)
    joint.save(out / "joint.zckp")
    summary = {
        "heldout_loss": result.heldout_loss,
        "baseline_loss": result.baseline_loss,
        "final_train_loss": result.losses[-1],
        "train_seconds": result.seconds,
        "setup": setup.to_dict(),
    }
    (out / "losses.json").write_text(json.dumps([round(v, 6) for v in result.losses]) + "\n", encoding="utf-8")
    (out / "train.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def load_context(directory: str | Path, substeps: int | None = None) -> ToyContext:
    d = Path(directory)
    model, meta = load_denoiser(d / "denoiser.zckp")
    p = meta["schedule"]
    sched = make_schedule(p["kind"], p["T"], p["beta_start"], p["beta_end"], substeps or p["substeps"])
    joint = JointEncoder.load(d / "joint.zckp", model.text_encoder)
    return ToyContext(model, sched, joint)


def load_or_train(setup: ToySetup | None = None, substeps: int | None = None) -> ToyContext:
    setup = setup or ToySetup()
    d = cache_dir() / f"toy-{setup.key()}"
    if not (d / "train.json").is_file():
        log.info("training toy setup into %s", d)
        train_setup(setup, d)
    return load_context(d, substeps)


def train_summary(setup: ToySetup | None = None) -> dict:
    setup = setup or ToySetup()
    load_or_train(setup)
    return json.loads((cache_dir() / f"toy-{setup.key()}" / "train.json").read_text(encoding="utf-8"))

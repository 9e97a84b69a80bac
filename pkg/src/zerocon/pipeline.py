"""Inversion, source recording and guided editing.

The editing run has two phases. Phase one denoises the inverted noise under
the source conditioning and records each pre-step latent with its
cross-attention maps. Phase two starts again from the same noise under the
edited conditioning; at every timestep it takes one gradient step on the
edited latent against the guidance loss, re-predicts the noise at the moved
latent and applies a DDIM step (from the moved latent by default, see
``GuidanceConfig.step_from_updated``).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from zerocon.denoiser.text import TextEmbedding
from zerocon.denoiser.unet import AttentionMapSet, Denoiser, predict
from zerocon.formats import read_tensor, write_tensor
from zerocon.guidance import (
    GuidanceConfig,
    SourceEntry,
    StepRecord,
    guided_update,
    loss_gradient,
    total_loss,
)
from zerocon.schedule import NoiseSchedule, ddim_invert_step, ddim_step, make_schedule
from zerocon.textdir import EditDirection, apply_direction

TRAJECTORY_MANIFEST = "trajectory.json"


class PipelineError(RuntimeError):
    pass


def _check_finite(x: torch.Tensor, stage: str, t: int) -> None:
    if not torch.isfinite(x).all():
        raise PipelineError(f"{stage}: non-finite latent at timestep {t}")


@torch.no_grad()
def invert(x0: torch.Tensor, c: TextEmbedding, model: Denoiser, sched: NoiseSchedule, return_path: bool = False):
    """Map a clean latent to noise with deterministic DDIM inversion.

    The noise for the move ``t -> t_next`` is predicted at ``(x_t, t_next)``,
    the usual choice since the model is undefined at ``t = 0``. With
    ``return_path`` the intermediate latents are returned as ``{t: x_t}``.
    """
    x = x0
    path = {}
    t = 0
    for t_next in sched.substep_indices:
        eps = predict(model, x, t_next, c).eps
        x = ddim_invert_step(x, eps, t, t_next, sched)
        _check_finite(x, "invert", t_next)
        path[t_next] = x
        t = t_next
    return (x, path) if return_path else x


def _denoise(x_T, c, model, sched, on_step=None):
    x = x_T
    for t in sched.descending():
        t_prev = sched.prev_timestep(t)
        out = predict(model, x, t, c, "attention" if on_step else None)
        if on_step:
            on_step(t, x, out)
        x = ddim_step(x, out.eps, t, t_prev, sched)
        _check_finite(x, "denoise", t)
    return x


@torch.no_grad()
def reconstruct(x_T: torch.Tensor, c: TextEmbedding, model: Denoiser, sched: NoiseSchedule) -> torch.Tensor:
    """Plain deterministic DDIM sampling from ``x_T`` under ``c``."""
    return _denoise(x_T, c, model, sched)


@dataclass
class SourceTrajectory:
    x_T: torch.Tensor
    timesteps: list[int]
    latents: dict[int, torch.Tensor]
    attention: dict[int, AttentionMapSet]
    c: TextEmbedding
    schedule: dict
    x0: torch.Tensor | None = None
    mode: str = "denoise"

    def entry(self, t: int) -> SourceEntry:
        if t not in self.latents or t not in self.attention:
            raise PipelineError(f"source trajectory has no entry for timestep {t}")
        return SourceEntry(latent=self.latents[t], attention=self.attention[t], c=self.c)

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        layers = sorted(self.attention[self.timesteps[0]].maps)
        write_tensor(d / "x_T.zct", self.x_T)
        write_tensor(d / "c_tokens.zct", self.c.tokens)
        if self.x0 is not None:
            write_tensor(d / "x0.zct", self.x0)
        for t in self.timesteps:
            write_tensor(d / f"latent_{t:04d}.zct", self.latents[t])
            for layer in layers:
                write_tensor(d / f"attn_{t:04d}_{layer}.zct", self.attention[t].maps[layer])
        manifest = {
            "format": "ZCT1",
            "timesteps": self.timesteps,
            "layers": layers,
            "schedule": self.schedule,
            "mode": self.mode,
            "has_x0": self.x0 is not None,
        }
        (d / TRAJECTORY_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "SourceTrajectory":
        d = Path(directory)
        manifest = json.loads((d / TRAJECTORY_MANIFEST).read_text(encoding="utf-8"))
        timesteps = [int(t) for t in manifest["timesteps"]]
        latents = {t: read_tensor(d / f"latent_{t:04d}.zct") for t in timesteps}
        attention = {
            t: AttentionMapSet({layer: read_tensor(d / f"attn_{t:04d}_{layer}.zct") for layer in manifest["layers"]})
            for t in timesteps
        }
        return cls(
            x_T=read_tensor(d / "x_T.zct"),
            timesteps=timesteps,
            latents=latents,
            attention=attention,
            c=TextEmbedding.from_tokens(read_tensor(d / "c_tokens.zct")),
            schedule=manifest["schedule"],
            x0=read_tensor(d / "x0.zct") if manifest.get("has_x0") else None,
            mode=manifest.get("mode", "denoise"),
        )


@torch.no_grad()
def record_source(
    x_T: torch.Tensor,
    c: TextEmbedding,
    model: Denoiser,
    sched: NoiseSchedule,
    mode: str = "denoise",
    inversion_path: dict[int, torch.Tensor] | None = None,
) -> SourceTrajectory:
    """Record per-timestep source latents and cross-attention maps.

    ``mode="denoise"`` re-denoises from ``x_T`` under ``c`` (the same code
    path as :func:`reconstruct`). ``mode="inversion"`` uses the latents from
    an inversion path instead; pass the path returned by
    ``invert(..., return_path=True)``.
    """
    latents: dict[int, torch.Tensor] = {}
    maps: dict[int, AttentionMapSet] = {}
    if mode == "denoise":

        def on_step(t, x, out):
            latents[t] = x
            maps[t] = out.attention

        x0 = _denoise(x_T, c, model, sched, on_step)
    elif mode == "inversion":
        if inversion_path is None:
            raise ValueError("mode='inversion' needs the inversion path")
        for t in sched.descending():
            latents[t] = inversion_path[t]
            maps[t] = predict(model, inversion_path[t], t, c, "attention").attention
        x0 = None
    else:
        raise ValueError(f"unknown recording mode {mode!r}")
    return SourceTrajectory(
        x_T=x_T,
        timesteps=sched.descending(),
        latents=latents,
        attention=maps,
        c=c,
        schedule=sched.params(),
        x0=x0,
        mode=mode,
    )


@dataclass
class EditResult:
    latent: torch.Tensor
    image: np.ndarray | None
    records: list[StepRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seconds: float = 0.0


def edit(
    traj: SourceTrajectory,
    c: TextEmbedding,
    delta: EditDirection,
    model: Denoiser,
    sched: NoiseSchedule,
    config: GuidanceConfig,
    codec=None,
) -> EditResult:
    """Guided denoising from ``traj.x_T`` under ``c + delta``."""
    start = time.perf_counter()
    c_hat = apply_direction(c, delta)
    x = traj.x_T
    records = []
    for step, t in enumerate(sched.descending()):
        t_prev = sched.prev_timestep(t)
        grad, l_c, l_e = loss_gradient(model, x, t, c_hat, traj.entry(t), config)
        l_tot = float(total_loss(np.nan_to_num(l_c), np.nan_to_num(l_e), config))
        if not np.isfinite(l_tot):
            raise PipelineError(f"edit: non-finite guidance loss at step {step} (t={t})")
        records.append(StepRecord(step, t, l_c, l_e, l_tot, float(grad.norm())))
        moved = guided_update(x, grad, config.lambda_lr)
        with torch.no_grad():
            eps = predict(model, moved, t, c_hat).eps
            x = ddim_step(moved if config.step_from_updated else x, eps, t, t_prev, sched)
        _check_finite(x, "edit", t)
    image = codec.decode(x) if codec is not None else None
    snapshot = {"guidance": config.to_dict(), "schedule": sched.params()}
    return EditResult(latent=x, image=image, records=records, config=snapshot, seconds=time.perf_counter() - start)


def schedule_from_params(params: dict) -> NoiseSchedule:
    return make_schedule(params["kind"], int(params["T"]), float(params["beta_start"]), float(params["beta_end"]), int(params["substeps"]))



"""Structure-preserving guidance losses and the latent gradient step.

Two losses compare the edited branch against the recorded source branch at the
same timestep:

* cross-attention loss: Frobenius distance between cross-attention maps,
  averaged over the recorded layers;
* patch contrastive (CUT) loss: InfoNCE over feature patches at randomly
  selected spatial positions. The query is the source patch, the positive is
  the edited patch at the same position, and the negatives are the edited
  patches at the other selected positions.

Their weighted sum is differentiated with respect to the edited latent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from zerocon import rng
from zerocon.denoiser.text import TextEmbedding
from zerocon.denoiser.unet import DEFAULT_TAPS, AttentionMapSet, Denoiser, FeatureStack, Record, predict

LOG_COLUMNS = ("step", "t", "l_c", "l_e", "l_total", "grad_norm")


class GuidanceError(RuntimeError):
    pass


@dataclass
class GuidanceConfig:
    lambda_c: float = 0.1
    lambda_e: float = 0.05
    # toy calibration: guidance gradients are O(1e-3), so unit steps barely move the latent
    lambda_lr: float = 15.0
    tau: float = 0.07
    patches_per_layer: int = 16
    tap_layers: tuple[str, ...] = DEFAULT_TAPS
    patch_seed: int = 0
    normalize_patches: bool = True
    # conditioning used for the source-branch features: "source" (c) or "target" (c_hat)
    source_features_cond: str = "source"
    log_inactive: bool = True
    # True: take the sampler step from the moved latent (x <- x - lr * grad in place).
    # False: move only the latent used for the noise prediction, step from the original.
    step_from_updated: bool = True

    def __post_init__(self):
        self.tap_layers = tuple(self.tap_layers)
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        for name in ("lambda_c", "lambda_e", "lambda_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.lambda_e > 0 and self.patches_per_layer < 2:
            raise ValueError("patches_per_layer must be >= 2 when lambda_e > 0 (need a negative)")
        if self.patches_per_layer < 1:
            raise ValueError("patches_per_layer must be >= 1")
        if self.source_features_cond not in ("source", "target"):
            raise ValueError(f"source_features_cond must be 'source' or 'target', got {self.source_features_cond!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tap_layers"] = list(self.tap_layers)
        return d


@dataclass
class PatchSelection:
    indices: dict[str, torch.Tensor] = field(default_factory=dict)


@dataclass
class StepRecord:
    step: int
    t: int
    l_c: float
    l_e: float
    l_total: float
    grad_norm: float


def cross_attention_loss(m_hat: AttentionMapSet, m_ref: AttentionMapSet) -> torch.Tensor:
    if set(m_hat.maps) != set(m_ref.maps):
        raise ValueError(f"attention layer sets differ: {sorted(m_hat.maps)} vs {sorted(m_ref.maps)}")
    if not m_hat.maps:
        raise ValueError("no attention layers recorded")
    norms = []
    for layer, a in m_hat.maps.items():
        b = m_ref.maps[layer]
        if a.shape != b.shape:
            raise ValueError(f"layer {layer}: shape {tuple(a.shape)} vs {tuple(b.shape)}")
        norms.append(_frobenius(a - b.to(a.dtype)))
    return torch.stack(norms).mean()


def _frobenius(d: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite slope at 0; define the gradient there as 0
    sq = d.pow(2).sum()
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))


def sample_patches(layer_sizes: dict[str, int], patches: int, seed: int) -> PatchSelection:
    """Uniform draw without replacement of ``patches`` positions per layer."""
    g = np.random.default_rng(seed)
    out = {}
    for layer, n in layer_sizes.items():
        if patches > n:
            raise ValueError(f"layer {layer}: cannot select {patches} patches from {n} positions")
        out[layer] = torch.from_numpy(g.choice(n, size=patches, replace=False).astype(np.int64))
    return PatchSelection(out)


def info_nce(query, positive, negatives, tau: float) -> torch.Tensor:
    """``-log softmax`` weight of the positive among ``[positive] + negatives``."""
    q = torch.as_tensor(query)
    p = torch.as_tensor(positive, dtype=q.dtype)
    if isinstance(negatives, torch.Tensor):
        neg = negatives.to(q.dtype)
    else:
        if len(negatives) == 0:
            raise ValueError("info_nce needs at least one negative")
        neg = torch.stack([torch.as_tensor(n, dtype=q.dtype) for n in negatives])
    if neg.ndim != 2 or neg.shape[0] == 0:
        raise ValueError("info_nce needs at least one negative")
    if not (q.shape == p.shape and q.shape[-1] == neg.shape[-1] and q.ndim == 1):
        raise ValueError(f"dimension mismatch: query {tuple(q.shape)}, positive {tuple(p.shape)}, negatives {tuple(neg.shape)}")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    logits = torch.cat([(q @ p)[None], neg @ q]) / tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def _patches(stack: FeatureStack, layer: str, idx: torch.Tensor, normalize: bool) -> torch.Tensor:
    h = stack.features[layer][:, idx].transpose(0, 1)  # S, d
    return F.normalize(h, dim=1) if normalize else h


def cut_loss(src: FeatureStack, edit: FeatureStack, config: GuidanceConfig, selection: PatchSelection) -> torch.Tensor:
    """Mean InfoNCE over all (layer, query) pairs of the selection."""
    if set(src.features) != set(edit.features):
        raise ValueError(f"feature layer sets differ: {sorted(src.features)} vs {sorted(edit.features)}")
    total, count = None, 0
    for layer, idx in selection.indices.items():
        if layer not in edit.features:
            raise ValueError(f"selection layer {layer!r} not in feature stacks")
        a, b = src.features[layer], edit.features[layer]
        if a.shape != b.shape:
            raise ValueError(f"layer {layer}: shape {tuple(a.shape)} vs {tuple(b.shape)}")
        q = _patches(src, layer, idx, config.normalize_patches).to(b.dtype)
        k = _patches(edit, layer, idx, config.normalize_patches)
        logits = q @ k.transpose(0, 1) / config.tau  # row s: positive on the diagonal
        terms = torch.logsumexp(logits, dim=1) - logits.diagonal()
        total = terms.sum() if total is None else total + terms.sum()
        count += len(idx)
    if count == 0:
        raise ValueError("empty patch selection")
    return total / count


def total_loss(l_c, l_e, config: GuidanceConfig):
    return config.lambda_c * l_c + config.lambda_e * l_e


def guided_update(x, grad, lambda_lr: float):
    if tuple(x.shape) != tuple(grad.shape):
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(grad.shape)}")
    return x - lambda_lr * grad


def selection_for_step(layer_sizes: dict[str, int], config: GuidanceConfig, t: int) -> PatchSelection:
    return sample_patches(layer_sizes, config.patches_per_layer, rng.derive_seed(config.patch_seed, "patches", t))


@dataclass
class SourceEntry:
    """Source-branch state at one timestep: latent, its cross-attention maps and conditioning."""

    latent: torch.Tensor
    attention: AttentionMapSet
    c: TextEmbedding
    features: FeatureStack | None = None


def source_features(model: Denoiser, entry: SourceEntry, t: int, c_hat: TextEmbedding, config: GuidanceConfig) -> FeatureStack:
    if entry.features is not None:
        return entry.features
    cond = entry.c if config.source_features_cond == "source" else c_hat
    with torch.no_grad():
        out = predict(model, entry.latent, t, cond, Record(features=True, taps=config.tap_layers))
    return out.features.detach()


def loss_gradient(
    model: Denoiser, x_edit: torch.Tensor, t: int, c_hat: TextEmbedding, src: SourceEntry, config: GuidanceConfig
) -> tuple[torch.Tensor, float, float]:
    """Gradient of the weighted guidance loss w.r.t. the edited latent, plus both loss values.

    Source-branch quantities are constants. With both weights zero the
    gradient is exactly zero and the edited branch is not differentiated.
    """
    active_c, active_e = config.lambda_c > 0, config.lambda_e > 0
    want_c = active_c or config.log_inactive
    want_e = active_e or config.log_inactive
    need_grad = active_c or active_e
    if not (want_c or want_e):
        return torch.zeros_like(x_edit), float("nan"), float("nan")

    x = x_edit.detach().clone().requires_grad_(need_grad)
    rec = Record(attention=want_c, features=want_e, taps=config.tap_layers)
    with torch.set_grad_enabled(need_grad):
        out = predict(model, x, t, c_hat, rec)
        l_c = cross_attention_loss(out.attention, src.attention) if want_c else None
        l_e = None
        if want_e:
            h_src = source_features(model, src, t, c_hat, config)
            sizes = {layer: h_src.features[layer].shape[1] for layer in config.tap_layers}
            l_e = cut_loss(h_src, out.features, config, selection_for_step(sizes, config, t))
        lc_val = float(l_c.detach()) if l_c is not None else float("nan")
        le_val = float(l_e.detach()) if l_e is not None else float("nan")
        if not need_grad:
            return torch.zeros_like(x_edit), lc_val, le_val
        terms = []
        if active_c:
            terms.append(config.lambda_c * l_c)
        if active_e:
            terms.append(config.lambda_e * l_e)
        (grad,) = torch.autograd.grad(sum(terms), x)
    if not torch.isfinite(grad).all():
        raise GuidanceError(f"non-finite guidance gradient at t={t} (l_c={lc_val:.6g}, l_e={le_val:.6g})")
    return grad.detach(), lc_val, le_val


def write_loss_csv(path: str | Path, records: list[StepRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([r.step, r.t, _fmt(r.l_c), _fmt(r.l_e), _fmt(r.l_total), _fmt(r.grad_norm)])


def read_loss_csv(path: str | Path) -> list[StepRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return [
        StepRecord(int(r["step"]), int(r["t"]), float(r["l_c"]), float(r["l_e"]), float(r["l_total"]), float(r["grad_norm"]))
        for r in rows
    ]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.9g}"

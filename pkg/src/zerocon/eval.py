"""Desk-scale editing metrics and the ablation runner.

* ``text_alignment``: cosine between image and prompt embeddings in a toy joint
  space (a stand-in for CLIP score).
* ``background_preservation``: mean distance between L2-normalised feature
  patches of the source and edited images over background positions only.
  Reported as ``bg-patch-dist``; it is a patch-feature analogue, not LPIPS.
* ``run_experiment``: variants x tasks x seeds sweep producing per-run rows
  and a summary table.
"""

from __future__ import annotations

import colorsys
import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from zerocon import rng
from zerocon.data import BACKGROUNDS, COLORS, MODIFIERS, SHAPES, ShapeLabel, all_labels, render
from zerocon.denoiser.codec import IdentityCodec
from zerocon.denoiser.text import TextEmbedding
from zerocon.denoiser.unet import FeatureStack
from zerocon.formats import read_checkpoint, write_checkpoint
from zerocon.guidance import GuidanceConfig
from zerocon.pipeline import edit, invert, record_source
from zerocon.textdir import (
    EditDirection,
    EditSpec,
    ToyCaptionProvider,
    ToySentenceGenerator,
    apply_direction,
    build_target_prompt,
    caption,
    edit_direction,
    generate_bank,
)

CSV_COLUMNS = ("variant", "task", "seed", "alignment", "bg_distance")
BG_LABEL = "bg-patch-dist"


class MetricError(ValueError):
    pass


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.to(torch.float64).flatten()
    b = b.to(torch.float64).flatten()
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(F.cosine_similarity(a, b, dim=0))


class ImageHead(nn.Module):
    """Small conv encoder: uint8 image -> joint-space vector, with tappable conv features."""

    layers = ("conv0", "conv1", "conv2")

    def __init__(self, out_dim: int = 16):
        super().__init__()
        self.conv0 = nn.Conv2d(3, 32, 3, padding=1)
        self.conv1 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(64, 64, 3, stride=2, padding=1)
        self.proj = nn.Linear(64 * 2, out_dim)

    def forward(self, x, taps=False):
        feats = {}
        h = F.silu(self.conv0(x))
        feats["conv0"] = h
        h = F.silu(self.conv1(h))
        feats["conv1"] = h
        h = F.silu(self.conv2(h))
        feats["conv2"] = h
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        out = self.proj(pooled)
        return (out, feats) if taps else out


class JointEncoder:
    """Toy joint text-image space.

    Text side: mean-pooled caption embeddings from the denoiser's table. Image
    side: :class:`ImageHead` trained so each image's vector points at its own
    caption's pooled embedding.
    """

    def __init__(self, text_encoder, head: ImageHead):
        self.text_encoder = text_encoder
        self.head = head.eval()
        self.codec = IdentityCodec()

    def _img(self, image: np.ndarray) -> torch.Tensor:
        return self.codec.encode(image)[None]

    @torch.no_grad()
    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        return self.head(self._img(image))[0]

    def encode_text(self, prompt) -> torch.Tensor:
        if isinstance(prompt, TextEmbedding):
            return prompt.pooled
        return self.text_encoder.encode(str(prompt)).pooled

    @torch.no_grad()
    def features(self, image: np.ndarray, layers=("conv0", "conv1")) -> FeatureStack:
        _, feats = self.head(self._img(image), taps=True)
        return FeatureStack({k: feats[k][0].flatten(1) for k in layers})

    def save(self, path) -> None:
        write_checkpoint(path, self.head.state_dict(), {"kind": "joint_image_head", "out_dim": self.head.proj.out_features})

    @classmethod
    def load(cls, path, text_encoder) -> "JointEncoder":
        state, meta = read_checkpoint(path)
        if meta.get("kind") != "joint_image_head":
            raise ValueError(f"{path}: not a joint image head checkpoint")
        head = ImageHead(meta["out_dim"])
        head.load_state_dict(state)
        return cls(text_encoder, head)


def train_joint_encoder(dataset, text_encoder, steps: int = 600, batch_size: int = 64, seed: int = 0, tau: float = 0.1) -> JointEncoder:
    """Fit the image head by classifying each image among all grammar captions (cosine logits)."""
    captions = [lab.caption() for lab in all_labels()]
    index = {c: i for i, c in enumerate(captions)}
    with torch.no_grad():
        text = F.normalize(torch.stack([text_encoder.encode(c).pooled for c in captions]), dim=1)
    items = [it for it in dataset if it.caption in index]
    if not items:
        raise ValueError("no grammar-captioned images to train the joint encoder")
    codec = IdentityCodec(items[0].image.shape[0])
    x = torch.stack([codec.encode(it.image) for it in items])
    y = torch.tensor([index[it.caption] for it in items])
    torch.manual_seed(rng.derive_seed(seed, "joint-init"))
    head = ImageHead(text.shape[1])
    opt = torch.optim.Adam(head.parameters(), lr=2e-3)
    g = rng.torch_generator(seed, "joint-train")
    for _ in range(steps):
        idx = torch.randint(0, len(x), (batch_size,), generator=g)
        logits = F.normalize(head(x[idx]), dim=1) @ text.T / tau
        loss = F.cross_entropy(logits, y[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return JointEncoder(text_encoder, head)


def text_alignment(image: np.ndarray, prompt, joint: JointEncoder) -> float:
    return cosine(joint.encode_image(image), joint.encode_text(prompt))


def _foreground_at(mask: np.ndarray, n_positions: int, dilate: int) -> np.ndarray:
    side = int(round(math.sqrt(n_positions)))
    if side * side != n_positions or mask.shape[0] % side:
        raise MetricError(f"cannot map a {mask.shape} mask onto {n_positions} feature positions")
    m = torch.from_numpy(np.asarray(mask, dtype=np.float32))[None, None]
    if dilate:
        m = F.max_pool2d(m, 2 * dilate + 1, stride=1, padding=dilate)
    block = mask.shape[0] // side
    m = F.max_pool2d(m, block) if block > 1 else m
    return (m[0, 0] > 0).flatten().numpy()


def background_preservation(src: np.ndarray, edited: np.ndarray, mask: np.ndarray, extractor, dilate: int = 1) -> float:
    """Mean L2 distance of unit-normalised feature patches at background positions.

    ``mask`` is True on the foreground (edited region). ``extractor`` maps an
    image to a :class:`FeatureStack`. The mask is dilated by ``dilate`` pixels and
    max-pooled onto each feature grid, so a position counts as background only
    if its whole block is background. Layers with no background positions are
    skipped.
    """
    mask = np.asarray(mask, dtype=bool)
    if np.asarray(src).shape != np.asarray(edited).shape or mask.shape != np.asarray(src).shape[:2]:
        raise MetricError("source, edited image and mask shapes disagree")
    if mask.all():
        raise MetricError("empty background")
    fs, fe = extractor(src), extractor(edited)
    per_layer = []
    for layer, a in fs.features.items():
        b = fe.features[layer]
        bg = ~_foreground_at(mask, a.shape[1], dilate)
        if not bg.any():
            continue
        a_bg = F.normalize(a[:, bg].to(torch.float64), dim=0)
        b_bg = F.normalize(b[:, bg].to(torch.float64), dim=0)
        per_layer.append(float((a_bg - b_bg).norm(dim=0).mean()))
    if not per_layer:
        raise MetricError("empty background")
    return float(np.mean(per_layer))


def direction_similarity_report(image: np.ndarray, source_prompt, target_prompt, delta: EditDirection, joint: JointEncoder) -> dict:
    """Similarities between "source + delta" (text 1), the target prompt (text 2) and an image."""
    c_src = joint.text_encoder.encode(str(source_prompt))
    text1 = joint.encode_text(apply_direction(c_src, delta))
    text2 = joint.encode_text(target_prompt)
    img = joint.encode_image(image)
    return {
        "sim_text1_image": cosine(text1, img),
        "sim_text2_image": cosine(text2, img),
        "sim_text1_text2": cosine(text1, text2),
        "sim_source_image": cosine(joint.encode_text(c_src), img),
    }


def _hue(rgb) -> float:
    """Hue angle in degrees of an RGB triple in [0, 255]."""
    return 360.0 * colorsys.rgb_to_hsv(*(float(v) / 255.0 for v in rgb))[0]


def classify_hue(image: np.ndarray, mask: np.ndarray) -> str:
    """Name of the palette color whose hue is nearest the mean foreground color."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MetricError("empty foreground")
    h = _hue(np.asarray(image, dtype=np.float64)[mask].mean(axis=0))
    hues = {name: _hue(rgb) for name, rgb in COLORS.items()}
    return min(hues, key=lambda n: min(abs(h - hues[n]), 360 - abs(h - hues[n])))


@dataclass(frozen=True)
class ToyTask:
    """Attribute swap on grammar images, e.g. ``color: red -> blue``."""

    name: str
    attribute: str
    source_value: str
    target_value: str

    def edit_spec(self) -> EditSpec:
        return EditSpec(self.source_value, self.target_value)


DEFAULT_TASKS = (
    ToyTask("red2blue", "color", "red", "blue"),
    ToyTask("circle2square", "shape", "circle", "square"),
)


@dataclass(frozen=True)
class Variant:
    name: str
    overrides: tuple = ()
    word_swap: bool = False

    def guidance(self, base: GuidanceConfig) -> GuidanceConfig:
        return replace(base, **dict(self.overrides))


STANDARD_VARIANTS = (
    Variant("full"),
    Variant("no_cut", (("lambda_e", 0.0),)),
    Variant("no_guidance", (("lambda_c", 0.0), ("lambda_e", 0.0))),
    Variant("word_swap", (("lambda_c", 0.0), ("lambda_e", 0.0)), word_swap=True),
)


def lr_sweep_variants(base_lr: float, factors=(0.5, 1.0, 2.0, 4.0)) -> tuple[Variant, ...]:
    return tuple(Variant(f"lr_x{f:g}", (("lambda_lr", base_lr * f),)) for f in factors)


@dataclass
class ExperimentSpec:
    tasks: tuple[ToyTask, ...] = DEFAULT_TASKS
    variants: tuple[Variant, ...] = STANDARD_VARIANTS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    bank_size: int = 16
    jitter: float = 4.0

    def config_hash(self) -> str:
        blob = json.dumps(
            {
                "tasks": [t.__dict__ for t in self.tasks],
                "variants": [[v.name, list(v.overrides), v.word_swap] for v in self.variants],
                "seeds": list(self.seeds),
                "guidance": self.guidance.to_dict(),
                "bank_size": self.bank_size,
                "jitter": self.jitter,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MetricRow:
    variant: str
    task: str
    seed: int
    alignment: float
    bg_distance: float
    error: str = ""


@dataclass
class MetricReport:
    variant: str
    task: str
    alignment_score: float
    bg_distance: float
    n_images: int
    config_hash: str

    @property
    def missing(self) -> bool:
        return self.n_images == 0


@dataclass
class ToyCase:
    """One source image for a task, with the masks needed for scoring."""

    task: ToyTask
    seed: int
    label: ShapeLabel
    target_label: ShapeLabel
    image: np.ndarray
    target_image: np.ndarray
    mask: np.ndarray  # union of source and target foregrounds


def make_case(task: ToyTask, seed: int, jitter: float = 4.0, size: int = 32) -> ToyCase:
    g = rng.numpy_rng(seed, f"case:{task.name}")
    fields = {
        "color": str(g.choice(list(COLORS))),
        "shape": str(g.choice(SHAPES)),
        "background": str(g.choice(BACKGROUNDS)),
        "modifier": str(g.choice(MODIFIERS)),
    }
    fields[task.attribute] = task.source_value
    label = ShapeLabel(**fields)
    target = label.replace(**{task.attribute: task.target_value})
    center = tuple(size / 2 + g.uniform(-jitter, jitter, size=2))
    img, m_src = render(label, center, size)
    tgt, m_tgt = render(target, center, size)
    return ToyCase(task, seed, label, target, img, tgt, m_src | m_tgt)


class ToyContext:
    """Everything needed to run toy edits: denoiser, schedule, codec, joint encoder."""

    def __init__(self, model, sched, joint: JointEncoder, codec=None):
        self.model = model
        self.sched = sched
        self.joint = joint
        self.codec = codec or IdentityCodec(model.latent_shape[1], model.latent_shape[0])

    @property
    def text_encoder(self):
        return self.model.text_encoder

    def extractor(self, image):
        return self.joint.features(image)


@dataclass
class PreparedCase:
    case: ToyCase
    source_prompt: str
    target_prompt: str
    c: TextEmbedding
    delta: EditDirection
    traj: object


def prepare_case(ctx: ToyContext, case: ToyCase, bank_size: int = 16) -> PreparedCase:
    provider = ToyCaptionProvider()
    provider.register(case.image, case.label)
    source = caption(case.image, provider)
    target = build_target_prompt(source, case.task.edit_spec())
    bank = generate_bank(source, target, bank_size, ToySentenceGenerator())
    delta = edit_direction(bank, ctx.text_encoder)
    c = ctx.text_encoder.encode(str(source))
    x0 = ctx.codec.encode(case.image)
    x_T = invert(x0, c, ctx.model, ctx.sched)
    traj = record_source(x_T, c, ctx.model, ctx.sched)
    return PreparedCase(case, str(source), str(target), c, delta, traj)


def run_variant(ctx: ToyContext, prep: PreparedCase, variant: Variant, base: GuidanceConfig, patch_seed: int):
    cfg = replace(variant.guidance(base), patch_seed=patch_seed)
    if variant.word_swap:
        target = ctx.text_encoder.encode(prep.target_prompt)
        delta = EditDirection(target.tokens.to(torch.float64) - prep.c.tokens.to(torch.float64))
    else:
        delta = prep.delta
    return edit(prep.traj, prep.c, delta, ctx.model, ctx.sched, cfg, codec=ctx.codec)


def score(ctx: ToyContext, prep: PreparedCase, edited_image: np.ndarray) -> tuple[float, float]:
    align = text_alignment(edited_image, prep.target_prompt, ctx.joint)
    bg = background_preservation(prep.case.image, edited_image, prep.case.mask, ctx.extractor)
    return align, bg


def run_experiment(spec: ExperimentSpec, ctx: ToyContext, progress=None) -> tuple[list[MetricRow], list[MetricReport]]:
    """Run every variant x task x seed; failures become rows with an error, not exceptions."""
    rows: list[MetricRow] = []
    for task in spec.tasks:
        for seed in spec.seeds:
            try:
                prep = prepare_case(ctx, make_case(task, seed, spec.jitter), spec.bank_size)
            except Exception as exc:
                rows.extend(MetricRow(v.name, task.name, seed, math.nan, math.nan, f"prepare: {exc}") for v in spec.variants)
                continue
            for variant in spec.variants:
                try:
                    result = run_variant(ctx, prep, variant, spec.guidance, rng.derive_seed(seed, "patch"))
                    align, bg = score(ctx, prep, result.image)
                    rows.append(MetricRow(variant.name, task.name, seed, align, bg))
                except Exception as exc:
                    rows.append(MetricRow(variant.name, task.name, seed, math.nan, math.nan, str(exc)))
                if progress:
                    progress(rows[-1])
    return rows, summarize(rows, spec)


def summarize(rows: list[MetricRow], spec: ExperimentSpec | None = None, config_hash: str | None = None) -> list[MetricReport]:
    config_hash = config_hash or (spec.config_hash() if spec else "")
    variants = list(dict.fromkeys(r.variant for r in rows))
    tasks = list(dict.fromkeys(r.task for r in rows))
    out = []
    for v in variants:
        for t in tasks:
            ok = [r for r in rows if r.variant == v and r.task == t and not r.error]
            if not any(r.variant == v and r.task == t for r in rows):
                continue
            out.append(
                MetricReport(
                    variant=v,
                    task=t,
                    alignment_score=float(np.mean([r.alignment for r in ok])) if ok else math.nan,
                    bg_distance=float(np.mean([r.bg_distance for r in ok])) if ok else math.nan,
                    n_images=len(ok),
                    config_hash=config_hash,
                )
            )
    return out


def _f(v: float) -> str:
    return "missing" if math.isnan(v) else f"{v:.6f}"


def rows_to_csv(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.variant, r.task, r.seed, _f(r.alignment), _f(r.bg_distance)])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[MetricRow]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        a = math.nan if r["alignment"] == "missing" else float(r["alignment"])
        b = math.nan if r["bg_distance"] == "missing" else float(r["bg_distance"])
        out.append(MetricRow(r["variant"], r["task"], int(r["seed"]), a, b, "" if not math.isnan(a) else "missing"))
    return out


def summary_to_csv(reports: list[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant", "task", "alignment", BG_LABEL, "n_images", "config_hash"))
    for r in reports:
        w.writerow([r.variant, r.task, _f(r.alignment_score), _f(r.bg_distance), r.n_images, r.config_hash])
    return buf.getvalue()


def render_table(reports: list[MetricReport]) -> str:
    header = ("variant", "task", "alignment", BG_LABEL, "n")
    body = [(r.variant, r.task, _f(r.alignment_score), _f(r.bg_distance), str(r.n_images)) for r in reports]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header] + body]
    return "\n".join(lines) + "\n"

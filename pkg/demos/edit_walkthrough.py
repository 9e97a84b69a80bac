"""Walk through one edit on the toy model, printing what each stage produces.

Run from the repository root:

    python demos/edit_walkthrough.py

The first run trains the toy model (about 15 minutes on one CPU) and caches it
under ``.zerocon-cache/``.
"""

from dataclasses import replace

from zerocon import rng
from zerocon.data import ShapeLabel, render, save_png
from zerocon.eval import background_preservation, classify_hue, text_alignment
from zerocon.guidance import GuidanceConfig
from zerocon.pipeline import edit, invert, reconstruct, record_source
from zerocon.textdir import (
    EditSpec,
    ToyCaptionProvider,
    ToySentenceGenerator,
    build_target_prompt,
    caption,
    edit_direction,
    generate_bank,
)
from zerocon.toy import load_or_train

ctx = load_or_train()
image, mask = render(ShapeLabel("red", "circle", "striped"), (14.0, 18.0))
save_png("walkthrough_source.png", image)

source = caption(image, ToyCaptionProvider())
target = build_target_prompt(source, EditSpec("red", "blue"))
print(f"caption: {source}\ntarget:  {target}")

bank = generate_bank(source, target, 16, ToySentenceGenerator())
print(f"sentence bank, first pair: {bank.source_sentences[0]!r} / {bank.target_sentences[0]!r}")
delta = edit_direction(bank, ctx.text_encoder)
print(f"edit direction shape {tuple(delta.shape)}, norm {float(delta.delta.norm()):.3f}")

c = ctx.text_encoder.encode(str(source))
x0 = ctx.codec.encode(image)
x_T = invert(x0, c, ctx.model, ctx.sched)
back = reconstruct(x_T, c, ctx.model, ctx.sched)
print(f"inversion round trip, relative L2 error {float((back - x0).norm() / x0.norm()):.4f}")

traj = record_source(x_T, c, ctx.model, ctx.sched)
cfg = GuidanceConfig(patch_seed=rng.derive_seed(0, "patch"))
result = edit(traj, c, delta, ctx.model, ctx.sched, cfg, codec=ctx.codec)
save_png("walkthrough_edited.png", result.image)

first, last = result.records[0], result.records[-1]
print(f"guidance loss at t={first.t}: {first.l_total:.4f}, at t={last.t}: {last.l_total:.4f}")
print(f"edited foreground hue: {classify_hue(result.image, mask)}")
print(f"alignment with target: {text_alignment(result.image, target, ctx.joint):.3f}")
print(f"background patch distance: {background_preservation(image, result.image, mask, ctx.extractor):.4f}")

# a smaller step keeps the color edit but gives back some background fidelity
weak = edit(traj, c, delta, ctx.model, ctx.sched, replace(cfg, lambda_lr=1.0), codec=ctx.codec).image
print(f"with lambda_lr=1: hue {classify_hue(weak, mask)}, "
      f"background patch distance {background_preservation(image, weak, mask, ctx.extractor):.4f}")
print("wrote walkthrough_source.png and walkthrough_edited.png")

"""Acceptance criteria, one test each.

Every test records a verdict through the ``criterion`` fixture; the terminal
summary prints one PASS/FAIL line per criterion. Wall-time limits are part of
each verdict.
"""

import hashlib
import math

import numpy as np
import torch
from scipy.stats import spearmanr

from zerocon import rng
from zerocon.cli import main
from zerocon.data import ShapeLabel, all_labels, load_png, render, save_png
from zerocon.denoiser import AttentionMapSet, Record, TextEmbedding, attention, predict
from zerocon.eval import (
    ExperimentSpec,
    Variant,
    direction_similarity_report,
    lr_sweep_variants,
    run_experiment,
)
from zerocon.guidance import GuidanceConfig, SourceEntry, info_nce, loss_gradient
from zerocon.pipeline import edit, invert, reconstruct, record_source
from zerocon.schedule import ddim_invert_step, ddim_step, make_schedule, one_step_x0, q_sample
from zerocon.textdir import (
    EditDirection,
    SentenceBank,
    ToySentenceGenerator,
    apply_direction,
    edit_direction,
    generate_bank,
)
from zerocon.toy import train_summary

CPU_TRAIN_BUDGET_SECONDS = 4 * 3600
ACCEPT_SEEDS = tuple(range(20))
SWEEP_SEEDS = tuple(range(10))


def _render_case(color="red", shape="circle", background="white", center=(15.5, 16.0)):
    return render(ShapeLabel(color, shape, background), center)[0]


def test_01_schedule_algebra(criterion):
    with criterion(1, "schedule algebra, 100-step chain", 1.0) as rec:
        s = make_schedule("linear", 200, 1e-4, 0.1, 100)
        g = torch.Generator().manual_seed(0)
        x0 = torch.randn(3, 32, 32, generator=g)
        eps = {t: torch.randn(3, 32, 32, generator=g) for t in s.substep_indices}
        identity = max(float((one_step_x0(q_sample(x0, t, eps[t], s), eps[t], t, s) - x0).abs().max()) for t in s.substep_indices)
        x, t = x0, 0
        for t_next in s.substep_indices:
            x = ddim_invert_step(x, eps[t_next], t, t_next, s)
            t = t_next
        for t in s.descending():
            x = ddim_step(x, eps[t], t, s.prev_timestep(t), s)
        chain = float((x - x0).abs().max())
        rec.ok = identity <= 1e-4 and chain <= 1e-4
        rec.detail = f"one-step identity {identity:.1e}, invert/step chain {chain:.1e}"
    assert rec.passed, rec.line()


def test_02_attention(criterion, toy):
    with criterion(2, "attention correctness", 1.0) as rec:
        q = np.random.default_rng(0).standard_normal((3, 4))
        out1, m1 = attention(q, np.ones((1, 4)), np.array([[2.0, -1.0]]))
        single = np.allclose(m1, 1.0, atol=1e-5) and np.allclose(out1, [[2.0, -1.0]] * 3, atol=1e-5)

        v = np.arange(6.0).reshape(3, 2)
        out2, m2 = attention(np.array([[1.0, 0.0], [2.0, 0.0]]), np.array([[0.0, 1.0], [0.0, -3.0], [0.0, 0.5]]), v)
        uniform = np.allclose(m2, 1 / 3, atol=1e-5) and np.allclose(out2, v.mean(axis=0), atol=1e-5)

        out3, m3 = attention(np.array([[1.0], [0.0]]), np.array([[1.0], [-1.0]]), np.eye(2))
        e2 = math.exp(2.0)
        hand = [e2 / (e2 + 1), 1 / (e2 + 1)]
        worked = np.array_equal(np.round(m3[0], 5), np.round(hand, 5)) and np.array_equal(np.round(out3[0], 5), np.round(hand, 5))

        c = toy.text_encoder.encode("a red circle on a white background")
        x = torch.randn(toy.model.latent_shape, generator=torch.Generator().manual_seed(1))
        worst = 0.0
        for t in (1, 100, 200):
            maps = predict(toy.model, x, t, c, Record(attention=True)).attention
            worst = max(worst, max(float((m.sum(-1) - 1).abs().max()) for m in maps.maps.values()))
        rec.ok = single and uniform and worked and worst <= 1e-5
        rec.detail = f"examples {'ok' if single and uniform and worked else 'MISMATCH'}, worst row-sum error {worst:.1e}"
    assert rec.passed, rec.line()


def test_03_gradient_oracle(criterion, toy):
    """float32 autograd gradient against central differences taken on a float64 copy of the toy model."""
    import copy

    with criterion(3, "loss gradient vs finite differences", 120.0) as rec:
        image = _render_case()
        c = toy.text_encoder.encode("a red circle on a white background")
        c_hat = toy.text_encoder.encode("a blue circle on a white background")
        traj = record_source(invert(toy.codec.encode(image), c, toy.model, toy.sched), c, toy.model, toy.sched)
        t = toy.sched.descending()[10]
        entry = traj.entry(t)
        cfg = GuidanceConfig(lambda_c=1.0, lambda_e=1.0, patch_seed=rng.derive_seed(0, "patch"))
        x = entry.latent + 0.05 * torch.randn(entry.latent.shape, generator=torch.Generator().manual_seed(2))
        grad32, _, _ = loss_gradient(toy.model, x, t, c_hat, entry, cfg)

        m64 = copy.deepcopy(toy.model).double()
        to64 = lambda e: TextEmbedding.from_tokens(e.tokens.double())  # noqa: E731
        e64 = SourceEntry(entry.latent.double(), AttentionMapSet({k: v.double() for k, v in entry.attention.maps.items()}), to64(c))
        silent = GuidanceConfig(**{**cfg.to_dict(), "lambda_c": 0.0, "lambda_e": 0.0})

        def objective(z):
            _, l_c, l_e = loss_gradient(m64, z, t, to64(c_hat), e64, silent)
            return cfg.lambda_c * l_c + cfg.lambda_e * l_e

        x64 = x.double()
        coords = np.random.default_rng(0).choice(x.numel(), 20, replace=False)
        h = 1e-4
        errors = []
        for i in coords:
            e = torch.zeros(x.numel(), dtype=torch.float64)
            e[i] = h
            e = e.view_as(x64)
            fd = (objective(x64 + e) - objective(x64 - e)) / (2 * h)
            errors.append(abs(float(grad32.view(-1)[i]) - fd) / max(abs(fd), 1e-8))
        rec.ok = max(errors) <= 1e-2
        rec.detail = f"max relative error {max(errors):.1e} over {len(coords)} coordinates"
    assert rec.passed, rec.line()


def test_04_info_nce(criterion):
    with criterion(4, "InfoNCE anchors and monotonicity", 1.0) as rec:
        q = torch.tensor([1.0, 0.0], dtype=torch.float64)
        anchors = {}
        for k in (1, 2, 7):
            v = torch.tensor([0.3, 0.8], dtype=torch.float64)
            anchors[k] = abs(float(info_nce(q, v, v.repeat(k, 1), 0.07)) - math.log(k + 1))
        g = np.random.default_rng(0)
        violations = 0
        for _ in range(1000):
            query = torch.as_tensor(g.standard_normal(8))
            query = query / query.norm()
            negs = torch.as_tensor(g.standard_normal((int(g.integers(1, 8)), 8)))
            lo, hi = np.sort(g.uniform(-1, 1, 2))
            if hi - lo < 1e-6:
                continue
            tau = float(g.uniform(0.05, 1.0))
            l_lo = float(info_nce(query, lo * query, negs, tau))
            l_hi = float(info_nce(query, hi * query, negs, tau))
            violations += not l_hi < l_lo
        worst = max(anchors.values())
        rec.ok = worst <= 1e-6 and violations == 0
        rec.detail = f"anchor error {worst:.1e}, {violations} monotonicity violations in 1000 draws"
    assert rec.passed, rec.line()


def test_05_edit_direction(criterion, toy):
    encoder = toy.text_encoder
    with criterion(5, "edit-direction telescoping and linearity", 10.0) as rec:
        g = np.random.default_rng(0)
        labels = all_labels()
        tele = 0.0
        for _ in range(20):
            p, q = (labels[i].caption() for i in g.integers(0, len(labels), 2))
            n = int(g.integers(1, 17))
            shifted = apply_direction(encoder.encode(p), edit_direction(SentenceBank([p] * n, [q] * n), encoder))
            tele = max(tele, float((shifted.tokens - encoder.encode(q).tokens).abs().max()))
        lin = 0.0
        for _ in range(20):
            n = int(g.integers(1, 13))
            src = [labels[i].caption() for i in g.integers(0, len(labels), n)]
            tgt = [labels[i].caption() for i in g.integers(0, len(labels), n)]
            singles = torch.stack([edit_direction(SentenceBank([s], [t]), encoder).delta for s, t in zip(src, tgt)])
            lin = max(lin, float((edit_direction(SentenceBank(src, tgt), encoder).delta - singles.mean(0)).abs().max()))
        rec.ok = tele <= 1e-6 and lin <= 1e-6
        rec.detail = f"telescoping {tele:.1e}, linearity {lin:.1e}"
    assert rec.passed, rec.line()


def test_06_degeneracy(criterion, toy):
    with criterion(6, "degenerate edit equals reconstruction", 60.0) as rec:
        assert toy.sched.num_substeps == 50
        c = toy.text_encoder.encode("a red circle on a white background")
        x_T = invert(toy.codec.encode(_render_case()), c, toy.model, toy.sched)
        traj = record_source(x_T, c, toy.model, toy.sched)
        cfg = GuidanceConfig(lambda_c=0.0, lambda_e=0.0)
        out = edit(traj, c, EditDirection.zeros(tuple(c.tokens.shape)), toy.model, toy.sched, cfg).latent
        ref = reconstruct(x_T, c, toy.model, toy.sched)
        rec.ok = torch.equal(out, ref)
        rec.detail = "bit-identical" if rec.ok else f"max difference {float((out - ref).abs().max()):.1e}"
    assert rec.passed, rec.line()


def test_07_round_trip(criterion, toy, round_trip_pin):
    with criterion(7, "round-trip fidelity", 300.0) as rec:
        c = toy.text_encoder.encode("a red circle on a white background")
        x0 = toy.codec.encode(_render_case())

        def err(substeps):
            s = toy.sched.with_substeps(substeps)
            back = reconstruct(invert(x0, c, toy.model, s), c, toy.model, s)
            return float((back - x0).norm() / x0.norm())

        pinned = err(50)
        curve = [err(n) for n in (10, 20, 40)]
        monotone = all(b <= a for a, b in zip(curve, curve[1:]))
        rec.ok = pinned <= round_trip_pin and monotone
        rec.detail = f"50 substeps {pinned:.4f} (bound {round_trip_pin:.4f}); 10/20/40: " + "/".join(f"{e:.3f}" for e in curve)
    assert rec.passed, rec.line()


def _paired(rows, variant_a, variant_b):
    by = {(r.variant, r.task, r.seed): r.bg_distance for r in rows if not r.error}
    keys = {(r.task, r.seed) for r in rows}
    return [(by[(variant_a, *k)], by[(variant_b, *k)]) for k in sorted(keys) if (variant_a, *k) in by and (variant_b, *k) in by]


def test_08_ablation_trend(criterion, toy):
    with criterion(8, "CUT loss keeps background closer", 1800.0) as rec:
        spec = ExperimentSpec(variants=(Variant("full"), Variant("no_cut", (("lambda_e", 0.0),))), seeds=ACCEPT_SEEDS)
        rows, _ = run_experiment(spec, toy)
        pairs = _paired(rows, "full", "no_cut")
        wins = sum(a <= b for a, b in pairs)
        expected = len(spec.tasks) * len(spec.seeds)
        rec.ok = len(pairs) == expected and wins >= 0.7 * expected
        rec.detail = f"bg(full) <= bg(no CUT) on {wins}/{len(pairs)} pairs (need 70% of {expected})"
    assert rec.passed, rec.line()


def test_09_learning_rate_trend(criterion, toy):
    """Per (task, seed) Spearman correlation between the step size and bg distance, averaged."""
    base = GuidanceConfig().lambda_lr
    variants = lr_sweep_variants(base)
    with criterion(9, "bg distance grows with step size", 1800.0) as rec:
        spec = ExperimentSpec(variants=variants, seeds=SWEEP_SEEDS)
        rows, _ = run_experiment(spec, toy)
        by = {(r.variant, r.task, r.seed): r.bg_distance for r in rows if not r.error}
        lrs = [dict(v.overrides)["lambda_lr"] for v in variants]
        rhos = []
        for task in spec.tasks:
            for seed in spec.seeds:
                bg = [by.get((v.name, task.name, seed), math.nan) for v in variants]
                if all(math.isfinite(b) for b in bg):
                    rho = spearmanr(lrs, bg)[0]
                    rhos.append(0.0 if math.isnan(rho) else rho)
        mean_rho = float(np.mean(rhos)) if rhos else math.nan
        means = [np.nanmean([by.get((v.name, t.name, s), math.nan) for t in spec.tasks for s in spec.seeds]) for v in variants]
        rec.ok = len(rhos) == len(spec.tasks) * len(spec.seeds) and mean_rho > 0
        rec.detail = f"mean rho {mean_rho:+.3f} over {len(rhos)} series; mean bg " + " ".join(f"{m:.4f}" for m in means)
    assert rec.passed, rec.line()


def test_10_direction_similarity(criterion, toy):
    with criterion(10, "shifted prompt closer to the edited image", 120.0) as rec:
        g = np.random.default_rng(7)
        labels = all_labels()
        pool = {"color": ["red", "green", "blue", "yellow", "purple", "orange"], "shape": ["circle", "square", "triangle"]}
        gen = ToySentenceGenerator()
        wins = 0
        for _ in range(50):
            label = labels[g.integers(len(labels))]
            attr = str(g.choice(list(pool)))
            new = str(g.choice([v for v in pool[attr] if v != getattr(label, attr)]))
            target = label.replace(**{attr: new})
            bank = generate_bank(label.caption(), target.caption(), 16, gen)
            delta = edit_direction(bank, toy.text_encoder)
            image = render(target, (16 + g.uniform(-3, 3), 16 + g.uniform(-3, 3)))[0]
            r = direction_similarity_report(image, label.caption(), target.caption(), delta, toy.joint)
            wins += r["sim_text1_image"] >= r["sim_source_image"]
        rec.ok = wins >= 40
        rec.detail = f"{wins}/50 prompts (need 40)"
    assert rec.passed, rec.line()


def test_11_cli_determinism(criterion, toy_dir, tmp_path, capsys):
    with criterion(11, "edit command is byte-for-byte reproducible", 120.0) as rec:
        image = tmp_path / "red.png"
        save_png(image, _render_case())
        digests = []
        for run in ("a", "b"):
            out = tmp_path / run
            code = main(["edit", "--image", str(image), "--edit-from", "red", "--edit-to", "blue", "--seed", "17",
                         "--checkpoint", str(toy_dir), "--out", str(out)])  # fmt: skip
            assert code == 0
            digests.append({n: hashlib.sha256((out / n).read_bytes()).hexdigest() for n in ("edited.png", "losses.csv", "manifest.json")})
        same = [n for n in digests[0] if digests[0][n] == digests[1][n]]
        rec.ok = len(same) == 3 and load_png(tmp_path / "a" / "edited.png").shape == (32, 32, 3)
        rec.detail = f"identical: {', '.join(same) or 'none'}"
    assert rec.passed, rec.line()


def test_12_training_budget(criterion):
    with criterion(12, "toy training reaches held-out loss <= 0.7", 60.0) as rec:
        summary = train_summary()
        loss, seconds = summary["heldout_loss"], summary["train_seconds"]
        rec.ok = loss <= 0.7 and seconds <= CPU_TRAIN_BUDGET_SECONDS
        rec.detail = f"held-out loss {loss:.4f} (baseline {summary['baseline_loss']:.4f}) after {seconds:.0f}s of {CPU_TRAIN_BUDGET_SECONDS}s"
    assert rec.passed, rec.line()

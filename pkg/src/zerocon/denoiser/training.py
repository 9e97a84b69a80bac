"""Training the toy denoiser on the epsilon-prediction objective."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from zerocon import rng
from zerocon.data import CaptionedImageSet, grammar_words
from zerocon.denoiser.codec import IdentityCodec
from zerocon.denoiser.unet import DEFAULT_TAPS, ToyDenoiser, UNetConfig
from zerocon.formats import read_checkpoint, write_checkpoint
from zerocon.schedule import NoiseSchedule

log = logging.getLogger(__name__)

TEMPLATE_WORDS = ("in", "an", "photo", "painting", "cropped", "picture", "rendering", "close", "up", "drawing", "image", "simple")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    heldout: int = 256
    heldout_draws: int = 2
    widths: tuple[int, int] = (32, 64)
    text_len: int = 16
    text_dim: int = 16
    tap_layers: tuple[str, ...] = DEFAULT_TAPS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["tap_layers"] = list(self.tap_layers)
        return d


@dataclass
class TrainResult:
    model: ToyDenoiser
    losses: list[float] = field(default_factory=list)
    heldout_loss: float = float("nan")
    baseline_loss: float = float("nan")
    seconds: float = 0.0


def toy_vocab() -> list[str]:
    return sorted(set(grammar_words()) | set(TEMPLATE_WORDS))


def build_toy_model(sched: NoiseSchedule, config: TrainConfig, image_size: int = 32) -> ToyDenoiser:
    cfg = UNetConfig(
        image_size=image_size,
        widths=tuple(config.widths),
        text_len=config.text_len,
        text_dim=config.text_dim,
        num_timesteps=sched.T,
        tap_layers=tuple(config.tap_layers),
        vocab=toy_vocab(),
    )
    torch.manual_seed(rng.derive_seed(config.seed, "init"))
    return ToyDenoiser(cfg)


def _split(dataset: CaptionedImageSet, heldout: int):
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if heldout >= len(dataset):
        raise ValueError(f"held-out size {heldout} must be smaller than the dataset ({len(dataset)})")
    codec = IdentityCodec(dataset[0].image.shape[0])
    x = torch.stack([codec.encode(it.image) for it in dataset])
    caps = dataset.captions()
    n_train = len(dataset) - heldout
    return (x[:n_train], caps[:n_train]), (x[n_train:], caps[n_train:])


def _alpha_bar_table(sched: NoiseSchedule) -> torch.Tensor:
    return torch.tensor(np.concatenate([[1.0], sched.alpha_bars]), dtype=torch.float32)


def epsilon_loss(model: ToyDenoiser, x0, ids, t, noise, ab_table) -> torch.Tensor:
    ab = ab_table[t][:, None, None, None]
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
    tokens = model.text_encoder.embed_ids(ids)
    eps = model(x_t, t, tokens, tokens.mean(dim=1))
    return (eps - noise).pow(2).mean()


@torch.no_grad()
def heldout_loss(model: ToyDenoiser, x0, captions, sched: NoiseSchedule, seed: int, draws: int = 2):
    """Epsilon MSE on held-out images with fixed (t, noise) draws, plus the all-zeros baseline."""
    ab = _alpha_bar_table(sched)
    ids = model.text_encoder.token_ids(captions)
    total = base = 0.0
    for d in range(draws):
        g = rng.torch_generator(seed, "heldout", d)
        t = torch.randint(1, sched.T + 1, (len(x0),), generator=g)
        noise = torch.randn(x0.shape, generator=g)
        for s in range(0, len(x0), 64):
            sl = slice(s, s + 64)
            total += epsilon_loss(model, x0[sl], ids[sl], t[sl], noise[sl], ab).item() * len(x0[sl])
            base += noise[sl].pow(2).mean().item() * len(x0[sl])
    n = draws * len(x0)
    return total / n, base / n


def train_toy(dataset: CaptionedImageSet, sched: NoiseSchedule, config: TrainConfig | None = None) -> TrainResult:
    """Fit the toy denoiser and its caption embedding table.

    The last ``config.heldout`` items are held out. Fully reproducible for a
    fixed ``config.seed`` on a given machine.
    """
    config = config or TrainConfig()
    (x_tr, cap_tr), (x_ho, cap_ho) = _split(dataset, config.heldout)
    model = build_toy_model(sched, config, image_size=x_tr.shape[-1])
    ids_tr = model.text_encoder.token_ids(cap_tr)
    ab = _alpha_bar_table(sched)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    def lr_at(step):
        if step < config.warmup:
            return (step + 1) / config.warmup
        progress = (step - config.warmup) / max(1, config.steps - config.warmup)
        return 0.5 * (1 + math.cos(math.pi * progress))

    sched_lr = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    g = rng.torch_generator(config.seed, "train")
    losses = []
    start = time.perf_counter()
    model.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(x_tr), (config.batch_size,), generator=g)
        t = torch.randint(1, sched.T + 1, (config.batch_size,), generator=g)
        noise = torch.randn((config.batch_size,) + tuple(x_tr.shape[1:]), generator=g)
        loss = epsilon_loss(model, x_tr[idx], ids_tr[idx], t, noise, ab)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss.item()} at step {step} (lr={sched_lr.get_last_lr()[0]:.3g})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        sched_lr.step()
        losses.append(loss.item())
        if step % 250 == 0:
            log.info("step %d loss %.4f", step, losses[-1])
    model.eval()
    seconds = time.perf_counter() - start
    ho, base = heldout_loss(model, x_ho, cap_ho, sched, config.seed, config.heldout_draws)
    return TrainResult(model=model, losses=losses, heldout_loss=ho, baseline_loss=base, seconds=seconds)


def save_denoiser(path, model: ToyDenoiser, extra_meta: dict | None = None) -> None:
    meta = {"kind": "toy_denoiser", "unet": model.cfg.to_dict()}
    meta.update(extra_meta or {})
    write_checkpoint(path, model.state_dict(), meta)


def load_denoiser(path) -> tuple[ToyDenoiser, dict]:
    state, meta = read_checkpoint(path)
    if meta.get("kind") != "toy_denoiser":
        raise ValueError(f"{path}: not a toy denoiser checkpoint")
    model = ToyDenoiser(UNetConfig.from_dict(meta["unet"]))
    model.load_state_dict(state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, meta

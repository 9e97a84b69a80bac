"""``zerocon`` command line.

Configuration precedence, lowest to highest: built-in defaults, the
``--config`` file (``key = value`` lines, ``#`` comments), then command-line
flags. Every config key has a matching flag (``lambda_c`` -> ``--lambda-c``,
``schedule.substeps`` -> ``--schedule-substeps``).

All run randomness derives from ``--seed`` through
:func:`zerocon.rng.derive_seed` (seed, purpose tag, step counter).

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from zerocon import __version__, rng
from zerocon.backends import BackendConfig, BackendError, HTTPCaptionProvider, HTTPSentenceGenerator
from zerocon.data import CaptionedImageSet, load_png, save_png
from zerocon.denoiser.training import TrainConfig
from zerocon.eval import (
    DEFAULT_TASKS,
    STANDARD_VARIANTS,
    ExperimentSpec,
    lr_sweep_variants,
    render_table,
    rows_from_csv,
    rows_to_csv,
    run_experiment,
    summarize,
    summary_to_csv,
)
from zerocon.formats import FormatError, format_config, parse_config_text, read_config, read_tensor, write_tensor
from zerocon.guidance import GuidanceConfig, write_loss_csv
from zerocon.pipeline import edit, invert, reconstruct, record_source
from zerocon.textdir import (
    BankError,
    CaptionError,
    EditDirection,
    EditSpec,
    EditSpecError,
    SentenceBank,
    ToyCaptionProvider,
    ToySentenceGenerator,
    build_target_prompt,
    caption,
    edit_direction,
    generate_bank,
)
from zerocon.toy import ToySetup, load_context, load_or_train, train_setup

MANIFEST_NAME = "manifest.json"
CONFIG_SNAPSHOT = "config.txt"


class CLIError(Exception):
    def __init__(self, stage: str, cause: str, code: int = 1):
        super().__init__(f"[{stage}] {cause}")
        self.stage, self.cause, self.code = stage, cause, code


# --- configuration ---------------------------------------------------------------------------


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _strs(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in _strs(text))


_TYPE_NAMES = {int: "int", float: "float", str: "str", _bool: "bool", _strs: "list[str]", _ints: "list[int]"}


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.name.replace(".", "-").replace("_", "-")

    @property
    def type_name(self) -> str:
        return _TYPE_NAMES[self.parse]


_g = GuidanceConfig()
_t = TrainConfig()
_s = ToySetup()

KEYS = (
    Key("checkpoint", str, "", "directory with denoiser.zckp and joint.zckp (empty: toy cache, trained on demand)"),
    Key("schedule.kind", str, _s.schedule_kind, "beta schedule: linear or scaled_linear"),
    Key("schedule.T", int, _s.T, "number of diffusion timesteps"),
    Key("schedule.beta_start", float, _s.beta_start, "first beta"),
    Key("schedule.beta_end", float, _s.beta_end, "last beta"),
    Key("schedule.substeps", int, _s.substeps, "sampling / inversion substeps"),
    Key("lambda_c", float, _g.lambda_c, "cross-attention loss weight"),
    Key("lambda_e", float, _g.lambda_e, "patch contrastive loss weight"),
    Key("lambda_lr", float, _g.lambda_lr, "latent gradient step size"),
    Key("tau", float, _g.tau, "InfoNCE temperature"),
    Key("patches_per_layer", int, _g.patches_per_layer, "patches sampled per tap layer"),
    Key("tap_layers", _strs, _g.tap_layers, "denoiser layers used for patch features"),
    Key("normalize_patches", _bool, _g.normalize_patches, "L2-normalise feature patches"),
    Key("source_features_cond", str, _g.source_features_cond, "conditioning for source features: source or target"),
    Key("step_from_updated", _bool, _g.step_from_updated, "sampler step from the guidance-moved latent (false: only the noise prediction sees the move)"),
    Key("record_mode", str, "denoise", "source latents from re-denoising (denoise) or the inversion path (inversion)"),
    Key("bank_size", int, 16, "sentence pairs per edit direction"),
    Key("caption_backend", str, "toy", "toy or http"),
    Key("sentence_backend", str, "toy", "toy or http"),
    Key("backend.endpoint", str, "", "HTTP endpoint for external adapters"),
    Key("backend.token_env", str, "ZEROCON_BACKEND_TOKEN", "environment variable holding the adapter token"),
    Key("backend.timeout", float, 30.0, "adapter request timeout in seconds"),
    Key("dataset", str, "", "captioned image directory for train-toy (empty: generate the toy dataset)"),
    Key("dataset.size", int, _s.dataset_size, "generated toy dataset size"),
    Key("dataset.jitter", float, _s.jitter, "shape centre jitter in pixels"),
    Key("train.steps", int, _s.train.steps, "denoiser training steps"),
    Key("train.batch_size", int, _t.batch_size, "training batch size"),
    Key("train.lr", float, _t.lr, "peak learning rate"),
    Key("train.warmup", int, _t.warmup, "linear warmup steps"),
    Key("train.weight_decay", float, _t.weight_decay, "AdamW weight decay"),
    Key("train.grad_clip", float, _t.grad_clip, "gradient norm clip"),
    Key("train.heldout", int, _t.heldout, "held-out images for the final loss"),
    Key("joint.steps", int, _s.joint_steps, "joint image head training steps"),
    Key("eval.tasks", _strs, tuple(t.name for t in DEFAULT_TASKS), "toy tasks"),
    Key("eval.variants", _strs, tuple(v.name for v in STANDARD_VARIANTS), "variants (also lr_x<factor>)"),
    Key("eval.seeds", _ints, (0, 1, 2, 3, 4), "seeds (one source image each)"),
)
KEY_INDEX = {k.name: k for k in KEYS}
del _g, _t, _s


def keys_help() -> str:
    lines = ["config keys (key = value in --config; flag overrides):"]
    for k in KEYS:
        default = format_config({"x": k.default})[4:].strip()
        lines.append(f"  {k.name:<22} {k.type_name:<9} default: {default or '(empty)'}  {k.help}")
    return "\n".join(lines)


def resolve_config(file_values: dict[str, str], flag_values: dict[str, str]) -> dict:
    unknown = sorted(set(file_values) - set(KEY_INDEX))
    if unknown:
        raise CLIError("config", f"unknown config keys: {', '.join(unknown)}", 2)
    out = {k.name: k.default for k in KEYS}
    for source in (file_values, flag_values):
        for name, text in source.items():
            try:
                out[name] = KEY_INDEX[name].parse(text)
            except ValueError as exc:
                raise CLIError("config", f"bad value for {name}: {exc}", 2) from None
    return out


def guidance_config(cfg: dict, seed: int) -> GuidanceConfig:
    try:
        return GuidanceConfig(
            lambda_c=cfg["lambda_c"],
            lambda_e=cfg["lambda_e"],
            lambda_lr=cfg["lambda_lr"],
            tau=cfg["tau"],
            patches_per_layer=cfg["patches_per_layer"],
            tap_layers=cfg["tap_layers"],
            patch_seed=rng.derive_seed(seed, "patch"),
            normalize_patches=cfg["normalize_patches"],
            source_features_cond=cfg["source_features_cond"],
            step_from_updated=cfg["step_from_updated"],
        )
    except ValueError as exc:
        raise CLIError("config", str(exc), 2) from None


def toy_setup(cfg: dict, seed: int) -> ToySetup:
    train = TrainConfig(
        steps=cfg["train.steps"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        warmup=cfg["train.warmup"],
        weight_decay=cfg["train.weight_decay"],
        grad_clip=cfg["train.grad_clip"],
        seed=seed,
        heldout=cfg["train.heldout"],
    )
    return ToySetup(
        dataset_size=cfg["dataset.size"],
        dataset_seed=seed,
        jitter=cfg["dataset.jitter"],
        schedule_kind=cfg["schedule.kind"],
        T=cfg["schedule.T"],
        beta_start=cfg["schedule.beta_start"],
        beta_end=cfg["schedule.beta_end"],
        substeps=cfg["schedule.substeps"],
        train=train,
        joint_steps=cfg["joint.steps"],
    )


# --- run manifest ----------------------------------------------------------------------------


@dataclass
class RunManifest:
    """What a command did: enough to re-run it. Output paths are relative to the output directory."""

    command: str
    config: dict[str, str]
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    guidance: dict = field(default_factory=dict)
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def save(self, out_dir: Path) -> None:
        (out_dir / MANIFEST_NAME).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def config_snapshot(cfg: dict) -> dict[str, str]:
    return parse_config_text(format_config(cfg))


class Run:
    """Per-command state: resolved config, output directory, manifest and wall-clock timing."""

    def __init__(self, args, cfg: dict):
        self.args = args
        self.cfg = cfg
        self.seed = args.seed
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(args.command, config_snapshot(cfg), args.seed)
        self.start = time.perf_counter()
        self._ctx = None

    def input(self, name: str, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise CLIError("input", f"{name} not found: {p}", 2)
        self.manifest.inputs[name] = str(path)
        return p

    def output(self, name: str, filename: str) -> Path:
        self.manifest.outputs[name] = filename
        return self.out / filename

    def context(self):
        if self._ctx is None:
            substeps = self.cfg["schedule.substeps"]
            try:
                if self.cfg["checkpoint"]:
                    d = self.input("checkpoint", self.cfg["checkpoint"])
                    self._ctx = load_context(d, substeps)
                else:
                    self._ctx = load_or_train(ToySetup(), substeps)
            except (OSError, FormatError, KeyError, ValueError) as exc:
                raise CLIError("checkpoint", str(exc), 1) from exc
            self.manifest.schedule = self._ctx.sched.params()
        return self._ctx

    def backend(self) -> BackendConfig:
        if not self.cfg["backend.endpoint"]:
            raise CLIError("config", "backend.endpoint is required for http backends", 2)
        return BackendConfig(self.cfg["backend.endpoint"], self.cfg["backend.token_env"], self.cfg["backend.timeout"])

    def captioner(self):
        kind = self.cfg["caption_backend"]
        if kind == "toy":
            return ToyCaptionProvider()
        if kind == "http":
            return HTTPCaptionProvider(self.backend())
        raise CLIError("config", f"caption_backend must be toy or http, got {kind!r}", 2)

    def generator(self):
        kind = self.cfg["sentence_backend"]
        if kind == "toy":
            return ToySentenceGenerator()
        if kind == "http":
            return HTTPSentenceGenerator(self.backend())
        raise CLIError("config", f"sentence_backend must be toy or http, got {kind!r}", 2)

    def finish(self) -> None:
        (self.out / CONFIG_SNAPSHOT).write_text(format_config(self.manifest.config), encoding="utf-8")
        self.manifest.save(self.out)
        timing = {"seconds": round(time.perf_counter() - self.start, 3)}
        (self.out / "timing.json").write_text(json.dumps(timing) + "\n", encoding="utf-8")


def _stage(name: str, fn, *args, **kw):
    """Run one pipeline stage, wrapping failures in the uniform error envelope."""
    try:
        return fn(*args, **kw)
    except CLIError:
        raise
    except (EditSpecError, BankError) as exc:
        raise CLIError(name, str(exc), 2) from exc
    except (CaptionError, BackendError) as exc:
        diag = getattr(exc, "diagnostics", {})
        raise CLIError(name, f"{exc} {json.dumps(diag, sort_keys=True)}" if diag else str(exc), 1) from exc
    except Exception as exc:
        raise CLIError(name, f"{type(exc).__name__}: {exc}", 1) from exc


def _read_image(run: Run, path) -> np.ndarray:
    p = run.input("image", path)
    return _stage("read-image", load_png, p)


def _caption(run: Run, image: np.ndarray) -> str:
    return str(_stage("caption", caption, image, run.captioner()))


# --- commands --------------------------------------------------------------------------------


def cmd_train_toy(run: Run) -> None:
    setup = toy_setup(run.cfg, run.seed)
    ds = None
    if run.cfg["dataset"]:
        path = run.input("dataset", run.cfg["dataset"])
        ds = _stage("dataset", CaptionedImageSet.load, path)
    summary = _stage("train", train_setup, setup, run.out, ds)
    run.output("denoiser", "denoiser.zckp")
    run.output("joint", "joint.zckp")
    run.output("summary", "train.json")
    run.manifest.schedule = setup.schedule().params()
    print(f"held-out loss {summary['heldout_loss']:.4f} (zero predictor {summary['baseline_loss']:.4f})")


def cmd_caption(run: Run) -> None:
    text = _caption(run, _read_image(run, run.args.image))
    run.output("caption", "caption.txt").write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_direction(run: Run) -> None:
    ctx = run.context()
    a = run.args
    if a.bank:
        bank = _stage("bank", SentenceBank.load, run.input("bank", a.bank))
    else:
        if not (a.source and a.target):
            raise CLIError("usage", "give --bank, or both --source and --target", 2)
        bank = _stage("bank", generate_bank, a.source, a.target, run.cfg["bank_size"], run.generator())
    delta = _stage("direction", edit_direction, bank, ctx.text_encoder)
    bank.save(run.output("bank", "bank.tsv"))
    write_tensor(run.output("delta", "delta.zct"), delta.delta)
    print(f"|delta| = {float(delta.delta.norm()):.6f} over {len(bank)} pairs")


def _prompt(run: Run, image: np.ndarray) -> str:
    return run.args.prompt if run.args.prompt else _caption(run, image)


def cmd_invert(run: Run) -> None:
    ctx = run.context()
    image = _read_image(run, run.args.image)
    prompt = _prompt(run, image)
    c = ctx.text_encoder.encode(prompt)
    x_T = _stage("invert", invert, ctx.codec.encode(image), c, ctx.model, ctx.sched)
    write_tensor(run.output("x_T", "x_T.zct"), x_T)
    run.output("prompt", "prompt.txt").write_text(prompt + "\n", encoding="utf-8")


def cmd_reconstruct(run: Run) -> None:
    ctx = run.context()
    x_T = _stage("read-latent", read_tensor, run.input("latent", run.args.latent))
    prompt = run.args.prompt
    if not prompt:
        raise CLIError("usage", "--prompt is required", 2)
    c = ctx.text_encoder.encode(prompt)
    x0 = _stage("reconstruct", reconstruct, x_T, c, ctx.model, ctx.sched)
    write_tensor(run.output("x0", "x0.zct"), x0)
    save_png(run.output("image", "reconstruction.png"), ctx.codec.decode(x0))


def cmd_edit(run: Run) -> None:
    ctx = run.context()
    a = run.args
    if a.edit_from is None or a.edit_to is None:
        raise CLIError("usage", "--edit-from and --edit-to are required", 2)
    image = _read_image(run, a.image)
    source = _caption(run, image)
    try:
        target = str(build_target_prompt(source, EditSpec(a.edit_from, a.edit_to)))
    except EditSpecError as exc:
        raise CLIError("target-prompt", f"{exc}; caption was {source!r}", 2) from exc
    c = ctx.text_encoder.encode(source)
    if a.zero_delta:
        delta = EditDirection.zeros(tuple(c.tokens.shape))
    else:
        bank = _stage("bank", generate_bank, source, target, run.cfg["bank_size"], run.generator())
        delta = _stage("direction", edit_direction, bank, ctx.text_encoder)
        bank.save(run.output("bank", "bank.tsv"))
    gcfg = guidance_config(run.cfg, run.seed)
    run.manifest.guidance = gcfg.to_dict()
    x_T, path = _stage("invert", invert, ctx.codec.encode(image), c, ctx.model, ctx.sched, return_path=True)
    mode = run.cfg["record_mode"]
    traj = _stage("record-source", record_source, x_T, c, ctx.model, ctx.sched, mode, path if mode == "inversion" else None)
    result = _stage("edit", edit, traj, c, delta, ctx.model, ctx.sched, gcfg, ctx.codec)
    save_png(run.output("image", "edited.png"), result.image)
    write_loss_csv(run.output("losses", "losses.csv"), result.records)
    write_tensor(run.output("delta", "delta.zct"), delta.delta)
    prompts = {"source": source, "target": target}
    run.output("prompts", "prompts.json").write_text(json.dumps(prompts, indent=2) + "\n", encoding="utf-8")
    print(f"{source!r} -> {target!r}")


def _variants(names, base_lr: float):
    by_name = {v.name: v for v in STANDARD_VARIANTS}
    out = []
    for name in names:
        if name in by_name:
            out.append(by_name[name])
        elif name.startswith("lr_x"):
            out.extend(lr_sweep_variants(base_lr, (float(name[4:]),)))
        else:
            raise CLIError("config", f"unknown variant {name!r}", 2)
    return tuple(out)


def cmd_eval(run: Run) -> None:
    ctx = run.context()
    tasks = {t.name: t for t in DEFAULT_TASKS}
    unknown = [t for t in run.cfg["eval.tasks"] if t not in tasks]
    if unknown:
        raise CLIError("config", f"unknown tasks: {', '.join(unknown)}", 2)
    gcfg = guidance_config(run.cfg, run.seed)
    spec = ExperimentSpec(
        tasks=tuple(tasks[t] for t in run.cfg["eval.tasks"]),
        variants=_variants(run.cfg["eval.variants"], gcfg.lambda_lr),
        seeds=tuple(run.cfg["eval.seeds"]),
        guidance=gcfg,
        bank_size=run.cfg["bank_size"],
        jitter=run.cfg["dataset.jitter"],
    )
    run.manifest.guidance = gcfg.to_dict()

    def progress(row):
        status = row.error or f"alignment {row.alignment:.4f} bg {row.bg_distance:.4f}"
        print(f"{row.variant:<12} {row.task:<14} seed {row.seed}: {status}", file=sys.stderr)

    rows, reports = _stage("eval", run_experiment, spec, ctx, progress)
    run.output("runs", "runs.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    run.output("summary", "summary.csv").write_text(summary_to_csv(reports), encoding="utf-8")
    table = render_table(reports)
    run.output("table", "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")


def cmd_report(run: Run) -> None:
    path = run.input("runs", run.args.runs)
    rows = _stage("report", rows_from_csv, path.read_text(encoding="utf-8"))
    reports = summarize(rows, config_hash=run.args.config_hash or "")
    run.output("summary", "summary.csv").write_text(summary_to_csv(reports), encoding="utf-8")
    table = render_table(reports)
    run.output("table", "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")


COMMANDS = {
    "train-toy": (cmd_train_toy, "train the toy denoiser and joint encoder"),
    "caption": (cmd_caption, "caption an image"),
    "direction": (cmd_direction, "compute an edit direction from a sentence bank"),
    "invert": (cmd_invert, "DDIM-invert an image to noise"),
    "reconstruct": (cmd_reconstruct, "denoise a noise latent to an image"),
    "edit": (cmd_edit, "edit an image: caption, direction, invert, guided denoise"),
    "eval": (cmd_eval, "run the ablation sweep"),
    "report": (cmd_report, "summarise a per-run CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zerocon",
        description="Text-guided image editing with attention and patch-contrastive guidance.",
        epilog=keys_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"zerocon {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, epilog=keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
        p.add_argument("--out", default=".", help="output directory (default .)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        if name in ("caption", "invert", "edit"):
            p.add_argument("--image", required=True, help="8-bit RGB PNG")
        if name in ("invert", "reconstruct"):
            p.add_argument("--prompt", help="conditioning prompt (invert: default is the image caption)")
        if name == "reconstruct":
            p.add_argument("--latent", required=True, help="x_T in ZCT1 format")
        if name == "direction":
            p.add_argument("--bank", help="sentence bank file (S<TAB>..., T<TAB>... lines)")
            p.add_argument("--source", help="source prompt for a generated bank")
            p.add_argument("--target", help="target prompt for a generated bank")
        if name == "edit":
            p.add_argument("--edit-from", help="phrase in the caption to replace")
            p.add_argument("--edit-to", help="replacement phrase")
            p.add_argument("--zero-delta", action="store_true", help="use a zero edit direction")
        if name == "report":
            p.add_argument("--runs", required=True, help="per-run CSV from eval")
            p.add_argument("--config-hash", help="config hash to stamp on summary rows")
        for k in KEYS:  # listed in the epilog instead of one help line each
            p.add_argument(k.flag, dest=f"key:{k.name}", metavar=k.type_name.upper(), help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    flags = {name[4:]: v for name, v in vars(args).items() if name.startswith("key:") and v is not None}
    try:
        file_values = {}
        if args.config:
            if not Path(args.config).is_file():
                raise CLIError("config", f"config file not found: {args.config}", 2)
            try:
                file_values = read_config(args.config)
            except FormatError as exc:
                raise CLIError("config", str(exc), 2) from None
        run = Run(args, resolve_config(file_values, flags))
        if args.config:
            run.manifest.inputs["config"] = args.config
        COMMANDS[args.command][0](run)
        run.finish()
    except CLIError as exc:
        print(f"zerocon {args.command}: error in {exc.stage}: {exc.cause}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())

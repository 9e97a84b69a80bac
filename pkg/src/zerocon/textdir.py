"""Edit directions in text-embedding space.

The flow is: caption the source image, derive the target prompt from the
user's edit, expand both prompts into a paired sentence bank, and average the
per-pair embedding differences. Adding that average to the source embedding
gives the conditioning used for editing.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from zerocon.data import ShapeLabel, describe, image_key
from zerocon.denoiser.text import TextEmbedding

# Context goes after the prompt so every word keeps its token position; with a
# position-wise encoder this makes the token-level direction line up with the caption.
DEFAULT_TEMPLATES = (
    "{} in a photo",
    "{} in a painting",
    "{}, cropped picture",
    "{} in a rendering",
    "{}, close up photo",
    "{} in a drawing",
    "{} in an image",
    "{}, simple picture",
)


class CaptionError(RuntimeError):
    """Captioning failed; ``diagnostics`` carries provider details."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class EditSpecError(ValueError):
    pass


class BankError(ValueError):
    pass


@dataclass(frozen=True)
class Prompt:
    text: str

    def __post_init__(self):
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValueError("prompt must be a nonempty string")

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class EditSpec:
    from_phrase: str
    to_phrase: str


@dataclass
class SentenceBank:
    source_sentences: list[str]
    target_sentences: list[str]

    def __post_init__(self):
        self.source_sentences = [str(s) for s in self.source_sentences]
        self.target_sentences = [str(s) for s in self.target_sentences]
        if len(self.source_sentences) != len(self.target_sentences):
            raise BankError(
                f"unequal bank sizes: {len(self.source_sentences)} source vs {len(self.target_sentences)} target"
            )
        if not self.source_sentences:
            raise BankError("sentence bank is empty")
        for s in self.source_sentences + self.target_sentences:
            Prompt(s)

    def __len__(self) -> int:
        return len(self.source_sentences)

    def permuted(self, order) -> "SentenceBank":
        return SentenceBank([self.source_sentences[i] for i in order], [self.target_sentences[i] for i in order])

    def save(self, path: str | Path) -> None:
        lines = [f"S\t{s}\n" for s in self.source_sentences] + [f"T\t{s}\n" for s in self.target_sentences]
        for s in self.source_sentences + self.target_sentences:
            if "\t" in s or "\n" in s:
                raise BankError(f"sentence contains tab or newline: {s!r}")
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SentenceBank":
        src, tgt = [], []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            tag, _, sentence = line.partition("\t")
            if tag == "S":
                src.append(sentence)
            elif tag == "T":
                tgt.append(sentence)
            else:
                raise BankError(f"{path}:{lineno}: line must start with 'S<TAB>' or 'T<TAB>'")
        return cls(src, tgt)


@dataclass
class EditDirection:
    """Additive shift ``(L, d)`` for token embeddings. Stored in float64."""

    delta: torch.Tensor

    def __post_init__(self):
        self.delta = torch.as_tensor(self.delta, dtype=torch.float64)
        if self.delta.ndim != 2:
            raise ValueError(f"edit direction must be (L, d), got {tuple(self.delta.shape)}")
        if not torch.isfinite(self.delta).all():
            raise ValueError("edit direction has non-finite entries")

    @classmethod
    def zeros(cls, shape) -> "EditDirection":
        return cls(torch.zeros(tuple(shape), dtype=torch.float64))

    def __neg__(self) -> "EditDirection":
        return EditDirection(-self.delta)

    @property
    def shape(self):
        return tuple(self.delta.shape)


class CaptionProvider(Protocol):
    def caption(self, image: np.ndarray) -> str: ...


class SentenceGenerator(Protocol):
    def generate(self, source: str, target: str, n: int) -> tuple[list[str], list[str]]: ...


class TextEncoder(Protocol):
    def encode(self, text: str) -> TextEmbedding: ...


class ToyCaptionProvider:
    """Captions toy renders from the caption grammar.

    Registered images are looked up by content hash; anything else is parsed
    from its pixels with :func:`zerocon.data.describe`.
    """

    def __init__(self, labels: dict[str, ShapeLabel] | None = None):
        self.labels = dict(labels or {})

    def register(self, image: np.ndarray, label: ShapeLabel) -> None:
        self.labels[image_key(image)] = label

    @classmethod
    def from_dataset(cls, dataset) -> "ToyCaptionProvider":
        provider = cls()
        for item in dataset:
            if item.label is not None:
                provider.register(item.image, item.label)
        return provider

    def caption(self, image: np.ndarray) -> str:
        key = image_key(image)
        label = self.labels.get(key) or describe(image)
        if label is None:
            raise CaptionError("caption unavailable", {"provider": "toy", "image_key": key})
        return label.caption()


class ToySentenceGenerator:
    """Wraps prompts in fixed context templates; same template order on both sides.

    When ``n`` exceeds the template count the templates cycle, and pass ``k``
    (0-based) appends the suffix ``" (k+1)"`` so sentences stay distinct.
    """

    def __init__(self, templates=DEFAULT_TEMPLATES):
        if not templates:
            raise ValueError("need at least one template")
        self.templates = tuple(templates)

    def sentence(self, prompt: str, i: int) -> str:
        k, j = divmod(i, len(self.templates))
        text = self.templates[j].format(prompt)
        return text if k == 0 else f"{text} ({k + 1})"

    def generate(self, source: str, target: str, n: int) -> tuple[list[str], list[str]]:
        return [self.sentence(source, i) for i in range(n)], [self.sentence(target, i) for i in range(n)]


def caption(image: np.ndarray, provider: CaptionProvider) -> Prompt:
    try:
        text = provider.caption(image)
    except CaptionError:
        raise
    except Exception as exc:  # adapter failures surface uniformly
        raise CaptionError(f"caption provider failed: {exc}", {"provider": type(provider).__name__}) from exc
    return Prompt(text)


def build_target_prompt(source: Prompt | str, edit: EditSpec) -> Prompt:
    """Replace the first occurrence of ``edit.from_phrase``; an empty phrase appends."""
    text = str(source)
    if not edit.from_phrase:
        return Prompt(f"{text} {edit.to_phrase}")
    pos = text.find(edit.from_phrase)
    if pos < 0:
        raise EditSpecError(f"{edit.from_phrase!r} does not occur in source prompt {text!r}")
    return Prompt(text[:pos] + edit.to_phrase + text[pos + len(edit.from_phrase) :])


def generate_bank(source: Prompt | str, target: Prompt | str, n: int, generator: SentenceGenerator) -> SentenceBank:
    if n < 1:
        raise ValueError(f"bank size must be >= 1, got {n}")
    src, tgt = generator.generate(str(source), str(target), n)
    if len(src) < n or len(tgt) < n:
        raise BankError(f"generator returned {len(src)} source / {len(tgt)} target sentences, need {n}")
    return SentenceBank(list(src[:n]), list(tgt[:n]))


def edit_direction(bank: SentenceBank, encoder: TextEncoder) -> EditDirection:
    """Mean over pairs of ``enc(target_i) - enc(source_i)``, elementwise on token arrays."""
    src = [encoder.encode(s).tokens.to(torch.float64) for s in bank.source_sentences]
    tgt = [encoder.encode(s).tokens.to(torch.float64) for s in bank.target_sentences]
    shapes = {tuple(e.shape) for e in src + tgt}
    if len(shapes) != 1:
        raise ValueError(f"encoder returned inconsistent embedding shapes {sorted(shapes)}")
    n = len(bank)
    return EditDirection((torch.stack(tgt).sum(0) - torch.stack(src).sum(0)) / n)


def apply_direction(c: TextEmbedding, d: EditDirection) -> TextEmbedding:
    if tuple(c.tokens.shape) != d.shape:
        raise ValueError(f"embedding {tuple(c.tokens.shape)} and direction {d.shape} shapes differ")
    tokens = (c.tokens.to(torch.float64) + d.delta).to(c.tokens.dtype)
    return TextEmbedding.from_tokens(tokens)

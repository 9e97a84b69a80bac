"""Synthetic captioned shapes: the toy image domain.

Each image is one colored shape on a background, described by a caption from a
finite grammar (color x shape x background x size modifier). The renderer also
returns an exact foreground mask, used for background-preservation metrics.

On disk a :class:`CaptionedImageSet` is a directory of PNGs plus
``manifest.tsv`` (``filename<TAB>caption`` per line, UTF-8).
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

IMAGE_SIZE = 32
MANIFEST_NAME = "manifest.tsv"

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (230, 210, 40),
    "purple": (140, 50, 170),
    "orange": (240, 140, 30),
}
SHAPES = ("circle", "square", "triangle")
BACKGROUNDS = ("white", "gray", "black", "striped")
MODIFIERS = ("", "small", "large")

_BG_RGB = {"white": (235, 235, 235), "gray": (128, 128, 128), "black": (20, 20, 20)}
_STRIPE_RGB = ((200, 200, 200), (90, 90, 90))
_RADIUS = {"small": 5.0, "": 7.5, "large": 10.0}
_OFFSETS = np.linspace(-1.0, 1.0, 5)  # sub-pixel center search in describe()


@dataclass(frozen=True)
class ShapeLabel:
    color: str
    shape: str
    background: str
    modifier: str = ""

    def __post_init__(self):
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        if self.modifier not in MODIFIERS:
            raise ValueError(f"unknown modifier {self.modifier!r}")

    def caption(self) -> str:
        noun = f"{self.modifier} {self.color}" if self.modifier else self.color
        return f"a {noun} {self.shape} on a {self.background} background"

    def replace(self, **kw) -> "ShapeLabel":
        fields = dict(color=self.color, shape=self.shape, background=self.background, modifier=self.modifier)
        fields.update(kw)
        return ShapeLabel(**fields)


def parse_caption(text: str) -> ShapeLabel:
    """Inverse of :meth:`ShapeLabel.caption`."""
    words = text.strip().split()
    if len(words) < 7 or words[0] != "a" or words[-1] != "background":
        raise ValueError(f"not a grammar caption: {text!r}")
    modifier = words[1] if len(words) == 8 else ""
    color, shape, bg = words[-6], words[-5], words[-2]
    return ShapeLabel(color=color, shape=shape, background=bg, modifier=modifier)


def all_labels() -> list[ShapeLabel]:
    return [ShapeLabel(*combo) for combo in itertools.product(COLORS, SHAPES, BACKGROUNDS, MODIFIERS)]


def grammar_words() -> list[str]:
    words = {"a", "on", "background"}
    words.update(COLORS)
    words.update(SHAPES)
    words.update(BACKGROUNDS)
    words.update(m for m in MODIFIERS if m)
    return sorted(words)


def shape_mask(shape: str, center: tuple[float, float], radius: float, size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean (size, size) mask of a shape centred at ``(cy, cx)``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = center
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy**2 + dx**2 <= radius**2
    if shape == "square":
        half = radius * 0.85
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if shape == "triangle":
        # apex up; base at cy + r/2
        top, base = cy - radius, cy + radius * 0.6
        frac = (yy - top) / (base - top)
        return (yy >= top) & (yy <= base) & (np.abs(dx) <= frac * radius)
    raise ValueError(f"unknown shape {shape!r}")


def background_array(background: str, size: int = IMAGE_SIZE) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.uint8)
    if background == "striped":
        rows = (np.arange(size) // 4) % 2
        img[:] = np.asarray(_STRIPE_RGB, dtype=np.uint8)[rows][:, None, :]
    else:
        img[:] = _BG_RGB[background]
    return img


def render(label: ShapeLabel, center: tuple[float, float] | None = None, size: int = IMAGE_SIZE):
    """Render ``label``; returns ``(uint8 image HxWx3, bool foreground mask HxW)``."""
    if center is None:
        center = (size / 2, size / 2)
    mask = shape_mask(label.shape, center, _RADIUS[label.modifier], size)
    img = background_array(label.background, size)
    img[mask] = COLORS[label.color]
    return img, mask


def describe(image: np.ndarray, min_iou: float = 0.8) -> ShapeLabel | None:
    """Recover the grammar label of a rendered image from its pixels.

    Picks the background pattern matching the most pixels, the palette color
    of the remaining pixels, then the shape and size whose re-rendered mask
    best overlaps them. Returns None when the image does not look like a
    render (no foreground, mixed colors, or best overlap below ``min_iou``).
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
        return None
    size = img.shape[0]
    matches = {b: (img == background_array(b, size)).all(axis=-1) for b in BACKGROUNDS}
    background = max(BACKGROUNDS, key=lambda b: matches[b].sum())
    fg = ~matches[background]
    if not fg.any():
        return None
    colors, counts = np.unique(img[fg], axis=0, return_counts=True)
    top = tuple(int(v) for v in colors[counts.argmax()])
    names = [n for n, rgb in COLORS.items() if rgb == top]
    if not names or counts.max() < 0.95 * fg.sum():
        return None
    ys, xs = np.nonzero(fg)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    best, best_iou = None, 0.0
    for shape in SHAPES:
        for modifier in MODIFIERS:
            r = _RADIUS[modifier]
            cy = y0 + r if shape == "triangle" else (y0 + y1) / 2
            for dy, dx in itertools.product(_OFFSETS, _OFFSETS):
                mask = shape_mask(shape, (cy + dy, (x0 + x1) / 2 + dx), r, size)
                iou = (mask & fg).sum() / (mask | fg).sum()
                if iou > best_iou:
                    best, best_iou = (shape, modifier), iou
    if best_iou < min_iou:
        return None
    return ShapeLabel(names[0], best[0], background, best[1])


@dataclass
class CaptionedImage:
    name: str
    image: np.ndarray
    caption: str
    mask: np.ndarray | None = None
    label: ShapeLabel | None = None
    center: tuple[float, float] | None = None


def image_key(image: np.ndarray) -> str:
    """Content hash used to identify an image regardless of where it came from."""
    arr = np.ascontiguousarray(np.asarray(image, dtype=np.uint8))
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


class CaptionedImageSet:
    """An ordered collection of captioned images."""

    def __init__(self, items: list[CaptionedImage]):
        self.items = list(items)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> CaptionedImage:
        return self.items[i]

    def __iter__(self):
        return iter(self.items)

    def images(self) -> np.ndarray:
        return np.stack([it.image for it in self.items])

    def captions(self) -> list[str]:
        return [it.caption for it in self.items]

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = []
        for it in self.items:
            if "\t" in it.name or "\t" in it.caption or "\n" in it.caption:
                raise ValueError(f"tab or newline in name/caption of {it.name!r}")
            save_png(directory / it.name, it.image)
            lines.append(f"{it.name}\t{it.caption}\n")
        (directory / MANIFEST_NAME).write_text("".join(lines), encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "CaptionedImageSet":
        directory = Path(directory)
        manifest = directory / MANIFEST_NAME
        if not manifest.is_file():
            raise FileNotFoundError(f"dataset manifest not found: {manifest}")
        items = []
        for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                name, caption = line.split("\t", 1)
            except ValueError:
                raise ValueError(f"{manifest}:{lineno}: expected 'filename<TAB>caption'") from None
            img = load_png(directory / name)
            try:
                label = parse_caption(caption)
            except ValueError:
                label = None
            items.append(CaptionedImage(name=name, image=img, caption=caption, label=label))
        return cls(items)


def make_toy_dataset(n: int, seed: int = 0, jitter: float = 4.0, size: int = IMAGE_SIZE) -> CaptionedImageSet:
    """Sample ``n`` random grammar images with jittered shape positions."""
    rng = np.random.default_rng(seed)
    labels = all_labels()
    items = []
    for i in range(n):
        label = labels[rng.integers(len(labels))]
        center = tuple(size / 2 + rng.uniform(-jitter, jitter, size=2))
        img, mask = render(label, center, size)
        items.append(
            CaptionedImage(
                name=f"img_{i:05d}.png", image=img, caption=label.caption(), mask=mask, label=label, center=center
            )
        )
    return CaptionedImageSet(items)


def save_png(path: str | Path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected uint8 HxWx3 image, got {arr.dtype} {arr.shape}")
    # fixed PNG settings so identical pixels give identical bytes
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def load_png(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()

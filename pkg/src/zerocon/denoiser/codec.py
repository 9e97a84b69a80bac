"""Image <-> latent codecs.

The toy stack works in pixel space, so its codec is an affine range map. Full-scale
latent codecs (a VAE, for instance) plug in through :class:`ExternalCodec`,
which only enforces the shape contract.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch


class IdentityCodec:
    """uint8 ``(H, W, 3)`` image <-> float32 ``(3, H, W)`` latent in ``[-1, 1]``."""

    def __init__(self, image_size: int = 32, channels: int = 3):
        self.image_size = image_size
        self.channels = channels

    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def encode(self, image: np.ndarray) -> torch.Tensor:
        arr = np.asarray(image)
        expected = (self.image_size, self.image_size, self.channels)
        if arr.shape != expected:
            raise ValueError(f"image shape {arr.shape} does not match codec {expected}")
        x = torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1).contiguous()
        return x / 127.5 - 1.0

    def decode(self, x0: torch.Tensor) -> np.ndarray:
        if tuple(x0.shape) != self.latent_shape():
            raise ValueError(f"latent shape {tuple(x0.shape)} does not match codec {self.latent_shape()}")
        x = ((x0.detach().to(torch.float64).clamp(-1.0, 1.0) + 1.0) * 127.5).round()
        return x.permute(1, 2, 0).numpy().astype(np.uint8)


class ExternalCodec:
    """Adapter for a pretrained latent codec (spatial ``factor`` down-sampling, ``channels`` latents).

    ``encode_fn`` / ``decode_fn`` do the actual work; this class checks shapes on
    both sides. The usual Stable Diffusion setting is ``factor=8, channels=4``.
    """

    def __init__(
        self,
        encode_fn: Callable[[np.ndarray], torch.Tensor],
        decode_fn: Callable[[torch.Tensor], np.ndarray],
        image_size: int = 512,
        factor: int = 8,
        channels: int = 4,
    ):
        if image_size % factor:
            raise ValueError(f"image size {image_size} not divisible by factor {factor}")
        self.encode_fn = encode_fn
        self.decode_fn = decode_fn
        self.image_size = image_size
        self.factor = factor
        self.channels = channels

    def latent_shape(self) -> tuple[int, int, int]:
        side = self.image_size // self.factor
        return (self.channels, side, side)

    def encode(self, image: np.ndarray) -> torch.Tensor:
        if np.asarray(image).shape != (self.image_size, self.image_size, 3):
            raise ValueError(f"image shape {np.asarray(image).shape} does not match {self.image_size}x{self.image_size}x3")
        z = self.encode_fn(image)
        if tuple(z.shape) != self.latent_shape():
            raise ValueError(f"backend returned latent {tuple(z.shape)}, expected {self.latent_shape()}")
        return z

    def decode(self, x0: torch.Tensor) -> np.ndarray:
        if tuple(x0.shape) != self.latent_shape():
            raise ValueError(f"latent shape {tuple(x0.shape)} does not match {self.latent_shape()}")
        img = np.asarray(self.decode_fn(x0))
        if img.shape != (self.image_size, self.image_size, 3):
            raise ValueError(f"backend returned image {img.shape}")
        return img


def encode_latent(image: np.ndarray, codec=None) -> torch.Tensor:
    return (codec or IdentityCodec(np.asarray(image).shape[0])).encode(image)


def decode_latent(x0: torch.Tensor, codec=None) -> np.ndarray:
    return (codec or IdentityCodec(x0.shape[-1], x0.shape[0])).decode(x0)

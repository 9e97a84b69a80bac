"""Scaled dot-product attention that also hands back its weight matrix."""

from __future__ import annotations

import math

import numpy as np
import torch


def attention(q, k, v):
    """Return ``(softmax(q k^T / sqrt(d)) v, weights)``.

    Works on ``(..., n, d)`` / ``(..., m, d)`` / ``(..., m, d_v)`` tensors. Numpy
    inputs give numpy outputs.
    """
    as_numpy = isinstance(q, np.ndarray)
    q, k, v = (torch.as_tensor(a) for a in (q, k, v))
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value counts differ: {k.shape[-2]} vs {v.shape[-2]}")
    d = q.shape[-1]
    if d < 1:
        raise ValueError("attention needs d >= 1")
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    weights = torch.softmax(logits, dim=-1)
    out = weights @ v
    if as_numpy:
        return out.numpy(), weights.numpy()
    return out, weights

"""Shared numerically-stable primitives (plain numpy, no autodiff)."""

from __future__ import annotations

import math

import numpy as np

# Below this norm a gate input is treated as degenerate (zero direction).
NORM_EPS = 1e-12


def stable_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction along ``axis``."""
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic that never exponentiates a positive argument."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def cosine_logits(u: np.ndarray, embeddings: np.ndarray, temperature: float):
    """Temperature-scaled cosine similarity of each row vector against embedding columns.

    Args:
        u: array of shape (..., D), one direction vector per grid position.
        embeddings: array of shape (D, N), one embedding column per expert.
        temperature: positive sharpness divisor applied to every logit.

    Returns:
        (logits, inv_norm_u, degenerate): logits has shape (..., N) and is
        exactly zero (uniform after softmax) wherever ``u`` has norm below
        NORM_EPS; ``degenerate`` is the boolean mask of those positions.
    """
    norm_u = np.linalg.norm(u, axis=-1)
    norm_e = np.linalg.norm(embeddings, axis=0)
    degenerate = norm_u < NORM_EPS
    inv_norm_u = np.where(degenerate, 0.0, 1.0 / np.where(degenerate, 1.0, norm_u))
    dots = u @ embeddings
    logits = dots * inv_norm_u[..., None] / (temperature * norm_e)
    return logits, inv_norm_u, degenerate

"""Positional embeddings: sine-cosine, learned, and stochastic (StoP).

Stochastic positions are drawn as ``psi_j + A n_j`` with
``n_j ~ N(0, sigma I)`` (``sigma`` is a *variance*, so ``std = sqrt(sigma)``),
which gives ``psi_hat_j ~ N(psi_j, sigma A A^T)``.  Gradients reach ``A``
through the product with the fixed noise draw; the sampler itself is not
differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

EMBED_KINDS = ("sincos", "learned", "stop", "fixed_cov")
NOISE_TARGETS = ("masked_only", "context_only", "both", "none")


@dataclass
class PosTable:
    psi: Tensor  # [K, d_p]
    kind: str = "sincos"


def _sincos_1d(positions, dim):
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    angles = np.outer(positions, omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_2d(grid_h, grid_w, d_p, dtype=np.float32):
    """Fixed 2-D sine-cosine table, shape ``[grid_h * grid_w, d_p]``.

    The first half of the channels encodes the row index, the second half
    the column index; within each half, sines come before cosines.
    """
    if d_p % 4:
        raise ConfigError(f"sincos embedding dim must be divisible by 4, got {d_p}")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    table = np.concatenate(
        [_sincos_1d(rows.reshape(-1), d_p // 2), _sincos_1d(cols.reshape(-1), d_p // 2)], axis=1
    )
    return PosTable(Tensor(table.astype(dtype)), "sincos")


def learned_table(grid_h, grid_w, d_p, rng, init_std=0.02, dtype=np.float32):
    """Trainable table initialised at sincos plus small Gaussian noise."""
    base = sincos_2d(grid_h, grid_w, d_p, dtype=np.float64).psi.data
    table = base + init_std * rng.standard_normal(base.shape)
    return PosTable(Tensor(table.astype(dtype), requires_grad=True), "learned")


def sample_noise(num_tokens, d_e, sigma, rng, batch=None, dtype=np.float32):
    """Gaussian noise with mean 0 and variance ``sigma`` per entry.

    Returns ``[num_tokens, d_e]``, or ``[batch, num_tokens, d_e]`` when
    ``batch`` is given.
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be non-negative, got {sigma}")
    shape = (num_tokens, d_e) if batch is None else (batch, num_tokens, d_e)
    if sigma == 0:
        return np.zeros(shape, dtype=dtype)
    return (np.sqrt(sigma) * rng.standard_normal(shape)).astype(dtype)


def _project(v, A):
    """Row-wise ``A v`` for ``v[..., d_e]`` and ``A[d_p, d_e]``."""
    if v.shape[-1] != A.shape[1]:
        raise DimensionError(f"cannot project vectors of shape {v.shape} with A of shape {A.shape}")
    return T.matmul(v, T.transpose(A))


def stop_embed(psi_rows, A, noise):
    """``A n_j + psi_j`` for every row ``j``."""
    psi_rows = T._wrap(psi_rows)
    noise = T._wrap(noise)
    if noise.shape[-2] != psi_rows.shape[-2]:
        raise DimensionError(f"noise rows {noise.shape} do not match positions {psi_rows.shape}")
    projected = _project(noise, A)
    if projected.shape[-1] != psi_rows.shape[-1]:
        raise DimensionError(f"A maps to dim {projected.shape[-1]} but positions have dim {psi_rows.shape[-1]}")
    return T.add(projected, psi_rows)


def assemble_context(s_x, psi_x, A, noise_ctx=None):
    """Context tokens ``c_i = A s_i + psi_i`` (plus ``A n_i`` when ``noise_ctx`` is given).

    ``s_x`` is ``[b, t, d_e]``; ``psi_x`` is ``[t, d_p]`` or ``[b, t, d_p]``.
    """
    if s_x.shape[-2] != psi_x.shape[-2]:
        raise DimensionError(f"{s_x.shape[-2]} context tokens but {psi_x.shape[-2]} positions")
    c = T.add(_project(s_x, A), psi_x)
    if noise_ctx is not None:
        c = T.add(c, _project(T._wrap(noise_ctx), A))
    return c


def assemble_masked(psi_y, A, m_tilde, sigma, rng, b, noise_target="masked_only", noise=None):
    """Masked tokens ``m_j = A n_j + psi_j + m_tilde``, fresh noise per token and image.

    ``noise_target`` of ``none`` or ``context_only`` drops the noise term, giving
    ``psi_j + m_tilde``.  Passing ``noise`` explicitly bypasses the sampler.
    """
    t = psi_y.shape[-2]
    d_p = psi_y.shape[-1]
    if m_tilde.shape != (d_p,):
        raise DimensionError(f"m_tilde shape {m_tilde.shape} does not match position dim {d_p}")
    psi_y = T._wrap(psi_y)
    if noise_target in ("masked_only", "both"):
        if noise is None:
            noise = sample_noise(t, A.shape[1], sigma, rng, batch=b, dtype=A.dtype)
        base = stop_embed(psi_y, A, noise)
    else:
        base = psi_y if psi_y.ndim == 3 else T.add(Tensor(np.zeros((b, t, d_p), dtype=psi_y.dtype)), psi_y)
    return T.add(base, m_tilde)


def fixed_cov_embed(psi_rows, sigma, rng, batch=None):
    """``psi_j + g_j`` with ``g_j ~ N(0, sigma I)`` directly in embedding space."""
    psi_rows = T._wrap(psi_rows)
    shape = psi_rows.shape if batch is None else (batch,) + psi_rows.shape[-2:]
    if sigma < 0:
        raise ConfigError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        g = np.zeros(shape, dtype=psi_rows.dtype)
    else:
        g = (np.sqrt(sigma) * rng.standard_normal(shape)).astype(psi_rows.dtype)
    return T.add(Tensor(g), psi_rows)

"""Column-norm equalization folded into the preceding normalization gains.

Projections that read a normalized-and-gained vector can have each input
column rescaled as long as the gain entry feeding that column is divided by
the same factor: W @ (g * x) == (W * s) @ ((g / s) * x) in exact arithmetic.
Equalizing the column norms of the stacked QKV matrix and of the MLP up
projection tightens per-group weight ranges before quantization without
changing the function.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor
from ..model import ModelParams

__all__ = ["fuse_norms", "column_norms"]


def column_norms(w: np.ndarray) -> np.ndarray:
    """(in_dim,) l2 norm of each input column."""
    return np.linalg.norm(np.asarray(w), axis=0)


def _equalize(w: Tensor, gain: Tensor) -> None:
    c = column_norms(w.data)
    t = c.mean(dtype=w.data.dtype)
    s = np.where(c > 0, t / np.where(c > 0, c, 1), 1).astype(w.data.dtype)
    w.data *= s[None, :]
    gain.data /= s


def fuse_norms(params: ModelParams) -> ModelParams:
    """Equalized copy: QKV and up-projection columns share one norm per block."""
    fused = params.copy()
    for blk in fused.blocks:
        _equalize(blk.wqkv, blk.attn_gain)
        _equalize(blk.wup, blk.mlp_gain)
    return fused

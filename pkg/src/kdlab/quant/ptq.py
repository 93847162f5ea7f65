"""One-shot weight quantization: plain rounding and error compensation.

rtn_quantize rounds every element to its nearest lattice point. gptq_quantize
walks input columns in natural order and, after fixing each column, spreads
the rounding residual onto the not-yet-quantized columns through the rows of
the inverse-Hessian Cholesky factor, which minimizes the calibration-weighted
output error. Both share the same grid: ranges always come from the original
weights, so with an identity Hessian the two agree code for code.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..corpus import TokenChunk
from ..model import ModelParams, forward_batch
from .formats import (
    QuantAux,
    QuantFormat,
    QuantizedTensor,
    apply_aux_columns,
    compute_aux,
    pack_tensor_codes,
    quantize_tensor,
)

DAMP_FRACTION = 0.01

__all__ = [
    "capture_calibration",
    "calib_hessian",
    "rtn_quantize",
    "gptq_quantize",
    "quant_error_trace",
]


def capture_calibration(
    params: ModelParams,
    chunks: Sequence[TokenChunk],
    batch_size: int = 8,
) -> dict[str, np.ndarray]:
    """Inputs seen by every projection during a calibration pass.

    Returns {projection name: (n_positions, in_dim) float32}.
    """
    if not chunks:
        raise ValueError("zero calibration set")
    capture: dict[str, list[np.ndarray]] = {}
    for lo in range(0, len(chunks), batch_size):
        batch = chunks[lo:lo + batch_size]
        toks = np.stack([c.tokens for c in batch])
        bnds = [c.doc_boundaries for c in batch]
        forward_batch(params, toks, bnds, capture=capture)
    return {name: np.concatenate(rows, axis=0) for name, rows in capture.items()}


def calib_hessian(layer_inputs: np.ndarray) -> np.ndarray:
    """Damped input second-moment matrix, (in_dim, in_dim) float64.

    H = sum_x x x^T + 0.01 * mean(diag) * I; symmetric and, for any
    non-degenerate calibration set, positive definite.
    """
    x = np.asarray(layer_inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("zero calibration set")
    h = x.T @ x
    h = (h + h.T) / 2.0
    damp = DAMP_FRACTION * float(np.mean(np.diag(h)))
    h[np.diag_indices_from(h)] += damp
    return h


def rtn_quantize(w: np.ndarray, fmt: QuantFormat) -> QuantizedTensor:
    """Independent nearest-grid rounding of every element."""
    return quantize_tensor(w, fmt)


def _inverse_cholesky_rows(h: np.ndarray) -> np.ndarray:
    """Upper-triangular U with inv(H) = U^T U; raises if H is not PD."""
    try:
        np.linalg.cholesky(h)
    except np.linalg.LinAlgError as e:
        raise ValueError(
            "Hessian is not positive definite; increase damping or use more "
            "calibration data"
        ) from e
    h_inv = np.linalg.inv(h)
    h_inv = (h_inv + h_inv.T) / 2.0
    try:
        l = np.linalg.cholesky(h_inv)
    except np.linalg.LinAlgError as e:
        raise ValueError("inverse Hessian lost positive definiteness") from e
    return l.T


def gptq_quantize(
    w: np.ndarray, h: np.ndarray, fmt: QuantFormat
) -> QuantizedTensor:
    """Sequential column quantization with residual propagation.

    The grid is fixed from the original weights before any column moves, so
    scales match rtn_quantize exactly; only the codes may differ.
    """
    w = np.ascontiguousarray(w, dtype=np.float32)
    out_dim, in_dim = w.shape
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (in_dim, in_dim):
        raise ValueError(f"Hessian shape {h.shape} does not match in_dim {in_dim}")
    aux = compute_aux(w, fmt)
    u = _inverse_cholesky_rows(h)

    work = w.astype(np.float64)
    codes = np.empty((out_dim, in_dim), dtype=np.uint16 if fmt.kind == "bf16" else np.uint8)
    for j in range(in_dim):
        col = work[:, j].astype(np.float32)
        cj, yj, _ = apply_aux_columns(col, aux, j)
        codes[:, j] = cj[:, 0]
        if j + 1 < in_dim:
            err = (work[:, j] - yj[:, 0].astype(np.float64)) / u[j, j]
            work[:, j + 1:] -= np.outer(err, u[j, j + 1:])

    return QuantizedTensor(fmt, aux.shape, pack_tensor_codes(codes, fmt), aux)


def quant_error_trace(w: np.ndarray, q: np.ndarray, h: np.ndarray) -> float:
    """tr((W - Q) H (W - Q)^T): calibration-weighted squared output error."""
    e = np.asarray(w, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    return float(np.sum((e @ np.asarray(h, dtype=np.float64)) * e))
